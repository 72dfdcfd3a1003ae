import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deskfpn.metrics import (SIZE_BINS, EvalConfig, ImageDetections, average_precision,
                             average_recall, interpolated_ap, mask_iou, mask_iou_matrix,
                             match_greedy, read_report, write_report)

from oracles import naive_ap, naive_recall


def random_instance(rng, n_images=5, n_classes=3, max_gt=5, max_det=12, size=160):
    """GT spanning all three size bins and detections jittered around them plus clutter."""
    gts, dets = [], []
    for _ in range(n_images):
        g = int(rng.integers(0, max_gt + 1))
        xy = rng.uniform(0, size * 0.6, (g, 2))
        wh = np.exp(rng.uniform(np.log(8), np.log(140), (g, 2)))
        gb = np.concatenate([xy, xy + wh], axis=1)
        gc = rng.integers(1, n_classes + 1, g)
        d = int(rng.integers(0, max_det + 1))
        src = rng.integers(0, max(g, 1), d)
        jitter = rng.normal(0, 0.12, (d, 4)) * np.tile(wh[src] if g else np.full((d, 2), 30.0), 2)
        db = (gb[src] if g else rng.uniform(0, size, (d, 4))) + jitter
        clutter = rng.random(d) < 0.3
        cxy = rng.uniform(0, size, (int(clutter.sum()), 2))
        db[clutter] = np.concatenate([cxy, cxy + rng.uniform(5, 80, (len(cxy), 2))], axis=1)
        db[:, 2:] = np.maximum(db[:, 2:], db[:, :2] + 1)
        dc = np.where(rng.random(d) < 0.8, gc[src] if g else 1, rng.integers(1, n_classes + 1, d))
        ds = np.round(rng.random(d), 1)  # coarse scores produce ties
        gts.append((gb, gc))
        dets.append(ImageDetections(db, ds, dc))
    return dets, gts


def as_oracle(dets, gts):
    od = [[(float(s), list(b), int(c)) for b, s, c in zip(d.boxes, d.scores, d.classes)] for d in dets]
    og = [[(list(b), int(c)) for b, c in zip(gb, gc)] for gb, gc in gts]
    return od, og


# ---------------------------------------------------------------- AR


def test_ar_examples():
    gt = [np.array([[0, 0, 10, 10], [20, 20, 40, 40], [50, 50, 60, 60]], float)]
    assert average_recall(gt, gt, 100)["AR"] == 1.0
    assert average_recall([np.zeros((0, 4))], gt, 100)["AR"] == 0.0
    # third proposal overlaps its GT at IoU 0.6: (0,0,10,10) vs (0,0,10,6)
    props = [np.array([[0, 0, 10, 10], [20, 20, 40, 40], [50, 50, 60, 56]], float)]
    ar = average_recall(props, gt, 100)["AR"]
    assert ar == pytest.approx(23 / 30, abs=1e-12)
    assert ar == pytest.approx(naive_recall(props, gt, 100), abs=1e-12)


def test_ar_budget_truncates():
    gt = [np.array([[0, 0, 10, 10], [20, 20, 30, 30]], float)]
    props = [np.array([[50, 50, 60, 60], [0, 0, 10, 10], [20, 20, 30, 30]], float)]
    assert average_recall(props, gt, 1)["AR"] == 0.0
    assert average_recall(props, gt, 2)["AR"] == 0.5
    assert average_recall(props, gt, 3)["AR"] == 1.0


def test_ar_size_bins():
    gt = [np.array([[0, 0, 10, 10], [0, 0, 50, 50], [0, 0, 120, 120]], float)]
    props = [np.array([[0, 0, 50, 50]], float)]
    ar = average_recall(props, gt, 10)
    assert ar["AR_s"] == 0.0 and ar["AR_m"] == 1.0 and ar["AR_l"] == 0.0
    assert ar["AR"] == pytest.approx(1 / 3)


def test_matching_is_one_to_one():
    ious = np.array([[0.9, 0.8], [0.95, 0.7], [0.6, 0.6]])
    m = match_greedy(ious, 0.5)
    assert m.tolist() == [0, 1, -1]
    assert len(set(m[m >= 0].tolist())) == (m >= 0).sum()


@settings(max_examples=120, deadline=None)
@given(seed=st.integers(0, 10 ** 6), budget=st.sampled_from([1, 3, 10, 100]))
def test_ar_matches_oracle(seed, budget):
    rng = np.random.default_rng(seed)
    dets, gts = random_instance(rng)
    props = [d.boxes[np.argsort(-d.scores, kind="stable")] for d in dets]
    g = [gb for gb, _ in gts]
    got = average_recall(props, g, budget)
    assert got["AR"] == pytest.approx(naive_recall(props, g, budget), abs=1e-12)
    for name, rng_ in SIZE_BINS.items():
        assert got[f"AR_{name}"] == pytest.approx(naive_recall(props, g, budget, rng_), abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10 ** 6))
def test_ar_monotone_in_budget(seed):
    dets, gts = random_instance(np.random.default_rng(seed))
    props = [d.boxes for d in dets]
    g = [gb for gb, _ in gts]
    vals = [average_recall(props, g, b)["AR"] for b in (1, 2, 5, 100)]
    assert all(0 <= v <= 1 for v in vals)
    assert vals == sorted(vals)


# ---------------------------------------------------------------- AP


def test_ap_perfect():
    gb = np.array([[0, 0, 10, 10], [20, 20, 60, 60]], float)
    gts = [(gb, np.array([1, 2]))]
    dets = [ImageDetections(gb, np.array([0.9, 0.8]), np.array([1, 2]))]
    ap = average_precision(dets, gts)
    assert ap["AP"] == 1.0 and ap["AP50"] == 1.0


def test_ap50_tp_then_fp_is_one():
    gts = [(np.array([[0, 0, 10, 10]], float), np.array([1]))]
    dets = [ImageDetections(np.array([[0, 0, 10, 10], [30, 30, 40, 40]], float), np.array([0.9, 0.5]),
                            np.array([1, 1]))]
    assert average_precision(dets, gts)["AP50"] == 1.0


def test_ap_fp_then_tp_is_half():
    # precision 1/2 at recall 1 for every recall point
    assert interpolated_ap(np.array([0, 1]), 1) == pytest.approx(0.5)
    assert interpolated_ap(np.array([]), 3) == 0.0


@settings(max_examples=120, deadline=None)
@given(seed=st.integers(0, 10 ** 6))
def test_ap_matches_oracle(seed):
    dets, gts = random_instance(np.random.default_rng(seed))
    got = average_precision(dets, gts)
    od, og = as_oracle(dets, gts)
    ap, ap50 = naive_ap(od, og)
    assert got["AP"] == pytest.approx(ap, abs=1e-12)
    assert got["AP50"] == pytest.approx(ap50, abs=1e-12)
    for name, rng_ in SIZE_BINS.items():
        assert got[f"AP_{name}"] == pytest.approx(naive_ap(od, og, rng_)[0], abs=1e-12)
    assert 0 <= got["AP"] <= got["AP50"] <= 1


def test_eval_config_validation():
    with pytest.raises(ValueError):
        EvalConfig(iou_thresholds=[0.5, 0.5])
    with pytest.raises(ValueError):
        EvalConfig(iou_thresholds=[0.5, 1.0])


# ---------------------------------------------------------------- masks and reports


def test_mask_iou_examples():
    a = np.zeros((10, 10), bool)
    a[:, :4] = True
    b = np.zeros((10, 10), bool)
    b[:, 2:6] = True
    assert mask_iou(a, b) == pytest.approx(1 / 3)
    assert mask_iou(a, a) == 1.0
    assert mask_iou(a, ~a) == 0.0
    assert mask_iou(np.zeros((3, 3)), np.zeros((3, 3))) == 0.0
    np.testing.assert_allclose(mask_iou_matrix([a, b], [b]), [[1 / 3], [1.0]])


def test_mask_iou_shape_mismatch():
    with pytest.raises(ValueError):
        mask_iou(np.zeros((2, 2)), np.zeros((3, 3)))


def test_report_round_trip(tmp_path):
    path = tmp_path / "metrics.txt"
    write_report(path, {"AR100": 0.5, "AR1k": 0.123456789}, {"task": "proposals"})
    text = path.read_text()
    assert text == "# task: proposals\nAR100 = 0.500000\nAR1k = 0.123457\n"
    assert read_report(path) == {"AR100": 0.5, "AR1k": 0.123457}
