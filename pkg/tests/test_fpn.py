import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deskfpn import tensor as T
from deskfpn.backbone import Backbone, BackboneConfig, BottomUpFeatures
from deskfpn.fpn import FPN, PyramidVariant, build_pyramid, count_convs
from deskfpn.tensor import ShapeError, Tensor

CH = {2: 3, 3: 4, 4: 5, 5: 6}


def features(rng, size=32, n=1, ch=CH, grad=False):
    return BottomUpFeatures(*[Tensor(rng.standard_normal((n, ch[k], size // 2 ** k, size // 2 ** k)),
                                     requires_grad=grad) for k in (2, 3, 4, 5)])


def test_level_shapes_from_image():
    bb = Backbone(BackboneConfig())
    fpn = FPN(bb.out_channels, d=256, with_p6=True)
    p = fpn(bb(Tensor(np.zeros((1, 3, 64, 64)))))
    assert {k: t.shape for k, t in p.levels.items()} == {
        2: (1, 256, 16, 16), 3: (1, 256, 8, 8), 4: (1, 256, 4, 4), 5: (1, 256, 2, 2), 6: (1, 256, 1, 1)}
    assert p.has_p6 and p.d == 256
    assert p.strides == {2: 4, 3: 8, 4: 16, 5: 32, 6: 64}


def test_zero_input_zero_weights_gives_zero_pyramid():
    bb = Backbone(BackboneConfig())
    fpn = FPN(bb.out_channels, d=8, with_p6=True)
    for p in fpn.parameters():
        p.data[...] = 0
    out = fpn(bb(Tensor(np.zeros((1, 3, 64, 64)))))
    for t in out.levels.values():
        assert not t.data.any()


def test_manual_construction_p4_is_lateral_plus_constant():
    # d = 1: lateral 5 emits the constant c, output convs are identity taps,
    # lateral 4 is the identity, so P4 = C4 + c and P5 = c.
    rng = np.random.default_rng(0)
    ch = {k: 1 for k in (2, 3, 4, 5)}
    fpn = FPN(ch, d=1)
    for p in fpn.parameters():
        p.data[...] = 0
    c = 2.5
    fpn.lateral[5].bias.data[...] = c
    for k in (4, 3, 2):
        fpn.lateral[k].weight.data[...] = 1
    for conv in fpn.output.values():
        conv.weight.data[0, 0, 1, 1] = 1
    feats = features(rng, 64, ch=ch)
    p = fpn(feats)
    np.testing.assert_allclose(p[5].data, np.full((1, 1, 2, 2), c))
    np.testing.assert_allclose(p[4].data, feats.c4.data + c, rtol=1e-6)
    # one more level down the chain also carries the lateral C4 contribution
    up = np.repeat(np.repeat(feats.c4.data + c, 2, axis=2), 2, axis=3)
    np.testing.assert_allclose(p[3].data, up + feats.c3.data, rtol=1e-6)


@settings(max_examples=10, deadline=None)
@given(chs=st.lists(st.integers(1, 6), min_size=4, max_size=4), d=st.integers(1, 9),
       variant=st.sampled_from(list(PyramidVariant)))
def test_channel_invariant(chs, d, variant):
    ch = dict(zip((2, 3, 4, 5), chs))
    fpn = FPN(ch, d=d, variant=variant, with_p6=True)
    p = fpn(features(np.random.default_rng(0), 64, ch=ch))
    assert all(t.shape[1] == d for t in p.levels.values())
    ks = sorted(p.levels)
    for a, b in zip(ks, ks[1:]):
        assert p[a].shape[2] == 2 * p[b].shape[2]


def test_channel_mismatch_raises():
    fpn = FPN(CH, d=4)
    bad = features(np.random.default_rng(0), 32, ch={2: 3, 3: 4, 4: 7, 5: 6})
    with pytest.raises(ShapeError):
        fpn(bad)


def test_top_down_spatial_mismatch_raises():
    fpn = FPN(CH, d=4)
    rng = np.random.default_rng(0)
    f = features(rng, 32)
    f.c3 = Tensor(rng.standard_normal((1, 4, 5, 5)))
    with pytest.raises(ShapeError, match="level 3"):
        build_pyramid(f, fpn)


def test_grad_flow_from_p5_reaches_only_c5():
    f = features(np.random.default_rng(1), 32, grad=True)
    T.sum(FPN(CH, d=4)(f)[5]).backward()
    for k in (2, 3, 4):
        assert not f[k].grad.any()
    assert f.c5.grad.any()


def test_grad_flow_from_p2_reaches_every_level():
    f = features(np.random.default_rng(2), 32, grad=True)
    T.sum(FPN(CH, d=4)(f)[2]).backward()
    for k in (2, 3, 4, 5):
        assert f[k].grad.any()


def test_pyramid_grad_check():
    with T.default_dtype(np.float64):
        rng = np.random.default_rng(3)
        f = features(rng, 64, grad=True)
        fpn = FPN(CH, d=3, with_p6=True, seed=1)
        ws = {k: rng.standard_normal((1, 3, 64 // 2 ** k, 64 // 2 ** k)) for k in (2, 3, 4, 5, 6)}

        def loss():
            p = fpn(f)
            terms = [T.sum(T.mul(p[k], Tensor(ws[k]))) for k in ws]
            out = terms[0]
            for t in terms[1:]:
                out = T.add(out, t)
            return out

        assert T.grad_check(loss, [f[k] for k in (2, 3, 4, 5)] + fpn.parameters(), max_coords=30) < 1e-4


def test_variant_inventories():
    full = FPN(CH, 4, PyramidVariant.FULL_FPN)
    nolat = FPN(CH, 4, PyramidVariant.TOP_DOWN_NO_LATERAL)
    bottom = FPN(CH, 4, PyramidVariant.BOTTOM_UP_ONLY)
    finest = FPN(CH, 4, PyramidVariant.FINEST_ONLY)
    assert count_convs(full, 1) == 4 and count_convs(full, 3) == 4
    assert count_convs(nolat, 1) == 1
    assert [n for n, _ in nolat.named_parameters() if n.startswith("lateral")] == [
        "lateral.5.weight", "lateral.5.bias"]
    f = features(np.random.default_rng(0), 32)
    assert bottom(f).n_upsamples == 0
    assert full(f).n_upsamples == 3 and nolat(f).n_upsamples == 3
    assert list(finest(f).levels) == [2]
    assert count_convs(finest, 3) == 1


def test_no_lateral_ignores_lower_features():
    fpn = FPN(CH, 4, PyramidVariant.TOP_DOWN_NO_LATERAL)
    rng = np.random.default_rng(4)
    a = features(rng, 32)
    b = BottomUpFeatures(Tensor(a.c2.data * 0), Tensor(a.c3.data + 1), Tensor(-a.c4.data), a.c5)
    for k in (2, 3, 4, 5):
        np.testing.assert_array_equal(fpn(a)[k].data, fpn(b)[k].data)


def test_bottom_up_only_levels_are_independent():
    fpn = FPN(CH, 4, PyramidVariant.BOTTOM_UP_ONLY)
    rng = np.random.default_rng(5)
    a = features(rng, 32)
    b = BottomUpFeatures(a.c2, a.c3, a.c4, Tensor(a.c5.data * 3))
    for k in (2, 3, 4):
        np.testing.assert_array_equal(fpn(a)[k].data, fpn(b)[k].data)


def test_p6_has_no_parameters_and_subsamples_p5():
    a = FPN(CH, 4, with_p6=True)
    b = FPN(CH, 4, with_p6=False)
    assert a.num_parameters() == b.num_parameters()
    p = a(features(np.random.default_rng(6), 64))
    np.testing.assert_array_equal(p[6].data, T.max_subsample2x(p[5]).data)


@settings(max_examples=15, deadline=None)
@given(alpha=st.floats(-4, 4), seed=st.integers(0, 1000), variant=st.sampled_from(list(PyramidVariant)))
def test_linearity_without_biases(alpha, seed, variant):
    with T.default_dtype(np.float64):
        fpn = FPN(CH, 3, variant, with_p6=True, seed=seed)
        for name, p in fpn.named_parameters():
            if name.endswith("bias"):
                p.data[...] = 0
        f = features(np.random.default_rng(seed), 64)
        g = BottomUpFeatures(*[Tensor(alpha * f[k].data) for k in (2, 3, 4, 5)])
        pf, pg = fpn(f), fpn(g)
        for k in pf.levels:
            if k == 6 and alpha < 0:
                continue  # max is only positively homogeneous
            np.testing.assert_allclose(pg[k].data, alpha * pf[k].data, atol=1e-9)


def test_parameter_names_are_namespaced():
    from deskfpn.models import ProposalNet
    from deskfpn.config import RunConfig

    names = [n for n, _ in ProposalNet(RunConfig()).named_parameters()]
    assert any(n.startswith("fpn.lateral.2.") for n in names)
    assert all(n.split(".")[0] in {"backbone", "fpn", "rpn"} for n in names)
