import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deskfpn import tensor as T
from deskfpn.backbone import Backbone, BackboneConfig, ResidualBlock
from deskfpn.tensor import ShapeError, Tensor


def conv_params(cin, cout, k):
    return k * k * cin * cout + cout


def expected_param_count(stem, stages):
    """Closed form for one block per stage.

    stem 3x3 conv (3 -> stem); each block has two 3x3 convs plus a 1x1
    projection whenever it changes stride or width. Stages 3..5 always
    stride, stage 2 projects only if its width differs from the stem.
    """
    total = conv_params(3, stem, 3)
    cin = stem
    for s, ch in enumerate(stages):
        total += conv_params(cin, ch, 3) + conv_params(ch, ch, 3)
        if s > 0 or cin != ch:
            total += conv_params(cin, ch, 1)
        cin = ch
    return total


def test_param_count_default():
    # 448 + (2320 + 2320) + (4640 + 9248 + 544) + (18496 + 36928 + 2112) + (73856 + 147584 + 8320)
    net = Backbone(BackboneConfig())
    assert expected_param_count(16, [16, 32, 64, 128]) == 306816
    assert net.num_parameters() == 306816


@settings(max_examples=15, deadline=None)
@given(stem=st.integers(1, 8), stages=st.lists(st.integers(1, 12), min_size=4, max_size=4))
def test_param_count_formula(stem, stages):
    net = Backbone(BackboneConfig(stem_channels=stem, stage_channels=stages))
    assert net.num_parameters() == expected_param_count(stem, stages)


@pytest.mark.parametrize("size,expected", [(64, {2: 16, 3: 8, 4: 4, 5: 2}), (32, {2: 8, 3: 4, 4: 2, 5: 1})])
def test_stride_contract_examples(size, expected):
    cfg = BackboneConfig(stem_channels=4, stage_channels=[4, 6, 8, 10])
    c = Backbone(cfg)(Tensor(np.zeros((1, 3, size, size))))
    for k, ch in zip((2, 3, 4, 5), cfg.stage_channels):
        assert c[k].shape == (1, ch, expected[k], expected[k])


@settings(max_examples=10, deadline=None)
@given(h=st.integers(1, 3), w=st.integers(1, 3), n=st.integers(1, 2))
def test_stride_contract_property(h, w, n):
    net = Backbone(BackboneConfig(stem_channels=2, stage_channels=[2, 2, 2, 2]))
    c = net(Tensor(np.zeros((n, 3, 32 * h, 32 * w))))
    for k, t in c.items():
        assert t.shape[2:] == (32 * h // 2 ** k, 32 * w // 2 ** k)


@pytest.mark.parametrize("shape", [(1, 3, 48, 64), (1, 3, 64, 40), (1, 1, 64, 64), (3, 64, 64)])
def test_rejects_bad_inputs(shape):
    with pytest.raises(ShapeError):
        Backbone(BackboneConfig())(Tensor(np.zeros(shape)))


def test_config_validation():
    with pytest.raises(ValueError):
        BackboneConfig(stage_channels=[1, 2, 3])
    with pytest.raises(ValueError):
        BackboneConfig(blocks_per_stage=[1, 0, 1, 1])
    with pytest.raises(ValueError):
        BackboneConfig(stem_channels=0)


def test_deterministic_init_and_forward():
    img = Tensor(np.random.default_rng(0).uniform(0, 1, (1, 3, 64, 64)))
    a, b = Backbone(BackboneConfig(seed=3)), Backbone(BackboneConfig(seed=3))
    for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb and pa.data.tobytes() == pb.data.tobytes()
    assert a(img).c5.data.tobytes() == b(img).c5.data.tobytes()
    c = Backbone(BackboneConfig(seed=4))
    assert not np.array_equal(a.stem.weight.data, c.stem.weight.data)


def test_more_blocks_per_stage():
    cfg = BackboneConfig(stem_channels=4, stage_channels=[4, 4, 8, 8], blocks_per_stage=[2, 1, 3, 1])
    net = Backbone(cfg)
    assert [len(s) for s in net.stages] == [2, 1, 3, 1]
    assert net(Tensor(np.zeros((1, 3, 32, 32)))).c5.shape == (1, 8, 1, 1)


def test_residual_identity_with_zero_weights():
    rng = np.random.default_rng(0)
    block = ResidualBlock(rng, 5, 5, 1)
    for p in block.parameters():
        p.data[...] = 0
    # relu output is non-negative, so the identity holds on any post-relu input
    x = Tensor(np.abs(rng.standard_normal((2, 5, 6, 6))))
    np.testing.assert_array_equal(block(x).data, x.data)


def test_stage_outputs_are_non_negative():
    c = Backbone(BackboneConfig())(Tensor(np.random.default_rng(1).standard_normal((1, 3, 64, 64))))
    for _, t in c.items():
        assert t.data.min() >= 0


def test_backbone_grad_check():
    with T.default_dtype(np.float64):
        net = Backbone(BackboneConfig(stem_channels=2, stage_channels=[2, 3, 3, 4], seed=1))
        img = Tensor(np.random.default_rng(2).uniform(-1, 1, (1, 3, 32, 32)))
        w = np.random.default_rng(3).standard_normal((1, 3, 2, 2))

        def f():
            c = net(img)
            return T.add(T.sum(T.mul(c.c4, Tensor(w))), T.sum(c.c5))

        assert T.grad_check(f, [img] + net.parameters(), max_coords=20) < 1e-4
