import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from deskfpn import tensor as T
from deskfpn.nn import SGD, Parameter, load_weights, save_weights, sgd_step
from deskfpn.tensor import ShapeError, Tensor

from oracles import naive_conv2d


@pytest.fixture
def f64():
    with T.default_dtype(np.float64):
        yield


def rand(rng, *shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True)


# ---------------------------------------------------------------- conv2d


def test_conv_sum_of_ones():
    out = T.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))))
    assert out.shape == (1, 1, 1, 1)
    assert out.data.item() == 9.0


def test_conv_identity_kernel():
    x = Tensor([[[[1, 2], [3, 4]]]])
    out = T.conv2d(x, Tensor(np.ones((1, 1, 1, 1))))
    np.testing.assert_array_equal(out.data, [[[[1, 2], [3, 4]]]])


def test_conv_matches_naive_oracle(f64):
    rng = np.random.default_rng(0)
    x, w, b = rng.standard_normal((2, 3, 8, 8)), rng.standard_normal((4, 3, 3, 3)), rng.standard_normal(4)
    out = T.conv2d(Tensor(x), Tensor(w), Tensor(b), padding=1)
    assert out.shape == (2, 4, 8, 8)
    np.testing.assert_allclose(out.data, naive_conv2d(x, w, b, 1, 1), atol=1e-6)


@settings(max_examples=40, deadline=None)
@given(n=st.integers(1, 2), c=st.integers(1, 4), o=st.integers(1, 4), h=st.integers(1, 9),
       w=st.integers(1, 9), k=st.sampled_from([1, 3, 5]), stride=st.integers(1, 2),
       padding=st.integers(0, 2), seed=st.integers(0, 2 ** 16))
def test_conv_oracle_property(n, c, o, h, w, k, stride, padding, seed):
    if h + 2 * padding < k or w + 2 * padding < k:
        return
    rng = np.random.default_rng(seed)
    x, wt, b = rng.standard_normal((n, c, h, w)), rng.standard_normal((o, c, k, k)), rng.standard_normal(o)
    with T.default_dtype(np.float64):
        out = T.conv2d(Tensor(x), Tensor(wt), Tensor(b), stride, padding)
    np.testing.assert_allclose(out.data, naive_conv2d(x, wt, b, stride, padding), atol=1e-6)


def test_conv_output_extent_formula():
    x = Tensor(np.zeros((1, 2, 13, 10)))
    out = T.conv2d(x, Tensor(np.zeros((3, 2, 3, 3))), stride=2, padding=1)
    assert out.shape == (1, 3, (13 + 2 - 3) // 2 + 1, (10 + 2 - 3) // 2 + 1)


def test_conv_shape_errors_name_both_shapes():
    with pytest.raises(ShapeError, match=r"\(1, 2, 4, 4\).*\(3, 5, 3, 3\)"):
        T.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((3, 5, 3, 3))))
    with pytest.raises(ShapeError):
        T.conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))))


@pytest.mark.parametrize("stride,padding,k", [(1, 0, 3), (1, 1, 3), (2, 1, 3), (2, 0, 1), (1, 2, 5)])
def test_conv_grad_check(f64, stride, padding, k):
    rng = np.random.default_rng(1)
    x, w, b = rand(rng, 2, 3, 6, 6), rand(rng, 2, 3, k, k), rand(rng, 2)
    err = T.grad_check(lambda: T.sum(T.square(T.conv2d(x, w, b, stride, padding))), [x, w, b])
    assert err < 1e-6


# ---------------------------------------------------------------- upsample / subsample / add


def test_upsample_constant():
    out = T.nearest_upsample2x(Tensor(np.full((1, 1, 1, 1), 5.0)))
    np.testing.assert_array_equal(out.data, np.full((1, 1, 2, 2), 5.0))


def test_upsample_definition():
    out = T.nearest_upsample2x(Tensor([[[[1, 2], [3, 4]]]]))
    np.testing.assert_array_equal(out.data[0, 0], [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]])


def test_upsample_gradient_of_sum_is_four(f64):
    x = rand(np.random.default_rng(2), 1, 2, 3, 3)
    T.sum(T.nearest_upsample2x(x)).backward()
    np.testing.assert_array_equal(x.grad, np.full(x.shape, 4.0))
    assert T.grad_check(lambda: T.sum(T.nearest_upsample2x(x)), x) < 1e-6


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 2), st.integers(1, 3), st.integers(1, 5), st.integers(1, 5)),
              elements=st.floats(-1e3, 1e3)))
def test_upsample_then_subsample_is_identity(x):
    out = T.max_subsample2x(T.nearest_upsample2x(Tensor(x, dtype=np.float64)))
    np.testing.assert_array_equal(out.data, x)


def test_max_subsample_ties_go_to_first_index(f64):
    x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
    T.sum(T.max_subsample2x(x)).backward()
    np.testing.assert_array_equal(x.grad[0, 0], [[1, 0], [0, 0]])


def test_max_subsample_odd_extent_floors():
    assert T.max_subsample2x(Tensor(np.zeros((1, 1, 5, 3)))).shape == (1, 1, 2, 1)


def test_max_subsample_grad_check(f64):
    x = rand(np.random.default_rng(3), 2, 2, 6, 5)
    assert T.grad_check(lambda: T.sum(T.square(T.max_subsample2x(x))), x) < 1e-6


def test_add_identity_and_values():
    a = Tensor(np.arange(6.0).reshape(1, 6))
    np.testing.assert_array_equal(T.add(a, Tensor(np.zeros((1, 6)))).data, a.data)
    np.testing.assert_array_equal(T.add(Tensor([[1, 2]]), Tensor([[3, 4]])).data, [[4, 6]])


def test_add_rejects_broadcasting():
    with pytest.raises(ShapeError):
        T.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((1, 3))))


def test_add_grad_check(f64):
    rng = np.random.default_rng(4)
    a, b = rand(rng, 2, 4, 4, 4), rand(rng, 2, 4, 4, 4)
    assert T.grad_check(lambda: T.sum(T.square(T.add(a, b))), [a, b]) < 1e-6


# ---------------------------------------------------------------- pointwise, fc, losses


def test_relu_values():
    np.testing.assert_array_equal(T.relu(Tensor([-1.0, 2.0])).data, [0.0, 2.0])


def test_relu_sigmoid_grad_check(f64):
    rng = np.random.default_rng(5)
    x = Tensor(rng.uniform(0.1, 2, (3, 4)) * rng.choice([-1, 1], (3, 4)), requires_grad=True)
    assert T.grad_check(lambda: T.sum(T.square(T.relu(x))), x) < 1e-6
    assert T.grad_check(lambda: T.sum(T.square(T.sigmoid(x))), x) < 1e-6


@settings(max_examples=20, deadline=None)
@given(arrays(np.float32, (3, 5), elements=st.floats(-50, 50, width=32)))
def test_pointwise_ops_are_pure(x):
    for op in (T.relu, T.sigmoid):
        a, b = op(Tensor(x)), op(Tensor(x.copy()))
        assert a.data.tobytes() == b.data.tobytes()
    t = Tensor(x)
    assert T.add(t, t).data.tobytes() == T.add(Tensor(x.copy()), Tensor(x.copy())).data.tobytes()


def test_sigmoid_extremes_are_finite():
    out = T.sigmoid(Tensor([-1000.0, 0.0, 1000.0]))
    np.testing.assert_allclose(out.data, [0.0, 0.5, 1.0])


def test_fully_connected_grad_check(f64):
    rng = np.random.default_rng(6)
    x, w, b = rand(rng, 4, 5), rand(rng, 3, 5), rand(rng, 3)
    np.testing.assert_allclose(T.fully_connected(x, w, b).data, x.data @ w.data.T + b.data)
    assert T.grad_check(lambda: T.sum(T.square(T.fully_connected(x, w, b))), [x, w, b]) < 1e-6


def test_smooth_l1_values():
    # 0.5 * 0.5^2 and 2 - 0.5
    assert T.smooth_l1(Tensor([0.5]), [0.0]).item() == pytest.approx(0.125)
    assert T.smooth_l1(Tensor([2.0]), [0.0]).item() == pytest.approx(1.5)


@pytest.mark.parametrize("k", [2, 3, 7, 81])
def test_softmax_ce_uniform_is_log_k(k):
    loss = T.softmax_cross_entropy(Tensor(np.zeros((4, k))), [0, 1, 1, 0])
    assert loss.item() == pytest.approx(math.log(k), rel=1e-6)


def test_softmax_ce_label_range():
    with pytest.raises(ValueError):
        T.softmax_cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])


def test_loss_grad_checks(f64):
    rng = np.random.default_rng(7)
    z = rand(rng, 6, 4)
    labels = rng.integers(0, 4, 6)
    assert T.grad_check(lambda: T.softmax_cross_entropy(z, labels), z) < 1e-6
    y = rng.integers(0, 2, (6, 4)).astype(float)
    assert T.grad_check(lambda: T.sigmoid_binary_cross_entropy(z, y), z) < 1e-6
    p = Tensor(rng.uniform(0.05, 0.95, (6, 4)), requires_grad=True)
    assert T.grad_check(lambda: T.binary_cross_entropy(p, y), p) < 1e-6
    t = rng.standard_normal((6, 4)) * 3
    d = Tensor(t + rng.uniform(0.1, 3, (6, 4)) * rng.choice([-1, 1], (6, 4)), requires_grad=True)
    assert T.grad_check(lambda: T.smooth_l1(d, t), d) < 1e-6


def test_fused_bce_matches_composed():
    rng = np.random.default_rng(8)
    z = rng.standard_normal((5, 3))
    y = rng.integers(0, 2, (5, 3))
    a = T.sigmoid_binary_cross_entropy(Tensor(z, dtype=np.float64), y).item()
    b = T.binary_cross_entropy(T.sigmoid(Tensor(z, dtype=np.float64)), y).item()
    assert a == pytest.approx(b, rel=1e-10)


def test_shape_ops_grad_check(f64):
    rng = np.random.default_rng(9)
    x, y = rand(rng, 2, 3, 4), rand(rng, 2, 2, 4)
    idx = np.array([0, 3, 3, 1])

    def f():
        z = T.concat([x, y], axis=1)
        z = T.reshape(T.transpose(z, (0, 2, 1)), (8, 5))
        return T.sum(T.square(T.take(z, idx)))

    assert T.grad_check(f, [x, y]) < 1e-6


# ---------------------------------------------------------------- grad_check itself


def test_grad_check_of_sum_is_exact(f64):
    x = rand(np.random.default_rng(10), 3, 3)
    assert T.grad_check(lambda: T.sum(x), x) < 1e-9


def test_grad_check_rejects_non_scalar(f64):
    x = rand(np.random.default_rng(11), 3)
    with pytest.raises(ShapeError):
        T.grad_check(lambda: T.relu(x), x)
    with pytest.raises(ValueError):
        T.grad_check(lambda: T.sum(x), x, eps=0.1)


def test_conv_squared_grad_check_64bit(f64):
    rng = np.random.default_rng(12)
    x, w = rand(rng, 1, 2, 5, 5), rand(rng, 3, 2, 3, 3)
    assert T.grad_check(lambda: T.sum(T.square(T.conv2d(x, w))), [x, w], eps=1e-5) < 1e-6


# ---------------------------------------------------------------- SGD


def _param(value):
    p = Parameter(np.array([value], dtype=np.float64))
    p.data = p.data.astype(np.float64)
    return p


def test_sgd_plain_step():
    p = _param(1.0)
    p.grad = np.array([0.5])
    sgd_step({"p": p}, {"p": np.zeros(1)}, lr=0.1, momentum=0.0, weight_decay=0.0)
    assert p.data[0] == pytest.approx(1.0 - 0.1 * 0.5)
    assert p.grad[0] == 0.0


def test_sgd_momentum_recurrence():
    # v1 = 1 -> p = -1; v2 = 0.9 + 1 = 1.9 -> p = -2.9
    p = _param(0.0)
    opt = SGD({"p": p}, lr=1.0, momentum=0.9, weight_decay=0.0)
    seen = []
    for _ in range(2):
        p.grad = np.array([1.0])
        opt.step()
        seen.append(p.data[0])
    assert seen == pytest.approx([-1.0, -2.9])


def test_sgd_weight_decay_only():
    p = _param(2.0)
    opt = SGD({"p": p}, lr=0.1, momentum=0.0, weight_decay=0.5)
    for i in range(1, 4):
        p.grad = np.array([0.0])
        opt.step()
        assert p.data[0] == pytest.approx(2.0 * (1 - 0.1 * 0.5) ** i)


def test_sgd_missing_gradient():
    p = _param(1.0)
    p.grad = None
    with pytest.raises(ValueError):
        sgd_step({"p": p}, {"p": np.zeros(1)}, 0.1, 0.0, 0.0)


# ---------------------------------------------------------------- serialization


def test_weight_file_round_trip(tmp_path):
    rng = np.random.default_rng(13)
    arrays = {"fpn.lateral.3.weight": rng.standard_normal((4, 2, 1, 1)).astype(np.float32),
              "b": np.arange(3, dtype=np.float32), "scalar": np.array([1.5], dtype=np.float32)}
    path = tmp_path / "w.bin"
    save_weights(path, arrays)
    back = load_weights(path)
    assert set(back) == set(arrays)
    for k in arrays:
        np.testing.assert_array_equal(back[k], arrays[k])


def test_weight_file_layout(tmp_path):
    path = tmp_path / "w.bin"
    save_weights(path, {"ab": np.array([[1.0, 2.0]], dtype=np.float32)})
    raw = path.read_bytes()
    expected = (b"DFPN" + (1).to_bytes(4, "little") + (1).to_bytes(4, "little")
                + (2).to_bytes(4, "little") + b"ab" + (2).to_bytes(4, "little")
                + (1).to_bytes(4, "little") + (2).to_bytes(4, "little")
                + np.array([1.0, 2.0], dtype="<f4").tobytes())
    assert raw == expected


def test_weight_file_rejects_garbage(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(b"nope")
    with pytest.raises(ValueError):
        load_weights(path)
