"""Dense NCHW tensors with reverse-mode automatic differentiation.

Every primitive the detector needs lives here: convolution, nearest
upsampling, stride-2 max subsampling, fully connected layers, the loss
functions, and a handful of shape operations. Broadcasting is deliberately
not supported; binary ops require identical shapes.

Determinism: every op is a fixed sequence of numpy calls, so results are
bitwise reproducible for a fixed BLAS thread count.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True


class ShapeError(ValueError):
    pass


def get_default_dtype():
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily switch the precision used for new tensors (e.g. float64 for grad checks)."""
    old = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    old = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = old


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)
        if arr.ndim > 5:
            raise ShapeError(f"tensors have at most 5 axes, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def backward(self) -> None:
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar, got shape {self.shape}")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                # leaf
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg


class Parameter(Tensor):
    """A trainable leaf tensor. The owning module assigns ``name``."""

    __slots__ = ("name",)

    def __init__(self, data, name: str = ""):
        super().__init__(data, requires_grad=True)
        self.name = name


def _result(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    out._parents = tuple(parents) if needs else ()
    out._backward = backward if needs else None
    return out


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return _result(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)
    return _result(a.data * c, (a,), lambda g: (g * c,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0).astype(x.data.dtype, copy=False), (x,),
                   lambda g: (g * mask,))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return _result(s, (x,), lambda g: (g * s * (1 - s),))


def square(x: Tensor) -> Tensor:
    xd = x.data
    return _result(xd * xd, (x,), lambda g: (2 * g * xd,))


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape, dtype = x.shape, x.data.dtype
    return _result(np.asarray(x.data.sum(), dtype=dtype), (x,),
                   lambda g: (np.full(shape, g, dtype=dtype),))


def mean(x: Tensor) -> Tensor:
    return scale(sum(x), 1.0 / x.data.size)


# ---------------------------------------------------------------- shape ops


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    inv = np.argsort(axes)
    return _result(np.ascontiguousarray(x.data.transpose(axes)), (x,),
                   lambda g: (g.transpose(inv),))


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    if len(xs) == 1:
        return xs[0]
    sizes = [t.shape[axis] for t in xs]
    splits = np.cumsum(sizes)[:-1]
    return _result(np.concatenate([t.data for t in xs], axis=axis), tuple(xs),
                   lambda g: tuple(np.split(g, splits, axis=axis)))


def take(x: Tensor, index: np.ndarray, axis: int = 0) -> Tensor:
    """Gather slices along ``axis``; gradients scatter-add back (repeats allowed)."""
    index = np.asarray(index, dtype=np.int64)
    shape = x.shape

    def backward(g):
        gx = np.zeros(shape, dtype=g.dtype)
        np.add.at(gx, (slice(None),) * axis + (index,), g)
        return (gx,)

    return _result(np.take(x.data, index, axis=axis), (x,), backward)


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.shape[0], -1))


# ---------------------------------------------------------------- convolution


def _conv_out(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0) -> Tensor:
    """2-D cross-correlation via im2col + one matmul."""
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError(f"conv2d expects NCHW input and OIKhKw weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    o, i, kh, kw = weight.shape
    if c != i:
        raise ShapeError(f"conv2d: input {x.shape} has {c} channels but weight {weight.shape} expects {i}")
    if bias is not None and bias.shape != (o,):
        raise ShapeError(f"conv2d: bias {bias.shape} does not match weight {weight.shape}")
    if stride < 1 or padding < 0:
        raise ValueError("stride must be positive and padding non-negative")
    ho, wo = _conv_out(h, kh, stride, padding), _conv_out(w, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {weight.shape} does not fit padded input {x.shape}")

    xd = x.data
    if kh == 1 and kw == 1 and padding == 0:
        xs = xd[:, :, ::stride, ::stride] if stride > 1 else xd
        cols = xs.transpose(0, 2, 3, 1).reshape(n * ho * wo, c)
    else:
        xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
        win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
        win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    wmat = weight.data.reshape(o, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2))

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gw = (g2.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        gb = g2.sum(axis=0) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = g2 @ wmat
            if kh == 1 and kw == 1 and padding == 0:
                d = dcols.reshape(n, ho, wo, c).transpose(0, 3, 1, 2)
                if stride == 1:
                    gx = np.ascontiguousarray(d)
                else:
                    gx = np.zeros(x.shape, dtype=g.dtype)
                    gx[:, :, ::stride, ::stride] = d
            else:
                dcols = dcols.reshape(n, ho, wo, c, kh, kw)
                gp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=g.dtype)
                for a in range(kh):
                    for b in range(kw):
                        gp[:, :, a : a + stride * ho : stride, b : b + stride * wo : stride] += \
                            dcols[:, :, :, :, a, b].transpose(0, 3, 1, 2)
                gx = gp[:, :, padding : padding + h, padding : padding + w] if padding else gp
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    if bias is None:
        return _result(out, parents, lambda g: backward(g)[:2])
    return _result(out, parents, backward)


def nearest_upsample2x(x: Tensor) -> Tensor:
    if x.data.ndim != 4:
        raise ShapeError(f"nearest_upsample2x expects NCHW, got {x.shape}")
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)
    n, c, h, w = x.shape
    return _result(out, (x,), lambda g: (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),))


def max_subsample2x(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; odd trailing rows/columns are dropped.

    The gradient goes to the first maximum of each window in row-major order.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"max_subsample2x expects NCHW, got {x.shape}")
    n, c, h, w = x.shape
    ho, wo = h // 2, w // 2
    if ho < 1 or wo < 1:
        raise ShapeError(f"max_subsample2x: input {x.shape} too small")
    blocks = x.data[:, :, : 2 * ho, : 2 * wo].reshape(n, c, ho, 2, wo, 2).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(n, c, ho, wo, 4)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gb = np.zeros((n, c, ho, wo, 4), dtype=g.dtype)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gb = gb.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * ho, 2 * wo)
        if (2 * ho, 2 * wo) == (h, w):
            return (gb,)
        gx = np.zeros(x.shape, dtype=g.dtype)
        gx[:, :, : 2 * ho, : 2 * wo] = gb
        return (gx,)

    return _result(np.ascontiguousarray(out), (x,), backward)


def fully_connected(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` for x of shape (N, F) and weight (O, F)."""
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"fully_connected: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"fully_connected: bias {bias.shape} does not match weight {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        out += bias.data

    def backward(g):
        gx = g @ wd if x.requires_grad else None
        gw = g.T @ xd if weight.requires_grad else None
        gb = g.sum(axis=0) if bias is not None else None
        return (gx, gw, gb) if bias is not None else (gx, gw)

    return _result(out, (x, weight) if bias is None else (x, weight, bias), backward)


# ---------------------------------------------------------------- losses


def _reduce(loss: np.ndarray, weight: np.ndarray | None, reduction: str):
    """Returns (value, d value / d elementwise loss)."""
    w = np.ones_like(loss) if weight is None else np.asarray(weight, dtype=loss.dtype)
    if w.shape != loss.shape:
        raise ShapeError(f"loss weight {w.shape} does not match {loss.shape}")
    if reduction == "sum":
        return (w * loss).sum(), w
    if reduction == "mean":
        return (w * loss).sum() / loss.size, w / loss.size
    raise ValueError(f"unknown reduction {reduction!r}")


def softmax_cross_entropy(logits: Tensor, labels, weight=None, reduction: str = "mean") -> Tensor:
    """Cross-entropy of integer ``labels`` (R,) against ``logits`` (R, K)."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"softmax_cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    k = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(labels.size)
    per = lse - z[rows, labels]
    value, dw = _reduce(per, weight, reduction)
    p = np.exp(z - lse[:, None])

    def backward(g):
        d = p.copy()
        d[rows, labels] -= 1
        return (d * (dw * g)[:, None],)

    return _result(np.asarray(value, dtype=logits.data.dtype), (logits,), backward)


def binary_cross_entropy(p: Tensor, y, weight=None, reduction: str = "mean", eps: float = 1e-12) -> Tensor:
    """BCE on probabilities; ``p`` is clipped to [eps, 1 - eps]."""
    y = np.asarray(y, dtype=p.data.dtype)
    if y.shape != p.shape:
        raise ShapeError(f"binary_cross_entropy: {p.shape} vs targets {y.shape}")
    pc = np.clip(p.data, eps, 1 - eps)
    per = -(y * np.log(pc) + (1 - y) * np.log(1 - pc))
    value, dw = _reduce(per, weight, reduction)
    inside = (p.data > eps) & (p.data < 1 - eps)
    return _result(np.asarray(value, dtype=p.data.dtype), (p,),
                   lambda g: (g * dw * inside * (pc - y) / (pc * (1 - pc)),))


def sigmoid_binary_cross_entropy(logits: Tensor, y, weight=None, reduction: str = "mean") -> Tensor:
    """Numerically stable BCE(sigmoid(logits), y), fused for training."""
    y = np.asarray(y, dtype=logits.data.dtype)
    if y.shape != logits.shape:
        raise ShapeError(f"sigmoid_binary_cross_entropy: {logits.shape} vs targets {y.shape}")
    z = logits.data
    per = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    value, dw = _reduce(per, weight, reduction)
    s = _sigmoid(z)
    return _result(np.asarray(value, dtype=z.dtype), (logits,), lambda g: (g * dw * (s - y),))


def smooth_l1(pred: Tensor, target, weight=None, reduction: str = "sum", beta: float = 1.0) -> Tensor:
    """Huber-style loss: 0.5 x^2 / beta for |x| < beta, |x| - 0.5 beta otherwise."""
    target = np.asarray(target, dtype=pred.data.dtype)
    if target.shape != pred.shape:
        raise ShapeError(f"smooth_l1: {pred.shape} vs target {target.shape}")
    d = pred.data - target
    ad = np.abs(d)
    quad = ad < beta
    per = np.where(quad, 0.5 * d * d / beta, ad - 0.5 * beta)
    value, dw = _reduce(per, weight, reduction)
    return _result(np.asarray(value, dtype=pred.data.dtype), (pred,),
                   lambda g: (g * dw * np.where(quad, d / beta, np.sign(d)),))


# ---------------------------------------------------------------- verification


def grad_check(f: Callable[[], Tensor], x: Tensor | Iterable[Tensor], eps: float = 1e-5,
               max_coords: int | None = None, seed: int = 0) -> float:
    """Max relative error between autodiff and central-difference gradients.

    For each tensor the error is ``max|a - n| / max(max|a|, max|n|)`` over the
    checked coordinates, so coordinates whose true gradient is near zero do
    not turn floating-point roundoff into a spurious failure. The worst tensor
    wins. ``f`` is re-evaluated with each coordinate of ``x`` perturbed in
    place; with ``max_coords`` only a seeded random subset per tensor is used.
    """
    if not 0 < eps <= 1e-2:
        raise ValueError("eps must lie in (0, 1e-2]")
    xs = [x] if isinstance(x, Tensor) else list(x)
    for t in xs:
        t.grad = np.zeros_like(t.data)
        t.requires_grad = True
    out = f()
    if out.data.size != 1:
        raise ShapeError(f"grad_check needs a scalar function, got shape {out.shape}")
    out.backward()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for t in xs:
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        analytic = t.grad.reshape(-1)[coords].astype(np.float64)
        numeric = np.empty(len(coords))
        with no_grad():
            for n, i in enumerate(coords):
                orig = flat[i]
                flat[i] = orig + eps
                fp = float(f().data)
                flat[i] = orig - eps
                fm = float(f().data)
                flat[i] = orig
                numeric[n] = (fp - fm) / (2 * eps)
        scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-12)
        worst = max(worst, float(np.abs(analytic - numeric).max(initial=0.0)) / scale)
    return worst
