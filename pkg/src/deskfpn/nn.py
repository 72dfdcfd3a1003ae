"""Parameter containers, layers, SGD, and the weight file format."""
from __future__ import annotations

import struct
from pathlib import Path
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Parameter, Tensor


class Module:
    """Attribute-walking parameter container.

    Parameter names are dotted attribute paths from the root module, with
    list/dict children contributing their index or key, e.g.
    ``fpn.lateral.3.weight``.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, value in vars(self).items():
            yield from _walk(value, f"{prefix}{key}")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, Parameter]:
        out: dict[str, Parameter] = {}
        for name, p in self.named_parameters():
            if name in out:
                raise ValueError(f"duplicate parameter name {name}")
            p.name = name
            out[name] = p
        return out

    def load_state_dict(self, arrays: dict[str, np.ndarray], strict: bool = True) -> None:
        own = self.state_dict()
        if strict:
            missing = sorted(set(own) - set(arrays))
            if missing:
                raise KeyError(f"missing parameters: {missing[:5]}")
        for name, p in own.items():
            if name in arrays:
                arr = np.asarray(arrays[name])
                if arr.shape != p.shape:
                    raise ValueError(f"{name}: stored shape {arr.shape} != model shape {p.shape}")
                p.data = arr.astype(p.data.dtype)
                p.grad = np.zeros_like(p.data)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def num_parameters(self) -> int:
        return int(np.sum([p.data.size for p in self.parameters()], dtype=np.int64))


def _walk(value, path: str):
    if isinstance(value, Parameter):
        yield path, value
    elif isinstance(value, Module):
        yield from value.named_parameters(path + ".")
    elif isinstance(value, (list, tuple)):
        for i, v in enumerate(value):
            yield from _walk(v, f"{path}.{i}")
    elif isinstance(value, dict):
        for k, v in value.items():
            yield from _walk(v, f"{path}.{k}")


def gaussian_init(rng: np.random.Generator, shape, fan_in: int, gain: float = 2.0) -> np.ndarray:
    """Zero-mean Gaussian with variance gain / fan_in."""
    return rng.standard_normal(shape) * np.sqrt(gain / fan_in)


class Conv2d(Module):
    def __init__(self, rng: np.random.Generator, in_ch: int, out_ch: int, kernel: int,
                 stride: int = 1, padding: int | None = None, std: float | None = None):
        fan_in = in_ch * kernel * kernel
        shape = (out_ch, in_ch, kernel, kernel)
        w = rng.standard_normal(shape) * std if std is not None else gaussian_init(rng, shape, fan_in)
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(out_ch))
        self.stride = stride
        self.padding = kernel // 2 if padding is None else padding

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class Linear(Module):
    def __init__(self, rng: np.random.Generator, in_features: int, out_features: int,
                 std: float | None = None):
        shape = (out_features, in_features)
        w = rng.standard_normal(shape) * std if std is not None else gaussian_init(rng, shape, in_features)
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(out_features))

    def __call__(self, x: Tensor) -> Tensor:
        return T.fully_connected(x, self.weight, self.bias)


class SGD:
    """Momentum SGD with L2 weight decay folded into the velocity.

    v <- momentum * v + grad + weight_decay * param;  param <- param - lr * v
    """

    def __init__(self, params: dict[str, Parameter], lr: float, momentum: float = 0.9,
                 weight_decay: float = 1e-4):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {name: np.zeros_like(p.data) for name, p in params.items()}

    def step(self, lr: float | None = None) -> None:
        sgd_step(self.params, self.velocity, self.lr if lr is None else lr, self.momentum,
                 self.weight_decay)


def sgd_step(params: dict[str, Parameter], velocity: dict[str, np.ndarray], lr: float,
             momentum: float, weight_decay: float) -> None:
    for name, p in params.items():
        if p.grad is None:
            raise ValueError(f"parameter {name} has no gradient")
        v = velocity[name]
        v *= momentum
        v += p.grad
        if weight_decay:
            v += weight_decay * p.data
        p.data -= p.data.dtype.type(lr) * v.astype(p.data.dtype, copy=False)
        p.grad = np.zeros_like(p.data)


# Weight container layout (all integers little-endian):
#   magic   4 bytes  b"DFPN"
#   version u32      1
#   count   u32      number of records
#   record  name_len u32, name utf-8 bytes, rank u32, rank * u32 extents,
#           prod(extents) float32 values in row-major order
MAGIC = b"DFPN"
VERSION = 1


def save_weights(path: str | Path, arrays: dict[str, np.ndarray]) -> None:
    chunks = [MAGIC, struct.pack("<II", VERSION, len(arrays))]
    for name in sorted(arrays):
        arr = np.ascontiguousarray(np.asarray(arrays[name], dtype="<f4"))
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_weights(path: str | Path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise ValueError(f"{path}: not a weight file")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    off = 12
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", buf, off)
        off += 4
        name = buf[off : off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<I", buf, off)
        off += 4
        shape = struct.unpack_from(f"<{rank}I", buf, off)
        off += 4 * rank
        size = int(np.prod(shape, dtype=np.int64))
        out[name] = np.frombuffer(buf, dtype="<f4", count=size, offset=off).reshape(shape).copy()
        off += 4 * size
    if off != len(buf):
        raise ValueError(f"{path}: trailing bytes")
    return out
