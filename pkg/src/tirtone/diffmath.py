"""Hand-written forward/backward ops for the compression network.

Every forward returns ``(output, cache)``; the matching backward takes the
upstream gradient and that cache. Arrays keep the caller's dtype, so the
same code trains in float32 and is gradient-checked in float64.
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

CHECK_FINITE = os.environ.get("TIRTONE_CHECK_FINITE", "") not in ("", "0")

LN_EPS = 1e-5


class CacheError(RuntimeError):
    """Backward called without a usable forward cache."""


def _check(name: str, *arrays) -> None:
    if CHECK_FINITE:
        for a in arrays:
            if not np.all(np.isfinite(a)):
                raise FloatingPointError(f"{name}: non-finite values")


def _need(cache, name: str):
    if cache is None:
        raise CacheError(f"{name}: missing forward cache")
    return cache


@dataclass
class Param:
    value: np.ndarray
    grad: np.ndarray | None = None

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self):
        return self.value.shape


@dataclass
class ConvLayer:
    weight: Param  # (out, in, k, k)
    bias: Param  # (out,)
    stride: int = 1

    def __post_init__(self):
        o, i, kh, kw = self.weight.shape
        if kh != kw:
            raise ValueError("only square kernels are supported")
        if self.bias.shape != (o,):
            raise ValueError(f"bias shape {self.bias.shape} does not match {o} output channels")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")

    @classmethod
    def init(cls, rng, in_channels: int, out_channels: int, k: int = 3, stride: int = 1, dtype=np.float32):
        fan_in = in_channels * k * k
        w = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(out_channels, in_channels, k, k))
        return cls(Param(w.astype(dtype)), Param(np.zeros(out_channels, dtype=dtype)), stride)

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def kernel(self) -> int:
        return self.weight.shape[2]

    def params(self) -> list[Param]:
        return [self.weight, self.bias]


@dataclass
class DenseLayer:
    weight: Param  # (out, in)
    bias: Param  # (out,)

    def __post_init__(self):
        if self.bias.shape != (self.weight.shape[0],):
            raise ValueError("dense bias/weight shape mismatch")

    @classmethod
    def init(cls, rng, in_dim: int, out_dim: int, dtype=np.float32):
        w = rng.normal(0.0, math.sqrt(2.0 / in_dim), size=(out_dim, in_dim))
        return cls(Param(w.astype(dtype)), Param(np.zeros(out_dim, dtype=dtype)))

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    def params(self) -> list[Param]:
        return [self.weight, self.bias]


def same_padding(n: int, k: int, stride: int) -> tuple[int, int, int]:
    """Output size ceil(n/stride) and the (before, after) zero padding that yields it."""
    out = -(-n // stride)
    total = max((out - 1) * stride + k - n, 0)
    return out, total // 2, total - total // 2


def conv2d_forward(x: np.ndarray, layer: ConvLayer):
    b, c, h, w = x.shape
    k, s = layer.kernel, layer.stride
    if c != layer.in_channels:
        raise ValueError(f"conv expects {layer.in_channels} input channels, got {c}")
    if h < k or w < k:
        raise ValueError(f"input {h}x{w} smaller than kernel {k}")
    ho, pt, pb = same_padding(h, k, s)
    wo, pl, pr = same_padding(w, k, s)
    xp = np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    win = _windows(xp, k, s, ho, wo)
    out = np.tensordot(win, layer.weight.value, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    out = out + layer.bias.value[None, :, None, None]
    _check("conv2d_forward", out)
    return out, (xp, x.shape, (pt, pl), layer)


def _windows(xp: np.ndarray, k: int, s: int, ho: int, wo: int) -> np.ndarray:
    """Read-only (B, C, Ho, Wo, k, k) view of the strided receptive fields."""
    return sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, : s * (ho - 1) + 1 : s, : s * (wo - 1) + 1 : s]


def conv2d_backward(dout: np.ndarray, cache):
    """Returns (dx, dweight, dbias)."""
    xp, xshape, (pt, pl), layer = _need(cache, "conv2d_backward")
    k, s = layer.kernel, layer.stride
    _, _, ho, wo = dout.shape
    dw = np.tensordot(dout, _windows(xp, k, s, ho, wo), axes=([0, 2, 3], [0, 2, 3]))
    dcol = np.tensordot(dout, layer.weight.value, axes=([1], [0]))  # (B, Ho, Wo, C, k, k)
    dxp = np.zeros_like(xp)
    for di in range(k):
        for dj in range(k):
            rows = slice(di, di + s * (ho - 1) + 1, s)
            cols = slice(dj, dj + s * (wo - 1) + 1, s)
            dxp[:, :, rows, cols] += dcol[..., di, dj].transpose(0, 3, 1, 2)
    db = dout.sum(axis=(0, 2, 3))
    h, w = xshape[2], xshape[3]
    dx = dxp[:, :, pt:pt + h, pl:pl + w]
    return dx, dw, db


def relu(x: np.ndarray):
    return np.maximum(x, 0), x > 0


def relu_backward(dout: np.ndarray, cache) -> np.ndarray:
    # gradient at exactly 0 is taken as 0
    mask = _need(cache, "relu_backward")
    return dout * mask


def layer_norm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray, per_channel: bool = False, eps: float = LN_EPS):
    """Normalize a (B, C, H, W) map, then apply per-channel gain and bias.

    The default normalizes each sample jointly over (C, H, W). With
    ``per_channel=True`` each channel is normalized over its own H x W.
    """
    axes = (2, 3) if per_channel else (1, 2, 3)
    mu = x.mean(axis=axes, keepdims=True)
    var = x.var(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    y = xhat * gain[None, :, None, None] + bias[None, :, None, None]
    _check("layer_norm", y)
    return y, (xhat, inv, gain, axes)


def layer_norm_backward(dout: np.ndarray, cache):
    """Returns (dx, dgain, dbias)."""
    xhat, inv, gain, axes = _need(cache, "layer_norm_backward")
    dgain = (dout * xhat).sum(axis=(0, 2, 3))
    dbias = dout.sum(axis=(0, 2, 3))
    dxhat = dout * gain[None, :, None, None]
    dx = inv * (
        dxhat
        - dxhat.mean(axis=axes, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=axes, keepdims=True)
    )
    return dx, dgain, dbias


def global_avg_pool(x: np.ndarray):
    return x.mean(axis=(2, 3)), x.shape


def gap_backward(dout: np.ndarray, cache) -> np.ndarray:
    shape = _need(cache, "gap_backward")
    h, w = shape[2], shape[3]
    return np.broadcast_to(dout[:, :, None, None] / (h * w), shape).astype(dout.dtype)


def dense_forward(x: np.ndarray, layer: DenseLayer):
    if x.shape[-1] != layer.in_dim:
        raise ValueError(f"dense expects {layer.in_dim} inputs, got {x.shape[-1]}")
    y = x @ layer.weight.value.T + layer.bias.value
    _check("dense_forward", y)
    return y, (x, layer)


def dense_backward(dout: np.ndarray, cache):
    """Returns (dx, dweight, dbias)."""
    x, layer = _need(cache, "dense_backward")
    return dout @ layer.weight.value, dout.T @ x, dout.sum(axis=0)


def softmax(x: np.ndarray, axis: int = -1):
    if not -x.ndim <= axis < x.ndim:
        raise ValueError(f"axis {axis} out of range for {x.ndim}-d input")
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    return y, (y, axis)


def softmax_backward(dout: np.ndarray, cache) -> np.ndarray:
    y, axis = _need(cache, "softmax_backward")
    return y * (dout - (dout * y).sum(axis=axis, keepdims=True))


class Adam:
    """Adam with bias correction; moment buffers are keyed by parameter identity."""

    def __init__(self, params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]

    def step(self) -> None:
        for i, p in enumerate(self.params):
            if p.grad is None:
                raise ValueError(f"parameter {i} has no gradient")
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            mhat = m / c1
            vhat = v / c2
            p.value -= (self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.value.dtype)


def adam_step(optimizer: Adam) -> None:
    optimizer.step()


# --- checkpoint container -------------------------------------------------

TCNW_MAGIC = b"TCNW"
TCNW_VERSION = 1


def save_checkpoint(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write named tensors as little-endian f32 plus a JSON metadata block.

    Layout: magic, u32 version, u32 meta length, meta bytes, u32 count,
    per-tensor (u16 name length, name, u8 ndim, u32 dims...), then payloads
    in the same order.
    """
    Path(path).write_bytes(checkpoint_bytes(tensors, meta))


def checkpoint_bytes(tensors: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    meta_blob = json.dumps(meta or {}, sort_keys=True, separators=(",", ":")).encode()
    parts = [TCNW_MAGIC, struct.pack("<II", TCNW_VERSION, len(meta_blob)), meta_blob]
    parts.append(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        encoded = name.encode()
        parts.append(struct.pack("<H", len(encoded)) + encoded)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
    for arr in tensors.values():
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    blob = Path(path).read_bytes()
    if blob[:4] != TCNW_MAGIC:
        raise ValueError(f"{path}: not a TCNW checkpoint")
    version, meta_len = struct.unpack_from("<II", blob, 4)
    if version != TCNW_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    meta = json.loads(blob[pos:pos + meta_len].decode())
    pos += meta_len
    (count,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    headers = []
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        name = blob[pos:pos + nlen].decode()
        pos += nlen
        (ndim,) = struct.unpack_from("<B", blob, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", blob, pos)
        pos += 4 * ndim
        headers.append((name, shape))
    tensors = {}
    for name, shape in headers:
        size = 4 * int(np.prod(shape, dtype=np.int64))
        if pos + size > len(blob):
            raise ValueError(f"{path}: truncated payload for {name}")
        tensors[name] = np.frombuffer(blob, dtype="<f4", count=size // 4, offset=pos).reshape(shape).astype(np.float32)
        pos += size
    if pos != len(blob):
        raise ValueError(f"{path}: {len(blob) - pos} trailing bytes")
    return tensors, meta
