"""Adaptive channel compression: N thermal embeddings -> one 3-channel image.

A small CNN shared across embeddings scores each one; the pooled scores go
through an MLP whose 3N outputs are softmax-normalized over the N
embeddings for each output channel. The output is the per-channel convex
combination of the (unscaled) embeddings.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from . import diffmath as dm
from .diffmath import ConvLayer, DenseLayer, Param
from .embedding import PeriodSet

OUT_CHANNELS = 3


@dataclass
class CompressionNet:
    n_embeddings: int
    conv1: ConvLayer
    conv2: ConvLayer
    norm_gain: Param
    norm_bias: Param
    mlp1: DenseLayer
    mlp2: DenseLayer
    head: DenseLayer
    per_channel_norm: bool = False

    def __post_init__(self):
        if self.conv1.in_channels != 1:
            raise ValueError("conv1 must take single-channel embeddings")
        if self.conv2.out_channels != OUT_CHANNELS:
            raise ValueError("conv2 must produce 3 feature channels")
        if self.mlp1.in_dim != OUT_CHANNELS * self.n_embeddings:
            raise ValueError("mlp1 input must be 3N")
        if self.head.out_dim != OUT_CHANNELS * self.n_embeddings:
            raise ValueError(f"head output must be 3N = {OUT_CHANNELS * self.n_embeddings}")

    @classmethod
    def init(cls, n_embeddings: int, seed: int = 0, width: int = 16, hidden: int = 64,
             kernel: int = 3, strides=(2, 2), dtype=np.float32) -> "CompressionNet":
        rng = np.random.default_rng(seed)
        feat = OUT_CHANNELS * n_embeddings
        head = DenseLayer.init(rng, hidden, feat, dtype)
        head.weight.value *= 0.1
        return cls(
            n_embeddings=n_embeddings,
            conv1=ConvLayer.init(rng, 1, width, kernel, strides[0], dtype),
            conv2=ConvLayer.init(rng, width, OUT_CHANNELS, kernel, strides[1], dtype),
            norm_gain=Param(np.ones(OUT_CHANNELS, dtype=dtype)),
            norm_bias=Param(np.zeros(OUT_CHANNELS, dtype=dtype)),
            mlp1=DenseLayer.init(rng, feat, hidden, dtype),
            mlp2=DenseLayer.init(rng, hidden, hidden, dtype),
            head=head,
        )

    def named_params(self) -> dict[str, Param]:
        return {
            "conv1.weight": self.conv1.weight, "conv1.bias": self.conv1.bias,
            "conv2.weight": self.conv2.weight, "conv2.bias": self.conv2.bias,
            "norm.gain": self.norm_gain, "norm.bias": self.norm_bias,
            "mlp1.weight": self.mlp1.weight, "mlp1.bias": self.mlp1.bias,
            "mlp2.weight": self.mlp2.weight, "mlp2.bias": self.mlp2.bias,
            "head.weight": self.head.weight, "head.bias": self.head.bias,
        }

    def params(self) -> list[Param]:
        return list(self.named_params().values())

    def zero_grad(self) -> None:
        for p in self.params():
            p.zero_grad()

    def astype(self, dtype) -> "CompressionNet":
        """Deep copy with every parameter cast to ``dtype``."""
        net = CompressionNet.from_tensors(
            {k: p.value for k, p in self.named_params().items()},
            strides=(self.conv1.stride, self.conv2.stride), dtype=dtype,
        )
        net.per_channel_norm = self.per_channel_norm
        return net

    def copy(self) -> "CompressionNet":
        return self.astype(self.conv1.weight.value.dtype)

    @classmethod
    def from_tensors(cls, tensors: dict[str, np.ndarray], strides=(2, 2), dtype=np.float32):
        def p(name):
            return Param(np.array(tensors[name], dtype=dtype))

        n = tensors["head.bias"].shape[0] // OUT_CHANNELS
        return cls(
            n_embeddings=n,
            conv1=ConvLayer(p("conv1.weight"), p("conv1.bias"), strides[0]),
            conv2=ConvLayer(p("conv2.weight"), p("conv2.bias"), strides[1]),
            norm_gain=p("norm.gain"),
            norm_bias=p("norm.bias"),
            mlp1=DenseLayer(p("mlp1.weight"), p("mlp1.bias")),
            mlp2=DenseLayer(p("mlp2.weight"), p("mlp2.bias")),
            head=DenseLayer(p("head.weight"), p("head.bias")),
        )

    def min_size(self) -> int:
        """Smallest spatial side the conv stack accepts."""
        k2 = self.conv2.kernel
        # conv2 input side is ceil(n / stride1); it must reach the kernel size
        return max(self.conv1.kernel, (k2 - 1) * self.conv1.stride + 1)


@dataclass
class ForwardCache:
    emb: np.ndarray
    shape: tuple
    conv1: tuple
    relu1: np.ndarray
    conv2: tuple
    relu2: np.ndarray
    norm: tuple
    gap: tuple
    mlp1: tuple
    relu3: np.ndarray
    mlp2: tuple
    relu4: np.ndarray
    head: tuple
    softmax: tuple
    omega: np.ndarray
    consumed: bool = False

    def activation_pattern(self) -> bytes:
        """Packed ReLU on/off masks; equal patterns mean the same linear piece."""
        masks = (self.relu1, self.relu2, self.relu3, self.relu4)
        return b"".join(np.packbits(m.ravel()).tobytes() for m in masks)


def compress_forward(emb: np.ndarray, net: CompressionNet):
    """Run the network on a (B, N, H, W) batch of embeddings in [0, 255].

    Returns ``(images, omega, cache)`` with images (B, 3, H, W) and omega
    (B, 3, N), rows summing to 1.
    """
    emb = np.asarray(emb)
    if emb.ndim == 3:
        emb = emb[None]
    b, n, h, w = emb.shape
    if n != net.n_embeddings:
        raise ValueError(f"net expects N={net.n_embeddings} embeddings, got {n}")
    if min(h, w) < net.min_size():
        raise ValueError(f"embedding {h}x{w} smaller than the conv stack minimum {net.min_size()}")
    dtype = net.conv1.weight.value.dtype
    emb = emb.astype(dtype, copy=False)

    x = (emb / dtype.type(255.0)).reshape(b * n, 1, h, w)
    z1, c1 = dm.conv2d_forward(x, net.conv1)
    a1, r1 = dm.relu(z1)
    z2, c2 = dm.conv2d_forward(a1, net.conv2)
    a2, r2 = dm.relu(z2)
    y, cn = dm.layer_norm(a2, net.norm_gain.value, net.norm_bias.value, per_channel=net.per_channel_norm)
    pooled, cg = dm.global_avg_pool(y)
    feats = pooled.reshape(b, n * OUT_CHANNELS)
    h1, cm1 = dm.dense_forward(feats, net.mlp1)
    h1a, r3 = dm.relu(h1)
    h2, cm2 = dm.dense_forward(h1a, net.mlp2)
    h2a, r4 = dm.relu(h2)
    logits, ch = dm.dense_forward(h2a, net.head)
    omega, cs = dm.softmax(logits.reshape(b, OUT_CHANNELS, n), axis=2)
    out = np.einsum("bin,bnhw->bihw", omega, emb)
    cache = ForwardCache(emb, (b, n, h, w), c1, r1, c2, r2, cn, cg, cm1, r3, cm2, r4, ch, cs, omega)
    return out, omega, cache


def compress_backward(cache: ForwardCache, grad_out: np.ndarray):
    """Backpropagate d(loss)/d(images) through the network.

    Returns ``(param_grads, grad_emb)`` where ``param_grads`` maps parameter
    names to arrays and ``grad_emb`` is d(loss)/d(embeddings) in [0, 255] units.
    A cache can be consumed once.
    """
    if cache is None or cache.consumed:
        raise dm.CacheError("compress_backward needs a fresh forward cache")
    cache.consumed = True
    b, n, h, w = cache.shape
    emb, omega = cache.emb, cache.omega
    grad_out = np.asarray(grad_out, dtype=emb.dtype)

    d_omega = np.einsum("bihw,bnhw->bin", grad_out, emb)
    d_emb = np.einsum("bihw,bin->bnhw", grad_out, omega)

    d_logits = dm.softmax_backward(d_omega, cache.softmax).reshape(b, OUT_CHANNELS * n)
    d_h2a, dhw, dhb = dm.dense_backward(d_logits, cache.head)
    d_h2 = dm.relu_backward(d_h2a, cache.relu4)
    d_h1a, dm2w, dm2b = dm.dense_backward(d_h2, cache.mlp2)
    d_h1 = dm.relu_backward(d_h1a, cache.relu3)
    d_feats, dm1w, dm1b = dm.dense_backward(d_h1, cache.mlp1)
    d_pooled = d_feats.reshape(b * n, OUT_CHANNELS)
    d_y = dm.gap_backward(d_pooled, cache.gap)
    d_a2, dgain, dnbias = dm.layer_norm_backward(d_y, cache.norm)
    d_z2 = dm.relu_backward(d_a2, cache.relu2)
    d_a1, dc2w, dc2b = dm.conv2d_backward(d_z2, cache.conv2)
    d_z1 = dm.relu_backward(d_a1, cache.relu1)
    d_x, dc1w, dc1b = dm.conv2d_backward(d_z1, cache.conv1)
    d_emb = d_emb + d_x.reshape(b, n, h, w) / emb.dtype.type(255.0)

    grads = {
        "conv1.weight": dc1w, "conv1.bias": dc1b,
        "conv2.weight": dc2w, "conv2.bias": dc2b,
        "norm.gain": dgain, "norm.bias": dnbias,
        "mlp1.weight": dm1w, "mlp1.bias": dm1b,
        "mlp2.weight": dm2w, "mlp2.bias": dm2b,
        "head.weight": dhw, "head.bias": dhb,
    }
    return grads, d_emb


def accumulate_grads(net: CompressionNet, grads: dict[str, np.ndarray]) -> None:
    for name, p in net.named_params().items():
        g = grads[name].astype(p.value.dtype, copy=False)
        p.grad = g.copy() if p.grad is None else p.grad + g


@dataclass
class WeightReport:
    periods: tuple[float, ...]  # ordered by D
    omega: np.ndarray  # (3, N), columns ordered by D
    average: np.ndarray  # (N,) mean weight per embedding over output channels

    def rows(self):
        for i in range(self.omega.shape[0]):
            for n, d in enumerate(self.periods):
                yield i, d, float(self.omega[i, n])

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["channel", "D", "omega"])
        for i, d, wgt in self.rows():
            writer.writerow(["RGB"[i] if self.omega.shape[0] == 3 else i, repr(d), f"{wgt:.9f}"])
        for d, avg in zip(self.periods, self.average):
            writer.writerow(["average", repr(d), f"{avg:.9f}"])
        return buf.getvalue()

    def argmin_period(self) -> float:
        return self.periods[int(np.argmin(self.average))]


def inspect_weights(weights, periods) -> WeightReport:
    """Pair each period with its weights and average over output channels.

    ``weights`` is a (3, N) matrix, or a (B, 3, N) batch that is averaged first.
    """
    omega = np.asarray(weights, dtype=np.float64)
    if omega.ndim == 3:
        omega = omega.mean(axis=0)
    ds = periods.periods if isinstance(periods, PeriodSet) else tuple(float(d) for d in periods)
    if omega.shape[1] != len(ds):
        raise ValueError(f"weights have {omega.shape[1]} columns but {len(ds)} periods given")
    order = sorted(range(len(ds)), key=lambda k: ds[k])
    omega = omega[:, order]
    return WeightReport(tuple(ds[k] for k in order), omega, omega.mean(axis=0))


def save_net(path, net: CompressionNet, periods: PeriodSet | None = None, meta: dict | None = None) -> None:
    dm.save_checkpoint(path, *_net_payload(net, periods, meta))


def net_checkpoint_bytes(net: CompressionNet, periods: PeriodSet | None = None, meta: dict | None = None) -> bytes:
    return dm.checkpoint_bytes(*_net_payload(net, periods, meta))


def _net_payload(net, periods, meta):
    info = dict(meta or {})
    info["strides"] = [net.conv1.stride, net.conv2.stride]
    info["per_channel_norm"] = net.per_channel_norm
    info["periods"] = list(periods.periods) if periods is not None else None
    return {k: p.value for k, p in net.named_params().items()}, info


def load_net(path) -> tuple[CompressionNet, PeriodSet | None, dict]:
    """Inverse of ``save_net``: the float32 net, its evaluation periods and the metadata."""
    tensors, meta = dm.load_checkpoint(path)
    missing = set(CompressionNet.init(1).named_params()) - set(tensors)
    if missing:
        raise ValueError(f"{path}: checkpoint lacks {sorted(missing)}")
    net = CompressionNet.from_tensors(tensors, strides=tuple(meta.get("strides", (2, 2))))
    net.per_channel_norm = bool(meta.get("per_channel_norm", False))
    periods = meta.get("periods")
    if periods is not None:
        periods = PeriodSet(tuple(periods))
        if len(periods.periods) != net.n_embeddings:
            raise ValueError(f"{path}: {len(periods.periods)} periods for a net with N={net.n_embeddings}")
    return net, periods, meta
