"""Image entropy, average histograms and histogram KL divergence."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .baselines import round_half_away

KL_SMOOTHING = 1e-9


@dataclass(frozen=True)
class Histogram256:
    bins: np.ndarray  # 256 counts
    total: int

    def normalized(self) -> np.ndarray:
        return self.bins / self.total


def to_gray8(img) -> np.ndarray:
    """8-bit view of an image. Float (3, H, W) outputs collapse to the per-pixel channel mean."""
    a = np.asarray(img)
    if a.dtype == np.uint8:
        return a if a.ndim == 2 else np.clip(round_half_away(a.astype(np.float64).mean(axis=0)), 0, 255).astype(np.uint8)
    if a.ndim == 3:
        a = a.astype(np.float64).mean(axis=0)
    return np.clip(round_half_away(a), 0, 255).astype(np.uint8)


def histogram256(img) -> Histogram256:
    g = to_gray8(img)
    if g.size == 0:
        raise ValueError("empty image")
    return Histogram256(np.bincount(g.ravel(), minlength=256), int(g.size))


def image_entropy(img) -> float:
    """Shannon entropy in bits of the 256-bin histogram (0 log 0 = 0)."""
    p = histogram256(img).normalized()
    p = p[p > 0]
    return float(-(p * np.log2(p)).sum()) + 0.0


def average_histogram(imgs) -> np.ndarray:
    imgs = list(imgs)
    if not imgs:
        raise ValueError("average_histogram needs at least one image")
    return np.mean([histogram256(im).normalized() for im in imgs], axis=0)


def histogram_kl(p, q, smoothing: float = KL_SMOOTHING) -> float:
    """KL(p || q) in nats after adding ``smoothing`` to every bin and renormalizing."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    for name, h in (("p", p), ("q", q)):
        if h.shape != (256,):
            raise ValueError(f"{name} must have 256 bins")
        if np.any(h < 0) or abs(h.sum() - 1.0) > 1e-6:
            raise ValueError(f"{name} is not a normalized histogram")
    ps = (p + smoothing) / (1.0 + 256 * smoothing)
    qs = (q + smoothing) / (1.0 + 256 * smoothing)
    return float(np.sum(ps * np.log(ps / qs)))


def histogram_csv(hists: dict[str, np.ndarray]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    names = list(hists)
    writer.writerow(["bin"] + names)
    for k in range(256):
        writer.writerow([k] + [f"{hists[n][k]:.9g}" for n in names])
    return buf.getvalue()
