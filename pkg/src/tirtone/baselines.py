"""Classical 14-bit to 8-bit tone-mapping operators used as comparison baselines.

All operators return ``uint8`` arrays with the frame's shape and round
half away from zero. Linear operators map a constant frame to all zeros;
histogram equalization maps it to all 255 (single bin, CDF = 1).
"""

from __future__ import annotations

import math

import numpy as np

from .radiometry import RadiometricFrame

FULL_SCALE_14 = 2**14 - 1


def round_half_away(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def _to_u8(x) -> np.ndarray:
    return np.clip(round_half_away(x), 0, 255).astype(np.uint8)


def _counts(frame) -> np.ndarray:
    counts = frame.counts if isinstance(frame, RadiometricFrame) else np.asarray(frame)
    return counts.astype(np.float64)


def _linear(c: np.ndarray, lo: float, hi: float) -> np.ndarray:
    if hi == lo:
        return np.zeros(c.shape, dtype=np.uint8)
    return _to_u8((np.clip(c, lo, hi) - lo) * 255.0 / (hi - lo))


def tonemap_raw(frame) -> np.ndarray:
    return _to_u8(_counts(frame) * 255.0 / FULL_SCALE_14)


def tonemap_minmax(frame) -> np.ndarray:
    c = _counts(frame)
    return _linear(c, c.min(), c.max())


def nearest_rank(values: np.ndarray, pct: float):
    """Nearest-rank percentile: the ceil(pct*n)-th smallest value (1-based, at least 1)."""
    ordered = np.sort(values, axis=None)
    n = ordered.size
    # 1e-9 guards products like 0.99 * 100 landing a hair above an integer
    rank = max(1, math.ceil(pct * n - 1e-9))
    return ordered[min(rank, n) - 1]


def tonemap_clip(frame, lo_pct: float = 0.01, hi_pct: float = 0.99) -> np.ndarray:
    if not 0.0 <= lo_pct < hi_pct <= 1.0:
        raise ValueError(f"need 0 <= lo_pct < hi_pct <= 1, got lo={lo_pct}, hi={hi_pct}")
    c = _counts(frame)
    return _linear(c, nearest_rank(c, lo_pct), nearest_rank(c, hi_pct))


def tonemap_he(frame, bin_width: int = 30, n_bins: int | None = None) -> np.ndarray:
    """Bin-based histogram equalization over the occupied count range.

    By default bins are ``bin_width`` counts wide. Passing ``n_bins`` instead
    splits ``[min, max]`` into that many equal bins.
    """
    c = _counts(frame)
    lo, hi = c.min(), c.max()
    span = hi - lo + 1
    if n_bins is not None:
        if n_bins < 1:
            raise ValueError("n_bins must be >= 1")
        idx = np.floor((c - lo) * n_bins / span).astype(np.int64)
        nb = n_bins
    else:
        if bin_width < 1:
            raise ValueError("bin_width must be >= 1")
        nb = int(math.ceil(span / bin_width))
        idx = np.floor((c - lo) / bin_width).astype(np.int64)
    hist = np.bincount(idx.ravel(), minlength=nb)
    # 255 * cum / n keeps exact half-way ties exact
    level = np.cumsum(hist) * 255.0 / c.size
    return _to_u8(level[idx])


def _cell_edges(n: int, cells: int) -> np.ndarray:
    return np.array([round(i * n / cells) for i in range(cells + 1)])


def _interp_axis(field: np.ndarray, centers: np.ndarray, n: int, axis: int) -> np.ndarray:
    """Linear interpolation of ``field`` sampled at ``centers`` onto 0..n-1, clamped at the ends."""
    pos = np.arange(n, dtype=np.float64)
    j = np.clip(np.searchsorted(centers, pos, side="right") - 1, 0, len(centers) - 1)
    j1 = np.minimum(j + 1, len(centers) - 1)
    gap = centers[j1] - centers[j]
    t = np.where(gap > 0, (pos - centers[j]) / np.where(gap > 0, gap, 1.0), 0.0)
    t = np.clip(t, 0.0, 1.0)
    a = np.take(field, j, axis=axis)
    b = np.take(field, j1, axis=axis)
    shape = [1, 1]
    shape[axis] = n
    t = t.reshape(shape)
    # a + t*(b - a) returns a exactly when b == a
    return a + t * (b - a)


def tonemap_fieldscale_lite(frame, grid: tuple[int, int] = (8, 8)) -> np.ndarray:
    """Rescale each pixel between bilinearly interpolated local min and max fields."""
    c = _counts(frame)
    h, w = c.shape
    rows, cols = grid
    if rows < 1 or cols < 1:
        raise ValueError("grid dimensions must be >= 1")
    if rows > h or cols > w:
        raise ValueError(f"grid {grid} larger than image {h}x{w}")
    re, ce = _cell_edges(h, rows), _cell_edges(w, cols)
    mins = np.empty((rows, cols))
    maxs = np.empty((rows, cols))
    for i in range(rows):
        for j in range(cols):
            cell = c[re[i]:re[i + 1], ce[j]:ce[j + 1]]
            mins[i, j] = cell.min()
            maxs[i, j] = cell.max()
    rc = (re[:-1] + re[1:] - 1) / 2.0
    cc = (ce[:-1] + ce[1:] - 1) / 2.0
    minf = _interp_axis(_interp_axis(mins, rc, h, 0), cc, w, 1)
    maxf = _interp_axis(_interp_axis(maxs, rc, h, 0), cc, w, 1)
    span = maxf - minf
    flat = span <= 0
    scaled = (c - minf) * 255.0 / np.where(flat, 1.0, span)
    out = _to_u8(np.clip(scaled, 0.0, 255.0))
    out[flat] = 0
    return out


OPERATORS = {
    "raw": tonemap_raw,
    "minmax": tonemap_minmax,
    "clip": tonemap_clip,
    "he": tonemap_he,
    "fieldscale": tonemap_fieldscale_lite,
}
