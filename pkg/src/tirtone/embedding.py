"""Multichannel sinusoidal thermal embedding of temperature maps."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .baselines import round_half_away
from .radiometry import TemperatureMap

PERIOD_LO = 4.5
PERIOD_HI = 45.0

TEMB_MAGIC = b"TEMB"
_TEMB_HEADER = struct.Struct("<4sIII")


@dataclass(frozen=True)
class PeriodSet:
    periods: tuple[float, ...]
    rng_seed: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "periods", tuple(float(d) for d in self.periods))
        if len(self.periods) < 1:
            raise ValueError("PeriodSet needs at least one period")
        if not all(d > 0 for d in self.periods):
            raise ValueError(f"periods must be positive, got {self.periods}")

    def __len__(self) -> int:
        return len(self.periods)

    def permuted(self, order) -> "PeriodSet":
        return PeriodSet(tuple(self.periods[i] for i in order), self.rng_seed)


@dataclass
class ThermalEmbedding:
    data: np.ndarray  # (N, H, W) float32 in [0, 255]
    periods: PeriodSet = field(default=None)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]


def sample_periods(n: int, lo: float = PERIOD_LO, hi: float = PERIOD_HI, seed=None) -> PeriodSet:
    """Draw ``n`` periods uniformly from [lo, hi].

    ``seed`` may be an int (recorded on the result) or a ``np.random.Generator``.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if not 0 < lo <= hi:
        raise ValueError(f"need 0 < lo <= hi, got lo={lo}, hi={hi}")
    if isinstance(seed, np.random.Generator):
        rng, recorded = seed, None
    else:
        rng, recorded = np.random.default_rng(seed), seed
    if lo == hi:
        return PeriodSet((lo,) * n, recorded)
    return PeriodSet(tuple(rng.uniform(lo, hi, size=n)), recorded)


# Taylor coefficients of sin(x) up to x^17; on |x| <= pi/2 the truncation error is below 1e-13.
_SIN_COEFFS = tuple((-1) ** k / math.factorial(2 * k + 1) for k in range(9))
_CHUNK = 32768


def _sin_pi(u: np.ndarray, n: np.ndarray, x: np.ndarray, x2: np.ndarray, p: np.ndarray) -> np.ndarray:
    """sin(pi * u) into ``p`` using the other arrays as scratch.

    u = n + f with n = rint(u) and |f| <= 1/2, so sin(pi u) = (-1)^n sin(pi f)
    and the polynomial only sees |pi f| <= pi/2. Fully in place: numpy's
    float64 sin is scalar libm and several times slower at image sizes.
    """
    np.rint(u, out=n)
    np.subtract(u, n, out=x)
    x *= np.pi
    np.multiply(x, x, out=x2)
    np.multiply(x2, _SIN_COEFFS[-1], out=p)
    for c in _SIN_COEFFS[-2:0:-1]:
        p += c
        p *= x2
    p += _SIN_COEFFS[0]
    p *= x
    # n/2 - floor(n/2) is 0 for even n and 1/2 for odd n
    n *= 0.5
    np.subtract(n, np.floor(n, out=x2), out=n)
    n *= -4.0
    n += 1.0
    p *= n
    return p


def embed_array(celsius, periods) -> np.ndarray:
    """Embed raw temperatures of shape (..., H, W) into (..., N, H, W) float32.

    Evaluated in float64 and stored as float32.
    """
    t = np.asarray(celsius, dtype=np.float64)
    ds = periods.periods if isinstance(periods, PeriodSet) else tuple(float(d) for d in periods)
    lead, (h, w) = t.shape[:-2], t.shape[-2:]
    out = np.empty(lead + (len(ds), h, w), dtype=np.float32)
    flat_t = t.reshape(-1, h * w)
    flat_out = out.reshape(-1, len(ds), h * w)
    size = min(_CHUNK, h * w)
    u, n, x, x2, p = (np.empty(size) for _ in range(5))
    for b in range(flat_t.shape[0]):
        for start in range(0, h * w, size):
            stop = min(start + size, h * w)
            m = stop - start
            chunk = flat_t[b, start:stop]
            for k, d in enumerate(ds):
                np.divide(chunk, d, out=u[:m])
                _sin_pi(u[:m], n[:m], x[:m], x2[:m], p[:m])
                p[:m] *= 127.5
                p[:m] += 127.5
                flat_out[b, k, start:stop] = p[:m]
    return out


def embed(temp: TemperatureMap, periods: PeriodSet) -> ThermalEmbedding:
    return ThermalEmbedding(embed_array(temp.celsius, periods), periods)


def embedding_to_images(emb: ThermalEmbedding) -> list[np.ndarray]:
    return [np.clip(round_half_away(ch), 0, 255).astype(np.uint8) for ch in emb.data]


def save_embedding(emb: ThermalEmbedding, path) -> None:
    """Write the TEMB container: header, channel-major f32 payload, then f64 periods."""
    n, h, w = emb.data.shape
    blob = _TEMB_HEADER.pack(TEMB_MAGIC, n, h, w) + emb.data.astype("<f4").tobytes()
    if emb.periods is not None:
        blob += np.asarray(emb.periods.periods, dtype="<f8").tobytes()
    Path(path).write_bytes(blob)


def load_embedding(path) -> ThermalEmbedding:
    blob = Path(path).read_bytes()
    if len(blob) < _TEMB_HEADER.size:
        raise ValueError(f"{path}: truncated header")
    magic, n, h, w = _TEMB_HEADER.unpack_from(blob)
    if magic != TEMB_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    start = _TEMB_HEADER.size
    size = 4 * n * h * w
    payload = blob[start:start + size]
    if len(payload) != size:
        raise ValueError(f"{path}: payload shorter than {n}x{h}x{w}")
    data = np.frombuffer(payload, dtype="<f4").reshape(n, h, w).astype(np.float32)
    trailer = blob[start + size:]
    periods = None
    if len(trailer) == 8 * n:
        periods = PeriodSet(tuple(np.frombuffer(trailer, dtype="<f8")))
    elif trailer:
        raise ValueError(f"{path}: unexpected {len(trailer)} trailing bytes")
    return ThermalEmbedding(data, periods)
