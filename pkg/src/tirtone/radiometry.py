"""RAW radiometric frames and count-to-temperature conversion.

Counts are converted with the Planck-derived camera model

    T[degC] = P / ln(R / (S - O) + F) - 273.15

where the offset O is applied at conversion time (counts on disk are
pre-offset sensor values).
"""

from __future__ import annotations

import configparser
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

KELVIN = 273.15

TIRF_MAGIC = b"TIRF"
TIRF_VERSION = 1
_TIRF_HEADER = struct.Struct("<4sHHII")


class ProfileError(ValueError):
    """Camera profile is malformed or inconsistent with its count range."""


class FrameError(ValueError):
    """RAW frame is malformed or violates its declared bit depth."""


class SaturationError(ValueError):
    """A pixel lies outside the domain of the conversion (S <= O or log arg <= 1)."""

    def __init__(self, message: str, index: int):
        super().__init__(message)
        self.index = index


@dataclass(frozen=True)
class CameraProfile:
    name: str
    planck_p: float
    planck_r: float
    offset_o: float
    calib_f: float
    count_min: int = 0
    count_max: int = 2**14 - 1

    def validate(self) -> None:
        if not self.planck_p > 0:
            raise ProfileError("planck_p must be positive")
        if not self.planck_r > 0:
            raise ProfileError("planck_r must be positive")
        if self.count_min > self.count_max:
            raise ProfileError(f"count_min {self.count_min} exceeds count_max {self.count_max}")
        if self.count_min <= self.offset_o:
            raise ProfileError(
                f"count range [{self.count_min}, {self.count_max}] must lie above offset_o={self.offset_o}"
            )
        # R/(S-O) is decreasing in S, so the log argument is smallest at count_max.
        arg = self.planck_r / (self.count_max - self.offset_o) + self.calib_f
        if not arg > 1.0:
            raise ProfileError(
                f"calib_f={self.calib_f} gives log argument {arg:.6g} <= 1 at count_max={self.count_max}"
            )

    def celsius_to_counts(self, celsius):
        """Algebraic inverse of the conversion; returns real-valued counts."""
        t = np.asarray(celsius, dtype=np.float64) + KELVIN
        return self.offset_o + self.planck_r / (np.exp(self.planck_p / t) - self.calib_f)


@dataclass
class RadiometricFrame:
    counts: np.ndarray  # (height, width) unsigned integers
    bit_depth: int = 14

    def __post_init__(self):
        counts = np.asarray(self.counts)
        if counts.ndim != 2:
            raise FrameError(f"counts must be 2-D, got shape {counts.shape}")
        if not 1 <= self.bit_depth <= 32:
            raise FrameError(f"unsupported bit_depth {self.bit_depth}")
        if counts.size and not np.issubdtype(counts.dtype, np.integer):
            raise FrameError(f"counts must be integers, got {counts.dtype}")
        if counts.size:
            lo, hi = int(counts.min()), int(counts.max())
            limit = 2**self.bit_depth - 1
            if lo < 0 or hi > limit:
                bad = lo if lo < 0 else hi
                raise FrameError(f"count {bad} outside [0, {limit}] for bit_depth={self.bit_depth}")
        self.counts = counts.astype(np.int64 if self.bit_depth > 16 else np.uint16, copy=False)

    @property
    def height(self) -> int:
        return self.counts.shape[0]

    @property
    def width(self) -> int:
        return self.counts.shape[1]


@dataclass
class TemperatureMap:
    celsius: np.ndarray  # (height, width) float32

    def __post_init__(self):
        self.celsius = np.asarray(self.celsius, dtype=np.float32)
        if self.celsius.ndim != 2:
            raise ValueError(f"celsius must be 2-D, got shape {self.celsius.shape}")
        if not np.all(np.isfinite(self.celsius)):
            raise ValueError("temperature map contains non-finite values")

    @property
    def height(self) -> int:
        return self.celsius.shape[0]

    @property
    def width(self) -> int:
        return self.celsius.shape[1]


def load_profile(path) -> CameraProfile:
    """Read a ``key = value`` profile file (an optional ``[profile]`` header is allowed)."""
    text = Path(path).read_text()
    parser = configparser.ConfigParser()
    if not text.lstrip().startswith("["):
        text = "[profile]\n" + text
    try:
        parser.read_string(text)
        section = parser[parser.sections()[0]]
        profile = CameraProfile(
            name=section.get("name", Path(path).stem),
            planck_p=section.getfloat("planck_p"),
            planck_r=section.getfloat("planck_r"),
            offset_o=section.getfloat("offset_o"),
            calib_f=section.getfloat("calib_f"),
            count_min=section.getint("count_min", 0),
            count_max=section.getint("count_max", 2**14 - 1),
        )
    except (configparser.Error, IndexError, ValueError) as exc:
        raise ProfileError(f"cannot parse profile {path}: {exc}") from exc
    for key in ("planck_p", "planck_r", "offset_o", "calib_f"):
        if getattr(profile, key) is None:
            raise ProfileError(f"profile {path} is missing {key}")
    profile.validate()
    return profile


def save_profile(profile: CameraProfile, path) -> None:
    lines = [
        f"name = {profile.name}",
        f"planck_p = {profile.planck_p!r}",
        f"planck_r = {profile.planck_r!r}",
        f"offset_o = {profile.offset_o!r}",
        f"calib_f = {profile.calib_f!r}",
        f"count_min = {profile.count_min}",
        f"count_max = {profile.count_max}",
    ]
    Path(path).write_text("\n".join(lines) + "\n")


def celsius_from_counts(counts, profile: CameraProfile) -> np.ndarray:
    """Evaluate the conversion in float64 on (possibly real-valued) counts.

    Raises SaturationError naming the first flat index outside the domain.
    """
    s = np.asarray(counts, dtype=np.float64)
    diff = s - profile.offset_o
    flat = diff.ravel()
    bad = np.flatnonzero(~(flat > 0))
    if bad.size:
        i = int(bad[0])
        raise SaturationError(
            f"pixel {i}: count {s.ravel()[i]:g} <= offset_o {profile.offset_o:g}", i
        )
    with np.errstate(divide="ignore", invalid="ignore"):
        arg = profile.planck_r / diff + profile.calib_f
    bad = np.flatnonzero(~(arg.ravel() > 1.0))
    if bad.size:
        i = int(bad[0])
        raise SaturationError(f"pixel {i}: log argument {arg.ravel()[i]:g} <= 1", i)
    return profile.planck_p / np.log(arg) - KELVIN


def counts_to_celsius(frame: RadiometricFrame, profile: CameraProfile) -> TemperatureMap:
    return TemperatureMap(celsius_from_counts(frame.counts, profile).astype(np.float32))


def load_raw_frame(path, format: str = "raw-binary", mask14: bool = False) -> RadiometricFrame:
    """Load a frame stored as ``raw-binary`` (TIRF container) or ``png16``."""
    path = Path(path)
    if format == "png16":
        from PIL import Image

        with Image.open(path) as im:
            if im.mode not in ("I;16", "I;16B", "I;16L", "I", "L"):
                raise FrameError(f"{path}: expected single-channel grayscale, got mode {im.mode}")
            counts = np.array(im)
        if counts.ndim != 2:
            raise FrameError(f"{path}: expected single-channel image")
        counts = counts.astype(np.int64)
        if counts.min() < 0 or counts.max() > 65535:
            raise FrameError(f"{path}: values outside 16-bit range")
        if mask14:
            return RadiometricFrame(counts & 0x3FFF, bit_depth=14)
        return RadiometricFrame(counts.astype(np.uint16), bit_depth=16)
    if format == "raw-binary":
        return _read_tirf(path.read_bytes(), str(path))
    raise ValueError(f"unknown frame format {format!r}")


def _read_tirf(blob: bytes, source: str = "<bytes>") -> RadiometricFrame:
    if len(blob) < _TIRF_HEADER.size:
        raise FrameError(f"{source}: truncated header")
    magic, version, bit_depth, width, height = _TIRF_HEADER.unpack_from(blob)
    if magic != TIRF_MAGIC:
        raise FrameError(f"{source}: bad magic {magic!r}")
    if version != TIRF_VERSION:
        raise FrameError(f"{source}: unsupported version {version}")
    if not 1 <= bit_depth <= 16:
        raise FrameError(f"{source}: bit_depth {bit_depth} not representable in u16 payload")
    payload = blob[_TIRF_HEADER.size:]
    expected = 2 * width * height
    if len(payload) != expected:
        raise FrameError(
            f"{source}: header declares {width}x{height} ({width * height} pixels) "
            f"but payload holds {len(payload) / 2:g}"
        )
    counts = np.frombuffer(payload, dtype="<u2").reshape(height, width).astype(np.uint16)
    return RadiometricFrame(counts, bit_depth=bit_depth)


def save_raw_frame(frame: RadiometricFrame, path) -> None:
    if frame.bit_depth > 16:
        raise FrameError("raw-binary payload is u16; bit_depth must be <= 16")
    header = _TIRF_HEADER.pack(TIRF_MAGIC, TIRF_VERSION, frame.bit_depth, frame.width, frame.height)
    Path(path).write_bytes(header + frame.counts.astype("<u2").tobytes())


def save_png16(frame: RadiometricFrame, path) -> None:
    from PIL import Image

    Image.fromarray(frame.counts.astype(np.uint16)).save(path, format="PNG")
