"""Synthetic radiometric scenes, surrogate task losses and the end-to-end trainer.

The surrogate losses stand in for downstream networks: ``object_contrast``
rewards separating annotated blobs from the background, ``edge_fidelity``
rewards strong gradients on true region boundaries while penalizing
gradients elsewhere.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .baselines import round_half_away
from .compression import CompressionNet, accumulate_grads, compress_backward, compress_forward, inspect_weights
from .diffmath import Adam
from .embedding import PERIOD_HI, PERIOD_LO, PeriodSet, embed_array, sample_periods
from .radiometry import CameraProfile, RadiometricFrame, TemperatureMap, counts_to_celsius, load_raw_frame, save_raw_frame

log = logging.getLogger(__name__)

# Planck constants typical of an uncooled 14-bit LWIR core; not a calibration of any real unit.
DEFAULT_PROFILE = CameraProfile(
    name="synthetic-lwir", planck_p=1428.0, planck_r=366545.0, offset_o=342.0, calib_f=1.0,
    count_min=343, count_max=16383,
)

LOSS_KINDS = ("object_contrast", "edge_fidelity", "reconstruction")

CONTRAST_EPS = 1.0
EDGE_DELTA = 1e-2
EDGE_LAMBDA = 0.5

SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T


@dataclass
class SyntheticScene:
    frame: RadiometricFrame
    temp: TemperatureMap
    object_masks: list[np.ndarray]
    edge_map: np.ndarray
    seed: object = None


def generate_scene(seed, width: int = 64, height: int = 64, ambient_range=(0.0, 35.0),
                   n_objects: int = 3, noise_std: float = 1.0,
                   profile: CameraProfile = DEFAULT_PROFILE) -> SyntheticScene:
    """Smooth polynomial ambient field plus disjoint elliptical hot/cold blobs.

    Blob temperature offsets are uniform in +-[5, 40] degC. Counts come from
    inverting the camera model, plus Gaussian count noise.
    """
    if width < 16 or height < 16:
        raise ValueError(f"scene must be at least 16x16, got {width}x{height}")
    if n_objects < 0:
        raise ValueError("n_objects must be >= 0")
    lo, hi = ambient_range
    if not lo <= hi:
        raise ValueError("ambient_range must be (low, high)")
    rng = np.random.default_rng(seed)

    yy, xx = np.meshgrid(np.linspace(-1, 1, height), np.linspace(-1, 1, width), indexing="ij")
    c = rng.normal(size=6)
    field_ = c[0] + c[1] * xx + c[2] * yy + c[3] * xx**2 + c[4] * xx * yy + c[5] * yy**2
    span = field_.max() - field_.min()
    unit = (field_ - field_.min()) / span if span > 0 else np.full_like(field_, 0.5)
    t_lo, t_hi = np.sort(rng.uniform(lo, hi, size=2))
    temp = t_lo + unit * (t_hi - t_lo)

    masks: list[np.ndarray] = []
    taken = np.zeros((height, width), dtype=bool)
    side = min(width, height)
    for _ in range(n_objects):
        for _attempt in range(200):
            a, b = rng.uniform(0.08, 0.2, size=2) * side
            a, b = max(a, 2.0), max(b, 2.0)
            cy, cx = rng.uniform(0, height - 1), rng.uniform(0, width - 1)
            theta = rng.uniform(0, math.pi)
            dy, dx = np.mgrid[0:height, 0:width] - np.array([cy, cx])[:, None, None]
            u = dx * math.cos(theta) + dy * math.sin(theta)
            v = -dx * math.sin(theta) + dy * math.cos(theta)
            mask = (u / a) ** 2 + (v / b) ** 2 <= 1.0
            if mask.sum() < 9:
                continue
            # keep a 2-pixel gap so boundaries of different blobs never touch
            if np.any(ndimage.binary_dilation(mask, iterations=2) & taken):
                continue
            break
        else:
            raise RuntimeError(f"could not place {n_objects} disjoint objects in {width}x{height}")
        masks.append(mask)
        taken |= mask
        delta = rng.uniform(5.0, 40.0) * rng.choice([-1.0, 1.0])
        temp = np.where(mask, temp + delta, temp)

    counts = profile.celsius_to_counts(temp)
    if noise_std > 0:
        counts = counts + rng.normal(0.0, noise_std, size=counts.shape)
    counts = np.clip(round_half_away(counts), profile.count_min, profile.count_max).astype(np.uint16)

    edge = np.zeros((height, width), dtype=bool)
    for m in masks:
        edge |= ndimage.binary_dilation(m) & ~ndimage.binary_erosion(m)
    return SyntheticScene(RadiometricFrame(counts, 14), TemperatureMap(temp), masks, edge, seed)


def generate_dataset(n: int, seed: int, **kwargs) -> list[SyntheticScene]:
    return [generate_scene([seed, i], **kwargs) for i in range(n)]


def save_dataset(scenes: list[SyntheticScene], directory, generator_seed=None, params: dict | None = None) -> Path:
    """Write each scene as a TIRF frame plus an .npy annotation stack, and a manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, sc in enumerate(scenes):
        frame_name, ann_name = f"scene_{i:05d}.tirf", f"scene_{i:05d}.npy"
        save_raw_frame(sc.frame, directory / frame_name)
        stack = np.stack([sc.temp.celsius] + [m.astype(np.float32) for m in sc.object_masks]
                         + [sc.edge_map.astype(np.float32)])
        np.save(directory / ann_name, stack)
        entries.append({"frame": frame_name, "annotations": ann_name,
                        "n_objects": len(sc.object_masks), "seed": sc.seed})
    manifest = {"generator_seed": generator_seed, "params": params or {}, "scenes": entries}
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return path


def load_dataset(directory) -> list[SyntheticScene]:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no manifest.json in {directory}")
    manifest = json.loads(manifest_path.read_text())
    scenes = []
    for entry in manifest["scenes"]:
        frame = load_raw_frame(directory / entry["frame"], "raw-binary")
        stack = np.load(directory / entry["annotations"])
        k = entry["n_objects"]
        masks = [stack[1 + j] > 0.5 for j in range(k)]
        scenes.append(SyntheticScene(frame, TemperatureMap(stack[0]), masks, stack[1 + k] > 0.5, entry.get("seed")))
    if not scenes:
        raise ValueError(f"dataset {directory} is empty")
    return scenes


# --- surrogate losses --------------------------------------------------------

def loss_object_contrast(img: np.ndarray, scene: SyntheticScene, eps: float = CONTRAST_EPS):
    """Negative Fisher-style separation of each blob from the background.

    ``img`` is (C, H, W). Returns ``(loss, grad)`` with grad shaped like img.
    """
    if not scene.object_masks:
        raise ValueError("object_contrast needs at least one object mask")
    x = np.asarray(img, dtype=np.float64)
    background = ~np.any(scene.object_masks, axis=0)
    n_out = background.sum()
    if n_out == 0:
        raise ValueError("object masks cover the whole image")
    n_ch = x.shape[0]
    total = 0.0
    grad = np.zeros_like(x)
    for ch in range(n_ch):
        xc = x[ch]
        mu_out = xc[background].mean()
        var_out = xc[background].var()
        for m in scene.object_masks:
            n_in = m.sum()
            mu_in = xc[m].mean()
            var_in = xc[m].var()
            diff = mu_in - mu_out
            denom = var_in + var_out + eps
            total += diff * diff / denom
            g = grad[ch]
            g[m] += 2 * diff / (denom * n_in) - diff**2 / denom**2 * 2 * (xc[m] - mu_in) / n_in
            g[background] += -2 * diff / (denom * n_out) - diff**2 / denom**2 * 2 * (xc[background] - mu_out) / n_out
    return -total / n_ch, -grad / n_ch


def _sobel(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    h, w = x.shape
    out = np.zeros((h - 2, w - 2))
    for a in range(3):
        for b in range(3):
            if kernel[a, b]:
                out += kernel[a, b] * x[a:a + h - 2, b:b + w - 2]
    return out


def _sobel_backward(dout: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    h, w = dout.shape[0] + 2, dout.shape[1] + 2
    dx = np.zeros((h, w))
    for a in range(3):
        for b in range(3):
            if kernel[a, b]:
                dx[a:a + h - 2, b:b + w - 2] += kernel[a, b] * dout
    return dx


def loss_edge_fidelity(img: np.ndarray, scene: SyntheticScene, lam: float = EDGE_LAMBDA, delta: float = EDGE_DELTA):
    """-mean |grad| on true edges + lam * mean |grad| elsewhere (Sobel, valid interior)."""
    on = scene.edge_map[1:-1, 1:-1]
    if not on.any():
        raise ValueError("edge_fidelity needs a nonempty edge map")
    off = ~on
    x = np.asarray(img, dtype=np.float64)
    n_ch = x.shape[0]
    root = math.sqrt(delta)
    total = 0.0
    grad = np.zeros_like(x)
    for ch in range(n_ch):
        gx, gy = _sobel(x[ch], SOBEL_X), _sobel(x[ch], SOBEL_Y)
        r = np.sqrt(gx * gx + gy * gy + delta)
        mag = r - root
        weight = np.where(on, -1.0 / on.sum(), lam / off.sum() if off.any() else 0.0)
        total += float((weight * mag).sum())
        dmag = weight / r
        grad[ch] = _sobel_backward(dmag * gx, SOBEL_X) + _sobel_backward(dmag * gy, SOBEL_Y)
    return total / n_ch, grad / n_ch


def loss_reconstruction(img: np.ndarray, scene: SyntheticScene):
    """Mean squared error of every channel against the min-max scaled true temperature."""
    t = scene.temp.celsius.astype(np.float64)
    span = t.max() - t.min()
    target = (t - t.min()) * 255.0 / span if span > 0 else np.zeros_like(t)
    x = np.asarray(img, dtype=np.float64)
    r = (x - target[None]) / 255.0
    return float((r * r).mean()), 2 * r / 255.0 / r.size


LOSSES = {
    "object_contrast": loss_object_contrast,
    "edge_fidelity": loss_edge_fidelity,
    "reconstruction": loss_reconstruction,
}


def batch_loss(kind: str, images: np.ndarray, scenes) -> tuple[float, np.ndarray]:
    fn = LOSSES[kind]
    total = 0.0
    grad = np.zeros(images.shape, dtype=np.float64)
    for i, sc in enumerate(scenes):
        value, g = fn(images[i], sc)
        total += value
        grad[i] = g
    b = len(scenes)
    return total / b, grad / b


# --- training ------------------------------------------------------------------

class TrainingDiverged(FloatingPointError):
    def __init__(self, epoch: int, step: int, loss: float):
        super().__init__(f"non-finite loss {loss} at epoch {epoch}, step {step}")
        self.epoch, self.step = epoch, step


@dataclass
class TrainConfig:
    n_channels: int = 3
    period_lo: float = PERIOD_LO
    period_hi: float = PERIOD_HI
    resample_periods_per_step: bool = True
    epochs: int = 30
    batch_size: int = 8
    lr: float = 1e-3
    seed: int = 0
    loss: str = "object_contrast"
    fixed_periods: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.fixed_periods is not None:
            self.fixed_periods = tuple(float(d) for d in self.fixed_periods)
            if len(self.fixed_periods) != self.n_channels:
                raise ValueError("fixed_periods must have n_channels entries")
        if self.n_channels < 1 or self.epochs < 1 or self.batch_size < 1:
            raise ValueError("n_channels, epochs and batch_size must be positive")
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if not 0 < self.period_lo <= self.period_hi:
            raise ValueError("need 0 < period_lo <= period_hi")
        if self.loss not in LOSS_KINDS:
            raise ValueError(f"unknown loss {self.loss!r}; expected one of {LOSS_KINDS}")
        if self.seed is None:
            raise ValueError("seed is mandatory")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["fixed_periods"] = list(self.fixed_periods) if self.fixed_periods is not None else None
        return d

    def eval_periods(self) -> PeriodSet:
        """Periods used at evaluation: the fixed set, or one draw from the seed."""
        if self.fixed_periods is not None:
            return PeriodSet(self.fixed_periods, self.seed)
        return sample_periods(self.n_channels, self.period_lo, self.period_hi, seed=self.seed)


@dataclass
class TrainResult:
    net: CompressionNet
    periods: PeriodSet
    records: list[dict] = field(default_factory=list)
    epoch_losses: list[float] = field(default_factory=list)

    def log_lines(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)


def scene_temperatures(scenes, profile: CameraProfile = DEFAULT_PROFILE) -> np.ndarray:
    return np.stack([counts_to_celsius(sc.frame, profile).celsius for sc in scenes])


def train(config: TrainConfig, scenes, net: CompressionNet | None = None,
          profile: CameraProfile = DEFAULT_PROFILE) -> TrainResult:
    """Adam-train the compression parameters against the configured surrogate loss.

    A fresh net is initialized from ``config.seed`` unless one is given (it
    is copied, not modified). Periods are redrawn every step unless
    ``resample_periods_per_step`` is off or ``fixed_periods`` is set.
    """
    scenes = list(scenes)
    if not scenes:
        raise ValueError("training needs at least one scene")
    net = CompressionNet.init(config.n_channels, seed=config.seed) if net is None else net.copy()
    if net.n_embeddings != config.n_channels:
        raise ValueError("net and config disagree on the number of embeddings")
    temps = scene_temperatures(scenes, profile)
    rng = np.random.default_rng([config.seed, 1])
    periods = config.eval_periods()
    resample = config.resample_periods_per_step and config.fixed_periods is None
    opt = Adam(net.params(), lr=config.lr)
    result = TrainResult(net, periods)
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(len(scenes))
        losses = []
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            step_periods = sample_periods(config.n_channels, config.period_lo, config.period_hi, rng) if resample else periods
            emb = embed_array(temps[idx], step_periods)
            images, omega, cache = compress_forward(emb, net)
            loss, grad = batch_loss(config.loss, images, [scenes[i] for i in idx])
            if not math.isfinite(loss):
                raise TrainingDiverged(epoch, step, loss)
            grads, _ = compress_backward(cache, grad)
            net.zero_grad()
            accumulate_grads(net, grads)
            opt.step()
            losses.append(loss)
            result.records.append({
                "kind": "step", "epoch": epoch, "step": step, "loss": loss,
                "periods": [float(d) for d in step_periods.periods],
                "omega": omega.mean(axis=0).astype(np.float64).tolist(),
            })
            step += 1
        mean = float(np.mean(losses))
        result.epoch_losses.append(mean)
        result.records.append({"kind": "epoch", "epoch": epoch, "step": step, "loss": mean,
                               "periods": [float(d) for d in periods.periods]})
        log.info("epoch %d loss %.6g", epoch, mean)
    return result


def tonemap_scenes(net: CompressionNet, scenes, periods: PeriodSet, profile: CameraProfile = DEFAULT_PROFILE,
                   batch_size: int = 16):
    """Run the net over scenes; returns (images (S,3,H,W), omega (S,3,N))."""
    temps = scene_temperatures(scenes, profile)
    images, omegas = [], []
    for start in range(0, len(temps), batch_size):
        out, omega, _ = compress_forward(embed_array(temps[start:start + batch_size], periods), net)
        images.append(out)
        omegas.append(omega)
    return np.concatenate(images), np.concatenate(omegas)


def evaluate_loss(net: CompressionNet, scenes, periods: PeriodSet, kind: str,
                  profile: CameraProfile = DEFAULT_PROFILE) -> float:
    images, _ = tonemap_scenes(net, scenes, periods, profile)
    return batch_loss(kind, images, scenes)[0]


def artifact_rejection_probe(net: CompressionNet, periods: PeriodSet, scenes,
                             profile: CameraProfile = DEFAULT_PROFILE):
    """Average the net's weights over scenes and report them per period."""
    _, omega = tonemap_scenes(net, scenes, periods, profile)
    return inspect_weights(omega.mean(axis=0), periods)
