"""``tirtone`` command line: conversion, tone-mapping, embeddings, training and analysis.

Exit codes: 0 success, 2 invalid input or arguments, 3 file-system errors.
Every output file is written to a temporary sibling and renamed into place,
so a failed run never leaves a partial artifact.
"""

from __future__ import annotations

import argparse
import contextlib
import io
import json
import logging
import os
import statistics
import sys
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import baselines
from .baselines import round_half_away
from .compression import CompressionNet, compress_forward, inspect_weights, load_net, net_checkpoint_bytes
from .embedding import PERIOD_HI, PERIOD_LO, PeriodSet, embed, embed_array, sample_periods
from .metrics import average_histogram, histogram_csv, histogram_kl, image_entropy
from .radiometry import CameraProfile, counts_to_celsius, load_profile, load_raw_frame
from .training import (
    DEFAULT_PROFILE,
    LOSS_KINDS,
    TrainConfig,
    generate_dataset,
    load_dataset,
    save_dataset,
    tonemap_scenes,
    train,
)

log = logging.getLogger("tirtone")

EXIT_OK, EXIT_INVALID, EXIT_IO = 0, 2, 3
OPERATORS = ("raw", "minmax", "clip", "he", "fieldscale", "tcnet")
PROFILE_FILE = "profile.txt"


class UsageError(ValueError):
    """Invalid combination of arguments discovered after parsing."""


@dataclass
class RunConfig:
    """Everything that determines one invocation, in a canonical JSON text form."""

    subcommand: str
    seed: int = 0
    profile: str | None = None
    inputs: list[str] = field(default_factory=list)
    outputs: dict[str, str] = field(default_factory=dict)
    operator: str | None = None
    params: dict = field(default_factory=dict)
    train: dict | None = None

    def to_text(self) -> str:
        return json.dumps(self.__dict__, sort_keys=True, indent=1) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        data = json.loads(text)
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise UsageError(f"unknown run-config keys: {sorted(unknown)}")
        return cls(**data)


# --- file helpers -------------------------------------------------------------

@contextlib.contextmanager
def atomic_output(path):
    """Yield a temporary path next to ``path``; rename it over ``path`` on success."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    os.close(fd)
    try:
        yield Path(tmp)
        os.replace(tmp, path)
    except BaseException:
        with contextlib.suppress(FileNotFoundError):
            os.unlink(tmp)
        raise


def write_bytes(path, blob: bytes) -> None:
    with atomic_output(path) as tmp:
        tmp.write_bytes(blob)


def write_text(path, text: str) -> None:
    write_bytes(path, text.encode())


def png_bytes(img: np.ndarray) -> bytes:
    from PIL import Image

    arr = np.ascontiguousarray(img)
    if arr.ndim == 3:
        arr = np.ascontiguousarray(np.moveaxis(arr, 0, -1))  # (3, H, W) -> (H, W, 3)
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    return buf.getvalue()


def npy_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.save(buf, arr, allow_pickle=False)
    return buf.getvalue()


def to_u8(img: np.ndarray) -> np.ndarray:
    return np.clip(round_half_away(img), 0, 255).astype(np.uint8)


def resolve_profile(args, dataset_dir=None, required: bool = False) -> CameraProfile:
    if args.profile:
        return load_profile(args.profile)
    if dataset_dir is not None and (Path(dataset_dir) / PROFILE_FILE).exists():
        return load_profile(Path(dataset_dir) / PROFILE_FILE)
    if required:
        raise UsageError(f"{args.command} needs --profile")
    return DEFAULT_PROFILE


def parse_periods(text: str | None) -> PeriodSet | None:
    if not text:
        return None
    try:
        return PeriodSet(tuple(float(t) for t in text.split(",")))
    except ValueError as exc:
        raise UsageError(f"bad --periods {text!r}: {exc}") from exc


def tcnet_image(net: CompressionNet, periods: PeriodSet, celsius: np.ndarray):
    out, omega, _ = compress_forward(embed_array(celsius, periods)[None], net)
    return to_u8(out[0]), omega[0]


def load_checkpoint_periods(path, override: PeriodSet | None = None):
    net, periods, meta = load_net(path)
    periods = override or periods
    if periods is None:
        raise UsageError(f"{path} stores no periods; pass --periods")
    if len(periods.periods) != net.n_embeddings:
        raise UsageError(f"{len(periods.periods)} periods for a net with N={net.n_embeddings}")
    return net, periods, meta


# --- subcommands ----------------------------------------------------------------

def cmd_convert(args) -> int:
    profile = resolve_profile(args, required=True)
    frame = load_raw_frame(args.input, args.format, mask14=args.mask14)
    temp = counts_to_celsius(frame, profile)
    write_bytes(args.output, npy_bytes(temp.celsius))
    if args.preview:
        write_bytes(args.preview, png_bytes(baselines.tonemap_minmax(temp.celsius)))
    print(f"{args.output}: {temp.height}x{temp.width} degC, "
          f"min {temp.celsius.min():.3f} max {temp.celsius.max():.3f}")
    return EXIT_OK


def cmd_tonemap(args) -> int:
    op = args.operator
    frame = load_raw_frame(args.input, args.format, mask14=args.mask14)
    if op == "tcnet":
        if not args.checkpoint:
            raise UsageError("operator tcnet needs --checkpoint")
        profile = resolve_profile(args, required=True)
        net, periods, _ = load_checkpoint_periods(args.checkpoint, parse_periods(args.periods))
        img, omega = tcnet_image(net, periods, counts_to_celsius(frame, profile).celsius)
        weights = args.weights_csv or str(Path(args.output).with_suffix(".omega.csv"))
        write_bytes(args.output, png_bytes(img))
        write_text(weights, inspect_weights(omega, periods).to_csv())
        print(f"{args.output}: tcnet N={net.n_embeddings}; weights in {weights}")
        return EXIT_OK
    if op == "raw":
        img = baselines.tonemap_raw(frame)
    elif op == "minmax":
        img = baselines.tonemap_minmax(frame)
    elif op == "clip":
        img = baselines.tonemap_clip(frame, args.lo, args.hi)
    elif op == "he":
        img = baselines.tonemap_he(frame, bin_width=args.bin_width, n_bins=args.n_bins)
    else:
        img = baselines.tonemap_fieldscale_lite(frame, tuple(args.grid))
    write_bytes(args.output, png_bytes(img))
    print(f"{args.output}: {op}")
    return EXIT_OK


def cmd_embed(args) -> int:
    from .embedding import embedding_to_images, save_embedding

    profile = resolve_profile(args, required=True)
    periods = parse_periods(args.periods) or sample_periods(args.channels, args.period_lo, args.period_hi, seed=args.seed)
    emb = embed(counts_to_celsius(load_raw_frame(args.input, args.format, mask14=args.mask14), profile), periods)
    with atomic_output(args.output) as tmp:
        save_embedding(emb, tmp)
    if args.png_dir:
        for k, img in enumerate(embedding_to_images(emb)):
            write_bytes(Path(args.png_dir) / f"embedding_{k:02d}.png", png_bytes(img))
    print(f"{args.output}: N={len(periods)} D=" + ",".join(f"{d:.4f}" for d in periods.periods))
    return EXIT_OK


def cmd_generate(args) -> int:
    out = Path(args.output)
    if out.exists() and any(out.iterdir()):
        raise UsageError(f"{out} exists and is not empty")
    scenes = generate_dataset(args.scenes, args.seed, width=args.size[0], height=args.size[1],
                              n_objects=args.objects)
    profile = resolve_profile(args)
    out.parent.mkdir(parents=True, exist_ok=True)
    staging = Path(tempfile.mkdtemp(prefix=f".{out.name}.", dir=out.parent))
    try:
        save_dataset(scenes, staging, generator_seed=args.seed,
                     params={"width": args.size[0], "height": args.size[1], "n_objects": args.objects})
        (staging / PROFILE_FILE).write_text(_profile_text(profile))
        if out.exists():
            out.rmdir()
        os.replace(staging, out)
    except BaseException:
        import shutil

        shutil.rmtree(staging, ignore_errors=True)
        raise
    print(f"{out}: {len(scenes)} scenes")
    return EXIT_OK


def _profile_text(profile: CameraProfile) -> str:
    from .radiometry import save_profile

    with tempfile.TemporaryDirectory() as d:
        save_profile(profile, Path(d) / "p.txt")
        return (Path(d) / "p.txt").read_text()


def _scenes(args):
    if args.dataset:
        return load_dataset(args.dataset), args.dataset
    if args.scenes:
        return generate_dataset(args.scenes, args.seed, width=args.size[0], height=args.size[1]), None
    raise UsageError("give --dataset DIR or --scenes N")


def train_config(args) -> TrainConfig:
    fixed = parse_periods(args.fixed_periods)
    return TrainConfig(
        n_channels=args.channels, period_lo=args.period_lo, period_hi=args.period_hi,
        resample_periods_per_step=not args.no_resample, epochs=args.epochs,
        batch_size=args.batch_size, lr=args.lr, seed=args.seed, loss=args.loss,
        fixed_periods=fixed.periods if fixed else None,
    )


def cmd_train(args) -> int:
    config = train_config(args)
    scenes, source = _scenes(args)
    profile = resolve_profile(args, source)
    result = train(config, scenes, profile=profile)
    run = run_config(args)
    run.train = config.to_dict()
    # file locations do not affect the weights; leaving them out keeps checkpoints path-independent
    run.inputs, run.outputs = [], {}
    meta = {"train_config": config.to_dict(), "run_config": json.loads(run.to_text()),
            "epoch_losses": result.epoch_losses}
    write_bytes(args.output, net_checkpoint_bytes(result.net, result.periods, meta))
    write_text(args.log or str(Path(args.output).with_suffix(".log.jsonl")), result.log_lines())
    print(f"{args.output}: loss {result.epoch_losses[0]:.6g} -> {result.epoch_losses[-1]:.6g}")
    return EXIT_OK


def compare_metrics(net_a, periods_a, net_b, periods_b, scenes, profile) -> dict:
    imgs_a, omega_a = tonemap_scenes(net_a, scenes, periods_a, profile)
    imgs_b, omega_b = tonemap_scenes(net_b, scenes, periods_b, profile)
    u8_a, u8_b = [to_u8(x) for x in imgs_a], [to_u8(x) for x in imgs_b]
    hist_a, hist_b = average_histogram(u8_a), average_histogram(u8_b)
    return {
        "entropy_a": float(np.mean([image_entropy(x) for x in u8_a])),
        "entropy_b": float(np.mean([image_entropy(x) for x in u8_b])),
        "kl_a_b": histogram_kl(hist_a, hist_b),
        "kl_b_a": histogram_kl(hist_b, hist_a),
        "omega_max_abs_diff": float(np.abs(omega_a.mean(axis=0) - omega_b.mean(axis=0)).max()),
        "hist_a": hist_a,
        "hist_b": hist_b,
    }


def cmd_compare(args) -> int:
    scenes = load_dataset(args.dataset)
    profile = resolve_profile(args, args.dataset)
    net_a, periods_a, _ = load_checkpoint_periods(args.checkpoints[0])
    net_b, periods_b, _ = load_checkpoint_periods(args.checkpoints[1])
    if net_a.n_embeddings != net_b.n_embeddings:
        raise UsageError(f"incompatible checkpoints: N={net_a.n_embeddings} vs N={net_b.n_embeddings}")
    m = compare_metrics(net_a, periods_a, net_b, periods_b, scenes, profile)
    lines = ["metric,value"] + [f"{k},{m[k]:.9g}" for k in
                                ("entropy_a", "entropy_b", "kl_a_b", "kl_b_a", "omega_max_abs_diff")]
    write_text(args.output, "\n".join(lines) + "\n")
    if args.hist_csv:
        write_text(args.hist_csv, histogram_csv({"a": m["hist_a"], "b": m["hist_b"]}))
    print("\n".join(lines))
    return EXIT_OK


def bench(n_channels: int, width: int = 640, height: int = 512, iters: int = 20, seed: int = 0) -> dict:
    if iters < 10:
        raise UsageError(f"--iters must be >= 10, got {iters}")
    rng = np.random.default_rng(seed)
    celsius = rng.uniform(0.0, 40.0, size=(height, width)).astype(np.float32)
    periods = sample_periods(n_channels, seed=rng)
    net = CompressionNet.init(n_channels, seed=seed)
    t_embed, t_comp = [], []
    for _ in range(iters):
        t0 = time.perf_counter()
        emb = embed_array(celsius, periods)
        t1 = time.perf_counter()
        compress_forward(emb[None], net)
        t2 = time.perf_counter()
        t_embed.append(t1 - t0)
        t_comp.append(t2 - t1)
    return {"channels": n_channels, "width": width, "height": height, "iters": iters,
            "embed_ms_median": 1e3 * statistics.median(t_embed),
            "compress_ms_median": 1e3 * statistics.median(t_comp)}


def cmd_bench(args) -> int:
    report = bench(args.channels, args.width, args.height, args.iters, args.seed)
    text = "".join(f"{k},{v:.4f}\n" if isinstance(v, float) else f"{k},{v}\n" for k, v in report.items())
    if args.output:
        write_text(args.output, text)
    print(text, end="")
    return EXIT_OK


def cmd_inspect_weights(args) -> int:
    net, periods, _ = load_checkpoint_periods(args.checkpoint, parse_periods(args.periods))
    if args.dataset:
        scenes = load_dataset(args.dataset)
        _, omega = tonemap_scenes(net, scenes, periods, resolve_profile(args, args.dataset))
    elif args.input:
        profile = resolve_profile(args, required=True)
        _, omega = tcnet_image(net, periods, counts_to_celsius(load_raw_frame(args.input), profile).celsius)
    else:
        raise UsageError("give --dataset DIR or --input FRAME")
    text = inspect_weights(omega, periods).to_csv()
    if args.output:
        write_text(args.output, text)
    print(text, end="")
    return EXIT_OK


COMMANDS = {
    "convert": cmd_convert, "tonemap": cmd_tonemap, "embed": cmd_embed, "generate": cmd_generate,
    "train": cmd_train, "compare": cmd_compare, "bench": cmd_bench, "inspect-weights": cmd_inspect_weights,
}


# --- argument parsing ------------------------------------------------------------

def _frame_args(p):
    p.add_argument("input", help="raw frame (TIRF container or 16-bit PNG)")
    p.add_argument("--format", choices=("raw-binary", "png16"), default="raw-binary")
    p.add_argument("--mask14", action="store_true", help="keep only the low 14 bits of each sample")


def _period_args(p):
    p.add_argument("--channels", "-n", type=int, default=3, help="number of embeddings N")
    p.add_argument("--period-lo", type=float, default=PERIOD_LO)
    p.add_argument("--period-hi", type=float, default=PERIOD_HI)


def _global_flags(parser, suppress: bool) -> None:
    # the subcommand copy suppresses its defaults so it never overwrites a flag given before the subcommand
    default = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    parser.add_argument("--seed", type=int, default=default(0))
    parser.add_argument("--profile", default=default(None), help="camera profile file (key = value)")
    parser.add_argument("--config", default=default(None), help="run-config JSON whose values replace the defaults")
    parser.add_argument("-v", "--verbose", action="store_true", default=default(False))


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, suppress=True)
    parser = argparse.ArgumentParser(prog="tirtone", description=__doc__.splitlines()[0])
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)
    parser.commands = sub.choices

    p = sub.add_parser("convert", parents=[common], help="counts -> temperature (.npy, float32 degC)")
    _frame_args(p)
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--preview", help="optional min-max 8-bit PNG of the temperature map")

    p = sub.add_parser("tonemap", parents=[common], help="frame -> 8-bit PNG")
    _frame_args(p)
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--operator", "-m", choices=OPERATORS, default="minmax")
    p.add_argument("--lo", type=float, default=0.01, help="clip: low percentile fraction")
    p.add_argument("--hi", type=float, default=0.99, help="clip: high percentile fraction")
    p.add_argument("--bin-width", type=int, default=30, help="he: histogram bin width in counts")
    p.add_argument("--n-bins", type=int, help="he: fixed bin count instead of a bin width")
    p.add_argument("--grid", type=int, nargs=2, default=(8, 8), metavar=("ROWS", "COLS"), help="fieldscale grid")
    p.add_argument("--checkpoint", help="tcnet: trained weights (.tcnw)")
    p.add_argument("--periods", help="tcnet: comma-separated periods overriding the checkpoint's")
    p.add_argument("--weights-csv", help="tcnet: where to write the weight table (default <output>.omega.csv)")

    p = sub.add_parser("embed", parents=[common], help="frame -> thermal embeddings (.temb)")
    _frame_args(p)
    _period_args(p)
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--periods", help="comma-separated periods; otherwise sampled from --seed")
    p.add_argument("--png-dir", help="also write each embedding as an 8-bit PNG")

    p = sub.add_parser("generate", parents=[common], help="write a synthetic scene dataset")
    p.add_argument("-o", "--output", required=True, help="dataset directory")
    p.add_argument("--scenes", type=int, default=200)
    p.add_argument("--size", type=int, nargs=2, default=(64, 64), metavar=("W", "H"))
    p.add_argument("--objects", type=int, default=3)

    p = sub.add_parser("train", parents=[common], help="train the compression net on a surrogate loss")
    _period_args(p)
    p.add_argument("-o", "--output", required=True, help="checkpoint path (.tcnw)")
    p.add_argument("--log", help="JSON-lines training log (default <output>.log.jsonl)")
    p.add_argument("--dataset", help="dataset directory written by 'generate'")
    p.add_argument("--scenes", type=int, help="generate this many scenes in memory instead")
    p.add_argument("--size", type=int, nargs=2, default=(64, 64), metavar=("W", "H"))
    p.add_argument("--loss", choices=LOSS_KINDS, default="object_contrast")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--fixed-periods", help="comma-separated periods used for every step")
    p.add_argument("--no-resample", action="store_true", help="keep the initial periods for every step")

    p = sub.add_parser("compare", parents=[common], help="entropy / histogram / KL between two checkpoints")
    p.add_argument("dataset")
    p.add_argument("checkpoints", nargs=2)
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--hist-csv", help="also write both average histograms")

    p = sub.add_parser("bench", parents=[common], help="median embedding and compression runtimes")
    p.add_argument("--channels", "-n", type=int, default=3)
    p.add_argument("--width", type=int, default=640)
    p.add_argument("--height", type=int, default=512)
    p.add_argument("--iters", type=int, default=50)
    p.add_argument("-o", "--output")

    p = sub.add_parser("inspect-weights", parents=[common], help="per-period compression weights")
    p.add_argument("checkpoint")
    p.add_argument("--dataset")
    p.add_argument("--input", help="single raw frame instead of a dataset")
    p.add_argument("--periods")
    p.add_argument("-o", "--output")
    return parser


def run_config(args) -> RunConfig:
    """Canonical record of a parsed command line."""
    skip = {"command", "seed", "profile", "config", "verbose", "func"}
    values = {k: (list(v) if isinstance(v, tuple) else v) for k, v in vars(args).items() if k not in skip}
    inputs = [values.pop(k) for k in ("input", "dataset", "checkpoint") if values.get(k)]
    inputs += values.pop("checkpoints", None) or []
    outputs = {k: values.pop(k) for k in ("output", "log", "preview", "png_dir", "hist_csv", "weights_csv")
               if values.get(k)}
    values = {k: v for k, v in values.items() if v is not None}
    return RunConfig(
        subcommand=args.command, seed=args.seed, profile=args.profile,
        inputs=[str(i) for i in inputs], outputs=outputs,
        operator=values.pop("operator", None), params=values,
    )


def parse_args(argv=None) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        cfg = RunConfig.from_text(Path(args.config).read_text())
        if cfg.subcommand != args.command:
            raise UsageError(f"config is for '{cfg.subcommand}', not '{args.command}'")
        defaults = {**cfg.params, "seed": cfg.seed, "profile": cfg.profile}
        if cfg.operator is not None:
            defaults["operator"] = cfg.operator
        # command-line values win: re-parse with the config as the new defaults
        globals_ = {k: defaults.pop(k) for k in ("seed", "profile")}
        parser.set_defaults(**globals_)
        parser.commands[args.command].set_defaults(**defaults)
        args = parser.parse_args(argv)
    return args


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
    except SystemExit as exc:
        return EXIT_INVALID if exc.code else EXIT_OK
    except OSError as exc:
        print(f"tirtone: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, json.JSONDecodeError) as exc:
        print(f"tirtone: {exc}", file=sys.stderr)
        return EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except OSError as exc:
        print(f"tirtone: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, ArithmeticError, RuntimeError) as exc:
        print(f"tirtone: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
