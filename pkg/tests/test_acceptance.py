"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v`` (the lines are repeated
in the terminal summary) or ``python tests/test_acceptance.py``.
"""

import sys
import time

import numpy as np
import pytest

from acceptance_log import record
from gradcheck import TOL, numeric_grad, rel_error
from test_baselines import brute_clip, brute_he
from test_compression import objective, perturbed, random_embeddings
from test_diffmath import conv
from tirtone import diffmath as dm
from tirtone.baselines import tonemap_clip, tonemap_fieldscale_lite, tonemap_he, tonemap_minmax
from tirtone.cli import bench, compare_metrics, main
from tirtone.compression import CompressionNet, compress_backward, compress_forward, inspect_weights
from tirtone.diffmath import DenseLayer, Param
from tirtone.embedding import PeriodSet, embed_array
from tirtone.radiometry import CameraProfile, RadiometricFrame, celsius_from_counts, counts_to_celsius
from tirtone.training import (
    DEFAULT_PROFILE,
    TrainConfig,
    artifact_rejection_probe,
    generate_dataset,
    generate_scene,
    loss_edge_fidelity,
    loss_object_contrast,
    tonemap_scenes,
    train,
)

REFERENCE_OBJDET = np.array([
    [0.265, 0.386, 0.349],
    [0.194, 0.236, 0.570],
    [0.137, 0.332, 0.531],
])
REFERENCE_AVERAGE = [0.199, 0.318, 0.483]

DESK_SCENES, DESK_SIZE, DESK_EPOCHS, DESK_SEED = 200, 64, 30, 0
ARTIFACT_PERIODS = (2.0, 13.5, 45.0)
ARTIFACT_SEEDS = (0, 1, 2)


def check(label, ok, detail):
    record(label, ok, detail)
    assert ok, f"{label}: {detail}"


# 1 ------------------------------------------------------------------------------

def test_01_embedding_pointwise():
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    temps = rng.uniform(-50.0, 150.0, size=1000)
    periods = rng.uniform(0.5, 60.0, size=1000)
    got = np.array([embed_array(np.array([[t]]), (d,))[0, 0, 0] for t, d in zip(temps, periods)], dtype=np.float64)
    want = 127.5 * np.sin(np.pi * temps / periods) + 127.5
    err = np.abs(got - want).max()

    anchor_err = 0.0
    for d in (4.5, 7.3, 13.5, 45.0):
        out = embed_array(np.array([[0.0, d / 2, d, 3 * d / 2]]), (d,))[0, 0]
        anchor_err = max(anchor_err, np.abs(out.astype(np.float64) - [127.5, 255.0, 127.5, 0.0]).max())
    elapsed = time.perf_counter() - t0
    check("1 embedding pointwise", err < 1e-5 and anchor_err < 1e-6 and elapsed < 1.0,
          f"max err {err:.2e} (<1e-5), anchor err {anchor_err:.2e} (<1e-6), {elapsed:.3f}s (<1s)")


# 2 ------------------------------------------------------------------------------

def random_profile(rng):
    offset = rng.uniform(0.0, 1000.0)
    return CameraProfile("rand", planck_p=rng.uniform(1200, 1800), planck_r=rng.uniform(2e5, 6e5),
                         offset_o=offset, calib_f=rng.uniform(0.5, 1.5),
                         count_min=int(offset) + 1, count_max=16383)


def test_02_conversion_round_trip():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    worst = worst_f32 = 0.0
    for _ in range(100):
        prof = random_profile(rng)
        counts = rng.integers(prof.count_min, prof.count_max + 1, size=100)
        celsius = celsius_from_counts(counts, prof)
        again = celsius_from_counts(prof.celsius_to_counts(celsius), prof)
        worst = max(worst, np.abs(again - celsius).max())
        # the stored map is float32; report its rounding separately
        stored = counts_to_celsius(RadiometricFrame(counts.reshape(10, 10)), prof).celsius.ravel()
        worst_f32 = max(worst_f32, (np.abs(stored - celsius) / np.maximum(np.abs(celsius), 1.0)).max())
    elapsed = time.perf_counter() - t0
    check("2 conversion round trip", worst < 1e-6 and elapsed < 1.0,
          f"10000 pairs, max |dT| {worst:.2e} degC (<1e-6), float32 map rel err {worst_f32:.1e}, {elapsed:.3f}s (<1s)")


# 3 ------------------------------------------------------------------------------

def _layer_errors(seed):
    rng = np.random.default_rng(seed)
    errs = {}

    x = rng.normal(size=(2, 3, 8, 8))
    layer = conv(rng, 3, 4, 3, 2)
    r = rng.normal(size=dm.conv2d_forward(x, layer)[0].shape)
    f = lambda: float((dm.conv2d_forward(x, layer)[0] * r).sum())  # noqa: E731
    dx, dw, db = dm.conv2d_backward(r, dm.conv2d_forward(x, layer)[1])
    errs["conv"] = max(rel_error(dx, numeric_grad(f, x)), rel_error(dw, numeric_grad(f, layer.weight.value)),
                       rel_error(db, numeric_grad(f, layer.bias.value)))

    x = rng.normal(size=(2, 3, 8, 8))
    x += np.sign(x) * 0.01
    r = rng.normal(size=x.shape)
    errs["relu"] = rel_error(dm.relu_backward(r, dm.relu(x)[1]),
                             numeric_grad(lambda: float((dm.relu(x)[0] * r).sum()), x))

    x = rng.normal(size=(2, 3, 4, 4))
    g, b = rng.normal(size=3), rng.normal(size=3)
    r = rng.normal(size=x.shape)
    f = lambda: float((dm.layer_norm(x, g, b)[0] * r).sum())  # noqa: E731
    dx, dg, dbias = dm.layer_norm_backward(r, dm.layer_norm(x, g, b)[1])
    errs["layer_norm"] = max(rel_error(dx, numeric_grad(f, x)), rel_error(dg, numeric_grad(f, g)),
                             rel_error(dbias, numeric_grad(f, b)))

    x = rng.normal(size=(2, 3, 4, 4))
    r = rng.normal(size=(2, 3))
    errs["gap"] = rel_error(dm.gap_backward(r, dm.global_avg_pool(x)[1]),
                            numeric_grad(lambda: float((dm.global_avg_pool(x)[0] * r).sum()), x))

    dense = DenseLayer(Param(rng.normal(size=(5, 9))), Param(rng.normal(size=5)))
    x = rng.normal(size=(2, 9))
    r = rng.normal(size=(2, 5))
    f = lambda: float((dm.dense_forward(x, dense)[0] * r).sum())  # noqa: E731
    dx, dw, db = dm.dense_backward(r, dm.dense_forward(x, dense)[1])
    errs["dense"] = max(rel_error(dx, numeric_grad(f, x)), rel_error(dw, numeric_grad(f, dense.weight.value)),
                        rel_error(db, numeric_grad(f, dense.bias.value)))

    x = rng.normal(size=(2, 3, 3))
    r = rng.normal(size=x.shape)
    errs["softmax"] = rel_error(dm.softmax_backward(r, dm.softmax(x, 2)[1]),
                                numeric_grad(lambda: float((dm.softmax(x, 2)[0] * r).sum()), x))

    sc = generate_scene(seed, width=16, height=16, n_objects=2)
    img = rng.uniform(0, 255, size=(3, 16, 16))
    for name, fn in (("object_contrast", loss_object_contrast), ("edge_fidelity", loss_edge_fidelity)):
        errs[name] = rel_error(fn(img, sc)[1], numeric_grad(lambda: fn(img, sc)[0], img))
    return errs


def _network_error(seed):
    rng = np.random.default_rng(100 + seed)
    emb = random_embeddings(rng, b=2, n=3, h=8, w=8)
    net = perturbed(CompressionNet.init(3, seed=seed, dtype=np.float64), rng)
    r = rng.normal(size=(2, 3, 8, 8))
    f, pattern = objective(emb, net, r)
    grads, d_emb = compress_backward(compress_forward(emb, net)[2], r)
    errs = [rel_error(grads[k], numeric_grad(f, p.value, pattern=pattern)) for k, p in net.named_params().items()]
    errs.append(rel_error(d_emb, numeric_grad(f, emb, pattern=pattern)))
    return max(errs)


def test_03_gradient_integrity():
    t0 = time.perf_counter()
    seeds = range(5)
    worst = {}
    for seed in seeds:
        for k, v in _layer_errors(seed).items():
            worst[k] = max(worst.get(k, 0.0), v)
        worst["network"] = max(worst.get("network", 0.0), _network_error(seed))
    elapsed = time.perf_counter() - t0
    ok = max(worst.values()) < TOL and elapsed < 60.0
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    check("3 gradient integrity", ok, f"{len(seeds)} seeds, max rel err: {detail} (<1e-4), {elapsed:.1f}s (<60s)")


# 4 ------------------------------------------------------------------------------

def test_04_row_stochastic_weights():
    rng = np.random.default_rng(4)
    worst_sum, min_entry = 0.0, 1.0
    for i in range(100):
        n = int(rng.integers(1, 7))
        dtype = np.float32 if i % 2 else np.float64
        net = perturbed(CompressionNet.init(n, seed=i, dtype=dtype), rng, scale=0.3)
        emb = rng.uniform(0, 255, size=(2, n, 12, 12)).astype(dtype)
        _, omega, _ = compress_forward(emb, net)
        worst_sum = max(worst_sum, float(np.abs(omega.astype(np.float64).sum(axis=2) - 1).max()))
        min_entry = min(min_entry, float(omega.min()))
    avg = np.round(inspect_weights(REFERENCE_OBJDET, PeriodSet((4.5, 13.5, 45.0))).average, 3).tolist()
    check("4 row-stochastic weights", worst_sum < 1e-6 and min_entry > 0 and avg == REFERENCE_AVERAGE,
          f"100 passes, max |row sum - 1| {worst_sum:.1e} (<1e-6), min entry {min_entry:.2e} (>0), "
          f"table average {avg}")


# 5 ------------------------------------------------------------------------------

def test_05_convexity():
    rng = np.random.default_rng(5)
    worst = -np.inf
    for i in range(100):
        n = int(rng.integers(1, 6))
        net = perturbed(CompressionNet.init(n, seed=i, dtype=np.float64), rng, scale=0.3)
        emb = rng.uniform(0, 255, size=(1, n, 10, 14))
        out, _, _ = compress_forward(emb, net)
        lo, hi = emb.min(axis=1, keepdims=True), emb.max(axis=1, keepdims=True)
        worst = max(worst, float((out - hi).max()), float((lo - out).max()))
    check("5 convexity bound", worst <= 1e-9,
          f"100 cases, max excursion outside the per-pixel envelope {worst:.1e} (rounding only)")


# 6 ------------------------------------------------------------------------------

def test_06_baseline_oracles():
    rng = np.random.default_rng(6)
    same_clip = same_fs = he_ok = clip_ok = 0
    for _ in range(50):
        lo = int(rng.integers(0, 8000))
        counts = rng.integers(lo, lo + int(rng.integers(1, 8000)), size=(32, 32))
        fr = RadiometricFrame(counts)
        ref = tonemap_minmax(fr).tobytes()
        same_clip += tonemap_clip(fr, 0.0, 1.0).tobytes() == ref
        same_fs += tonemap_fieldscale_lite(fr, (1, 1)).tobytes() == ref
        he_ok += tonemap_he(fr, 30).ravel().tolist() == brute_he(counts, 30)
        clip_ok += tonemap_clip(fr, 0.01, 0.99).ravel().tolist() == brute_clip(counts, 0.01, 0.99)
    check("6 baseline oracles", same_clip == same_fs == he_ok == clip_ok == 50,
          f"clip(0,1)==minmax {same_clip}/50, fieldscale(1,1)==minmax {same_fs}/50, "
          f"HE==oracle {he_ok}/50, clip==oracle {clip_ok}/50")


# 7 ------------------------------------------------------------------------------

# periods spread over the whole range so the weight matrices are comparable per embedding
TASK_PERIODS = (4.5, 13.5, 45.0)


@pytest.fixture(scope="module")
def task_nets():
    scenes = generate_dataset(DESK_SCENES, DESK_SEED, width=DESK_SIZE, height=DESK_SIZE)
    init = CompressionNet.init(3, seed=DESK_SEED)
    t0 = time.perf_counter()
    results = {}
    for loss in ("object_contrast", "edge_fidelity"):
        cfg = TrainConfig(n_channels=3, epochs=DESK_EPOCHS, seed=DESK_SEED, loss=loss, fixed_periods=TASK_PERIODS)
        results[loss] = train(cfg, scenes, net=init)
    return results, time.perf_counter() - t0


def test_07_task_adaptivity(task_nets):
    results, elapsed = task_nets
    obj, edge = results["object_contrast"], results["edge_fidelity"]
    assert obj.periods == edge.periods
    held_out = generate_dataset(20, DESK_SEED + 1000, width=DESK_SIZE, height=DESK_SIZE)
    m = compare_metrics(obj.net, obj.periods, edge.net, edge.periods, held_out, profile=DEFAULT_PROFILE)
    _, omega_obj = tonemap_scenes(obj.net, held_out[:1], obj.periods)
    _, omega_edge = tonemap_scenes(edge.net, held_out[:1], edge.periods)
    omega_diff = float(np.abs(omega_obj - omega_edge).max())

    parts = []
    ok = True
    for name, res in (("object_contrast", obj), ("edge_fidelity", edge)):
        first, last = res.epoch_losses[0], res.epoch_losses[-1]
        # the surrogate losses are negative, so "< 0.5 x initial" alone only needs the loss to stay
        # below half of a negative number; require a strict decrease as well
        good = last < 0.5 * first and last < first
        ok &= good
        parts.append(f"{name} {first:.4g} -> {last:.4g}")
    ok &= omega_diff > 0.05 and m["kl_a_b"] > 0.1 and elapsed < 600
    check("7 task adaptivity", ok,
          f"(a) {'; '.join(parts)}; (b) held-out omega max-abs diff {omega_diff:.3f} (>0.05); "
          f"(c) KL(object||edge) {m['kl_a_b']:.3f} nats (>0.1); training {elapsed:.0f}s (<600s)")

    # expected direction only; reported, never fails the suite
    higher = m["entropy_b"] >= m["entropy_a"]
    record("7 entropy probe (report only)", True,
           f"edge-trained mean entropy {m['entropy_b']:.3f} bits vs object-trained {m['entropy_a']:.3f} bits; "
           f"{'expected direction' if higher else 'opposite of the expected direction'}")


# 8 ------------------------------------------------------------------------------

def test_08_artifact_rejection():
    scenes = generate_dataset(DESK_SCENES, 8, width=DESK_SIZE, height=DESK_SIZE)
    held_out = generate_dataset(20, 8000, width=DESK_SIZE, height=DESK_SIZE)
    spans = [float(np.ptp(s.temp.celsius)) for s in scenes]
    periods = PeriodSet(ARTIFACT_PERIODS)
    passes, lines = 0, []
    for seed in ARTIFACT_SEEDS:
        cfg = TrainConfig(epochs=DESK_EPOCHS, seed=seed, fixed_periods=ARTIFACT_PERIODS)
        untrained = artifact_rejection_probe(CompressionNet.init(3, seed=seed), periods, held_out)
        report = artifact_rejection_probe(train(cfg, scenes).net, periods, held_out)
        won = report.argmin_period() == 2.0
        passes += won
        lines.append(f"seed {seed}: avg {np.round(report.average, 3).tolist()} "
                     f"(untrained {np.round(untrained.average, 3).tolist()}) {'ok' if won else 'miss'}")
    check("8 artifact rejection", passes >= 2 and min(spans) > 4.0,
          f"periods {ARTIFACT_PERIODS}, min scene span {min(spans):.1f} degC; " + "; ".join(lines)
          + f"; {passes}/3 seeds (>=2)")


# 9 ------------------------------------------------------------------------------

def test_09_embedding_throughput():
    te3 = bench(3, 640, 512, iters=50)["embed_ms_median"]
    te10 = bench(10, 640, 512, iters=50)["embed_ms_median"]
    ratio = te10 / te3
    check("9 embedding throughput", te3 < 20.0 and te10 < 100.0,
          f"TE(3) {te3:.2f} ms (<20), TE(10) {te10:.2f} ms (<100), ratio {ratio:.2f}")
    check("9 runtime ratio", 2.0 <= ratio <= 4.5, f"TE(10)/TE(3) = {ratio:.2f} (in [2.0, 4.5])")


# 10 -----------------------------------------------------------------------------

def test_10_determinism(tmp_path):
    ds = tmp_path / "ds"
    assert main(["generate", "-o", str(ds), "--scenes", "6", "--size", "32", "32", "--seed", "10"]) == 0
    ckpts, logs = [], []
    for run in ("a", "b"):
        out = tmp_path / run / "net.tcnw"
        assert main(["train", "--dataset", str(ds), "--epochs", "3", "--batch-size", "4", "--seed", "10",
                     "-o", str(out)]) == 0
        ckpts.append(out.read_bytes())
        logs.append(out.with_suffix(".log.jsonl").read_bytes())
    frame = str(ds / "scene_00000.tirf")
    images = {}
    for op in ("raw", "minmax", "clip", "he", "fieldscale", "tcnet"):
        outs = []
        for run in ("a", "b"):
            png = tmp_path / run / f"{op}.png"
            extra = ["--checkpoint", str(tmp_path / "a" / "net.tcnw"), "--profile", str(ds / "profile.txt")] \
                if op == "tcnet" else []
            assert main(["tonemap", frame, "-m", op, "-o", str(png)] + extra) == 0
            blob = png.read_bytes()
            if op == "tcnet":
                blob += png.with_suffix(".omega.csv").read_bytes()
            outs.append(blob)
        images[op] = outs[0] == outs[1]
    ok = ckpts[0] == ckpts[1] and logs[0] == logs[1] and all(images.values())
    check("10 determinism", ok,
          f"train checkpoint identical {ckpts[0] == ckpts[1]}, log identical {logs[0] == logs[1]}, "
          f"tonemap identical {sum(images.values())}/{len(images)} operators")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v", "-s"]))
