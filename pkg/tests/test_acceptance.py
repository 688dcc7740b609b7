"""Acceptance gate: one test per criterion, each printing a single PASS/FAIL line."""

import csv
import itertools
import json
import math
import os
import time

import numpy as np
import pytest

from conftest import factor_table, random_blob_rgba
from si_forge import cli
from si_forge.compositor import (
    Placement,
    compose,
    fixres_crop_geometry,
    opaque,
    prepare_background,
    rotate_object,
    scale_to_area,
    transform_object,
)
from si_forge.meta import (
    MetricsTable,
    discriminability,
    discriminability_all,
    pearson,
    residual_pca,
    residualize,
    spearman,
)
from si_forge.metrics import (
    FactorProfile,
    FrameGroup,
    LocationGrid,
    PredictionSet,
    anchor_accuracy,
    delta_map,
    mean_corruption_error,
    normalize_best,
    normalize_p95,
    percentile,
    pm_k_accuracy,
)
from si_forge.sweep import SweepConfig, generate, location_grid, preset_config, refilter

ROTATIONS = [float(a) for a in range(1, 342, 20)]
JOBS = (1, 8)


@pytest.fixture
def verdict(capsys):
    def record(number, checks, note=""):
        failed = [name for name, ok in checks if not ok]
        line = f"ACCEPTANCE {number}: {'PASS' if not failed else 'FAIL'}"
        if note:
            line += f" [{note}]"
        if failed:
            line += " (" + "; ".join(failed) + ")"
        with capsys.disabled():
            print("\n" + line)
        assert not failed, line
    return record


# 1 -------------------------------------------------------------------------------

def test_criterion_1_compositor(verdict):
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    blobs = [random_blob_rgba(rng, n=int(rng.integers(48, 160))) for _ in range(20)]
    bg = rng.integers(0, 256, (300, 360, 3), dtype=np.uint8)
    prepared = prepare_background(bg, 224)
    worst_area = worst_drift = 0.0
    pure = True
    for i, blob in enumerate(blobs):
        for f in (0.01, 0.05, 0.20, 0.50, 1.00):
            planes = scale_to_area(blob, f, 224)
            worst_area = max(worst_area, abs(opaque(planes).sum() / (f * 224 * 224) - 1))
        planes = scale_to_area(blob, 0.20, 224)
        before = opaque(planes).sum()
        for rot in ROTATIONS:
            worst_drift = max(worst_drift, abs(opaque(rotate_object(planes, rot)).sum() / before - 1))
        loc = tuple(rng.uniform(0, 1, 2))
        r = compose(blob, bg, Placement(0.2, loc, ROTATIONS[i % 18]), 224)
        untouched = r.alpha == 0
        pure &= bool(np.array_equal(r.image[untouched], prepared[untouched]))
    elapsed = time.perf_counter() - start
    verdict(1, [
        (f"realized area error {worst_area:.4f} > 0.05", worst_area <= 0.05),
        (f"rotation drift {worst_drift:.4f} > 0.03", worst_drift <= 0.03),
        ("out-of-footprint pixels differ from background", pure),
        (f"runtime {elapsed:.1f}s >= 60s", elapsed < 60),
    ], f"max area error {worst_area:.4f}, max drift {worst_drift:.4f}, {elapsed:.1f}s")


# 2 -------------------------------------------------------------------------------

def brute_inside(mask, offset, canvas):
    ox, oy = offset
    inside = total = 0
    for y, x in zip(*np.nonzero(mask)):
        total += 1
        inside += 0 <= x + ox < canvas and 0 <= y + oy < canvas
    return inside, total


def test_criterion_2_filter_soundness(verdict, toy_manifest, tmp_path):
    cfg = SweepConfig("toy", (0.2, 0.6), location_grid(10), (0.0, 121.0), canvas_px=64)
    full = generate(toy_manifest, cfg, tmp_path / "full")
    fgs = {f.asset_id: f for f in toy_manifest.foregrounds}
    exact = True
    for s in full.samples:
        planes, offset, _ = transform_object(fgs[s.foreground_id], Placement(s.size_fraction, (s.fx, s.fy),
                                                                              s.rotation_deg), 64)
        inside, total = brute_inside(opaque(planes), offset, 64)
        exact &= (s.opaque_inside, s.opaque_total) == (inside, total) and s.in_image_fraction == inside / total
    partitions = True
    for t in (0.95, 0.50, 0.75):
        kept = {s.image_id for s in full.samples if s.in_image_fraction >= t}
        dropped = {s.image_id for s in full.samples} - kept
        gen = generate(toy_manifest, SweepConfig(**{**cfg.__dict__, "in_image_threshold": t}), tmp_path / f"t{t}")
        ref = refilter(full, t)
        partitions &= {s.image_id for s in gen.samples} == kept == {s.image_id for s in ref.samples}
        partitions &= gen.counts["filtered_out"] == len(dropped) and 0 < len(kept) < len(full.samples)
    verdict(2, [
        ("stored in_image_fraction differs from brute-force count", exact),
        ("threshold filters do not partition the samples", partitions),
    ])


# 3 -------------------------------------------------------------------------------

def test_criterion_3_cross_product_counts(verdict, toy_manifest, tmp_path):
    pairs = len(toy_manifest.foregrounds) * 2
    generated = {}
    for kind in ("rotation", "location", "size"):
        cfg = SweepConfig(**{**preset_config(kind, canvas_px=64).__dict__, "in_image_threshold": None})
        ds = generate(toy_manifest, cfg, tmp_path / kind)
        generated[kind] = ds.counts["generated"]
    verdict(3, [
        ("rotation preset is not 72 combinations", preset_config("rotation").combinations == 72),
        ("location preset is not 441 combinations", preset_config("location").combinations == 441),
        ("size preset is not 100 combinations", preset_config("size").combinations == 100),
        ("rendered rotation count", generated["rotation"] == 72 * pairs),
        ("rendered location count", generated["location"] == 441 * pairs),
        ("rendered size count", generated["size"] == 100 * pairs),
    ])


# 4 -------------------------------------------------------------------------------

def make_group(gid, n_before, n_after):
    return FrameGroup(gid, f"{gid}_a", tuple(f"{gid}_b{i}" for i in range(n_before)),
                      tuple(f"{gid}_n{i}" for i in range(n_after)), frozenset({1}))


def brute_pm_k(correct, groups, k):
    hits = 0
    for g in groups:
        timeline = list(g.neighbors_before) + [g.anchor_id] + list(g.neighbors_after)
        pos = len(g.neighbors_before)
        hits += all(correct[f] for i, f in enumerate(timeline) if abs(i - pos) <= k)
    return hits / len(groups)


def preds_for(correct):
    return PredictionSet("m", {f: (1 if ok else 0,) for f, ok in correct.items()})


def test_criterion_4_pm_k(verdict):
    toy = [make_group("g0", 2, 2), make_group("g1", 1, 3), make_group("g2", 0, 1)]
    frames = [f for g in toy for f in (g.anchor_id,) + g.neighbor_ids]
    pm0 = oracle = True
    for bits in itertools.product([True, False], repeat=len(frames)):
        correct = dict(zip(frames, bits))
        preds = preds_for(correct)
        pm0 &= pm_k_accuracy(preds, toy, 0) == anchor_accuracy(preds, toy)
        oracle &= all(pm_k_accuracy(preds, toy, k) == brute_pm_k(correct, toy, k) for k in range(1, 5))
    monotone = True
    rng = np.random.default_rng(4)
    for trial in range(100):
        groups = [make_group(f"t{trial}_{i}", int(rng.integers(0, 11)), int(rng.integers(0, 11)))
                  for i in range(8)]
        fs = [f for g in groups for f in (g.anchor_id,) + g.neighbor_ids]
        correct = dict(zip(fs, rng.random(len(fs)) < 0.9))
        values = [pm_k_accuracy(preds_for(correct), groups, k) for k in range(11)]
        monotone &= all(a >= b for a, b in zip(values, values[1:]))
        oracle &= values == [brute_pm_k(correct, groups, k) for k in range(11)]
    verdict(4, [
        ("pm_0 differs from anchor accuracy", pm0),
        ("pm_k increased with k", monotone),
        ("brute-force oracle disagreement", oracle),
    ])


# 5 -------------------------------------------------------------------------------

def test_criterion_5_mce(verdict):
    rng = np.random.default_rng(5)
    base = {(c, s): float(rng.uniform(0.05, 0.95)) for c in range(15) for s in range(1, 6)}
    hand_base = {("blur", 1): 0.4, ("blur", 2): 0.4, ("noise", 1): 0.6, ("noise", 2): 0.2}
    hand_model = {("blur", 1): 0.2, ("blur", 2): 0.4, ("noise", 1): 0.1, ("noise", 2): 0.1}
    verdict(5, [
        ("identity table", abs(mean_corruption_error(base, base) - 100.0) <= 1e-9),
        ("zero-error table", mean_corruption_error({k: 0.0 for k in base}, base) == 0.0),
        # blur 0.6/0.8 and noise 0.2/0.8 average to 0.5.
        ("two-corruption hand case", mean_corruption_error(hand_model, hand_base) == 50.0),
    ])


# 6 -------------------------------------------------------------------------------

def test_criterion_6_normalizations(verdict):
    rng = np.random.default_rng(6)
    const = LocationGrid(np.full((21, 21), 0.42), np.ones((21, 21), int))
    prof = FactorProfile("size_fraction", tuple(i / 100 for i in range(1, 101)), np.full(100, 0.3),
                         np.ones(100, int))
    values = rng.uniform(0.1, 0.5, (21, 21))
    accs = rng.uniform(0.1, 0.5, 100)
    invariant = True
    for c in (0.5, 2.0):
        a = normalize_p95(LocationGrid(values, const.support)).grid
        b = normalize_p95(LocationGrid(values * c, const.support)).grid
        pa = normalize_best(FactorProfile("x", prof.bins, accs, prof.support)).accuracy
        pb = normalize_best(FactorProfile("x", prof.bins, accs * c, prof.support)).accuracy
        invariant &= np.allclose(a, b, rtol=0, atol=1e-12) and np.allclose(pa, pb, rtol=0, atol=1e-12)
    grid = LocationGrid(values, const.support)
    pct_ok = True
    for _ in range(200):
        xs = rng.normal(size=int(rng.integers(1, 500)))
        q = float(rng.uniform())
        pct_ok &= abs(percentile(xs, q) - float(np.percentile(xs, 100 * q))) <= 1e-12
    verdict(6, [
        ("constant grid not all ones", np.allclose(normalize_p95(const).grid, 1.0, rtol=0, atol=1e-12)),
        ("constant profile not all ones", np.allclose(normalize_best(prof).accuracy, 1.0, rtol=0, atol=1e-12)),
        ("normalization not scale invariant", invariant),
        ("delta_map(x, x) not zero", bool(np.all(delta_map(grid, grid).grid == 0))),
        ("percentile differs from oracle", pct_ok),
    ])


# 7 -------------------------------------------------------------------------------

def test_criterion_7_meta_analysis(verdict):
    from scipy import stats

    rng = np.random.default_rng(7)
    corr_ok = True
    for _ in range(50):
        n = int(rng.integers(8, 60))
        x = np.round(rng.normal(size=n), 1)
        y = np.round(0.3 * x + rng.normal(size=n), 1)
        corr_ok &= abs(pearson(x, y) - stats.pearsonr(x, y)[0]) <= 1e-12
        corr_ok &= abs(spearman(x, y) - stats.spearmanr(x, y)[0]) <= 1e-12

    table = factor_table(0)
    ortho = max(max(abs(r @ table.reference), abs(r.sum()))
                for r in (residualize(table, m) for m in table.other_metrics))

    start = time.perf_counter()
    pca = residual_pca(table, permutations=1000, bootstrap_n=1000, seed=0)
    entries = discriminability_all(table, bootstrap_n=1000, seed=0, jobs=os.cpu_count() or 1)
    elapsed = time.perf_counter() - start

    dup = MetricsTable(table.model_ids, table.group_labels, table.metric_names + ["copy"],
                       np.column_stack([table.values, table.reference]), "ref")
    dup_delta = discriminability(dup, ["copy"], bootstrap_n=200, seed=0).mean
    same = MetricsTable(table.model_ids, table.group_labels, ["ref", "x"],
                        np.tile([0.7, 0.4], (table.n_models, 1)), "ref")
    same_sd = discriminability(same, ["x"], bootstrap_n=100, seed=0).sd

    fr, band = pca.variance_fractions, pca.null_bands
    verdict(7, [
        (f"residual orthogonality {ortho:.2e} > 1e-9", ortho <= 1e-9),
        ("correlation oracle disagreement", corr_ok),
        (f"PC1 {fr[0]:.3f} not above null band {band[0, 1]:.3f}", fr[0] > band[0, 1]),
        (f"PC2 {fr[1]:.3f} outside null band {band[1].round(3).tolist()}", band[1, 0] <= fr[1] <= band[1, 1]),
        (f"duplicate-feature delta {dup_delta:.3f}", abs(dup_delta) <= 0.02),
        (f"identical-row sd {same_sd}", same_sd == 0.0),
        (f"runtime {elapsed:.0f}s >= 300s", elapsed < 300 and len(entries) == 22),
    ], f"PC1 {fr[0]:.3f}, PC2 {fr[1]:.3f}, dup delta {dup_delta:+.3f}, {elapsed:.1f}s")


# 8 -------------------------------------------------------------------------------

def test_criterion_8_fixres(verdict):
    rng = np.random.default_rng(8)
    interior = floor_rule = True
    for r in (64, 128, 224, 288, 320, 384, 448, 512, 640, 768):
        for _ in range(200):
            w, h = (int(v) for v in rng.integers(1, 4000, 2))
            rw, rh, cx, cy = fixres_crop_geometry(w, h, r)
            floor_rule &= min(rw, rh) == math.floor(1.15 * r + 1e-9)
            interior &= 0 <= cx and cx + r <= rw and 0 <= cy and cy + r <= rh
    verdict(8, [
        ("(480, 480, 224) geometry", fixres_crop_geometry(480, 480, 224) == (257, 257, 16, 16)),
        ("short side is not floor(1.15 r)", floor_rule),
        ("crop leaves the resized image", interior),
    ])


# 9 -------------------------------------------------------------------------------

def test_criterion_9_determinism(verdict, toy_dirs, tmp_path):
    assets = tmp_path / "cat"
    assert cli.run(["ingest", "--foregrounds", str(toy_dirs["fg"]), "--backgrounds", str(toy_dirs["bg"]),
                    "--class-map", str(toy_dirs["class_map"]), "--min-side", "64", "--out", str(assets)]) == 0
    t = factor_table(9, n_metrics=8)
    table_csv = tmp_path / "table.csv"
    with open(table_csv, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["model_id", "group_label", *t.metric_names])
        for mid, g, row in zip(t.model_ids, t.group_labels, t.values):
            w.writerow([mid, g, *(repr(float(v)) for v in row)])

    outputs = {}
    for run, jobs in itertools.product(("a", "b"), JOBS):
        gen = tmp_path / f"gen_{run}_{jobs}"
        ana = tmp_path / f"ana_{run}_{jobs}"
        assert cli.run(["generate", "--assets", str(assets / "assets.jsonl"), "--preset", "rotation",
                        "--canvas", "64", "--seed", "5", "--jobs", str(jobs), "--out", str(gen)]) == 0
        assert cli.run(["analyze", "--table", str(table_csv), "--bootstrap", "30", "--permutations", "100",
                        "--seed", "5", "--jobs", str(jobs), "--out", str(ana)]) == 0
        outputs[run, jobs] = ((gen / "manifest.jsonl").read_bytes(), (gen / "config.json").read_bytes(),
                              (ana / "analysis.json").read_bytes())
    first = outputs["a", 1]
    samples = [json.loads(line) for line in first[0].decode().splitlines()]
    verdict(9, [
        ("generate manifests differ", all(o[0] == first[0] and o[1] == first[1] for o in outputs.values())),
        ("analyze JSON differs", all(o[2] == first[2] for o in outputs.values())),
        ("nothing generated", len(samples) > 0),
    ])
