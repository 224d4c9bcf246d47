"""Acceptance suite: one PASS/FAIL line per criterion, each at its stated tolerance.

The end-to-end benchmark (criteria 5 and 6) trains three seeds on 64 scenes
and takes several minutes; it is shared through a session fixture.
"""

import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from siamdamage.analysis import AdaptationCurve, FoldSpec, asymmetric_sweep, event_cross_validation, symmetric_sweep, xbd_folds
from siamdamage.benchmark import BenchmarkConfig, run_benchmark
from siamdamage.losses import dice_coefficient, focal_loss
from siamdamage.metrics import challenge_score, f1_from_pr, macro_f1
from siamdamage.network import NetworkConfig, init_params, transfer_localization_weights, zero_params
from siamdamage.raster_ops import ResolutionSchedule, degrade_restore
from siamdamage.scene_data import BuildingAnnotation, MaskStack, RasterImage, ScenePair, generate_synthetic_scene, synthetic_dataset, truth_grades
from siamdamage.training import TrainConfig, batch_loss_and_grads, build_sampler


# ---------------------------------------------------------------------------
# 1. metric identities


def test_criterion_1_metric_identities(verdict):
    start = time.perf_counter()
    checks = [
        (macro_f1([0.9234, 0.6444, 0.7859, 0.8640]), 0.7897, 5e-4),
        (macro_f1([0.9212, 0.5924, 0.7651, 0.8657]), 0.7640, 5e-4),
        (macro_f1([0.9264, 0.6733, 0.5970, 0.8600]), 0.7404, 5e-4),
        (challenge_score(0.8624, 0.7897), 0.8119, 1e-3),
        (challenge_score(0.8587, 0.7640), 0.7924, 1e-3),
        (challenge_score(0.8595, 0.7551), 0.7865, 1e-3),
        (f1_from_pr(0.7983, 0.9377), 0.8624, 5e-4),
    ]
    curve = AdaptationCurve.from_f1(
        [0.0, 0.5],
        [
            {"F1_loc": 0.5462, "F1_C1": 0.7321, "F1_C2/3": 0.0142, "F1_C4": 0.0308, "F1_Cb": 0.2521},
            {"F1_loc": 0.5378, "F1_C1": 0.7348, "F1_C2/3": 0.2122, "F1_C4": 0.0036, "F1_Cb": 0.2659},
        ],
    )
    checks += [(curve.gain(0.5, "F1_C2/3"), 0.1980, 1e-12), (curve.gain(0.5, "F1_Cb"), 0.0138, 1e-12)]
    errors = [abs(got - want) for got, want, _ in checks]
    elapsed = time.perf_counter() - start
    ok = all(e <= tol for e, (_, _, tol) in zip(errors, checks)) and elapsed < 1.0
    verdict("1", ok, f"{len(checks)} identities, max abs error {max(errors):.2e}, {elapsed * 1e3:.1f} ms")


# ---------------------------------------------------------------------------
# 2. gradient of the full Siamese network against central differences


def _window_with_grades(side=16):
    s = generate_synthetic_scene(0, 48, 6, size_range=(6, 10))
    grades = truth_grades(s)
    y, x = max(
        ((y, x) for y in range(0, 48 - side + 1, 4) for x in range(0, 48 - side + 1, 4)),
        key=lambda yx: len(np.unique(grades[yx[0] : yx[0] + side, yx[1] : yx[1] + side])),
    )
    win = (slice(y, y + side), slice(x, x + side))
    return s.pre.pixels[win], s.post.pixels[win], MaskStack.from_grades(grades[win])


def test_criterion_2_siamese_gradient(verdict):
    start = time.perf_counter()
    cfg = NetworkConfig(side=16, widths=(2, 4, 8), seed=3, dtype="float64")
    params = transfer_localization_weights(init_params(replace(cfg, head_channels=1)), seed=5)
    pre, post, target = _window_with_grades()
    args = ("siamese", [pre], [post], [target])
    _, grads = batch_loss_and_grads(params, *args)
    h, worst, n = 1e-5, 0.0, 0
    for name, g in grads.items():
        flat = params.arrays[name].ravel()
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up = batch_loss_and_grads(params, *args)[0]
            flat[i] = old - h
            down = batch_loss_and_grads(params, *args)[0]
            flat[i] = old
            fd, an = (up - down) / (2 * h), g.ravel()[i]
            worst = max(worst, abs(fd - an) / max(abs(fd) + abs(an), 1e-6))
            n += 1
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-4 and elapsed < 60
    verdict("2", ok, f"{n} parameters, max rel error {worst:.2e}, {elapsed:.1f} s")


# ---------------------------------------------------------------------------
# 3. focal and dice properties


def test_criterion_3_loss_properties(verdict):
    rng = np.random.default_rng(0)
    p = rng.uniform(0.01, 0.99, 1000)
    g = (rng.uniform(size=1000) < 0.5).astype(float)
    eps = 1e-6
    pc = np.clip(p, eps, 1 - eps)
    ce = -np.mean(g * np.log(pc) + (1 - g) * np.log(1 - pc))
    focal_err = abs(focal_loss(p, g, gamma=0.0) - ce)
    dice_half = dice_coefficient(np.full(100, 0.5), np.ones(100))
    perfect = min(dice_coefficient(m, m) for m in (g, np.ones(7), (rng.uniform(size=50) < 0.1).astype(float)))
    ok = focal_err <= 1e-12 and abs(dice_half - 0.8) <= 1e-6 and perfect >= 1 - 1e-5
    verdict("3", ok, f"|focal(gamma=0) - CE| = {focal_err:.1e}, dice(0.5, 1) = {dice_half:.7f}, perfect overlap {perfect:.7f}")


# ---------------------------------------------------------------------------
# 4. perturbation harness


def test_criterion_4_perturbation_harness(verdict):
    scenes = synthetic_dataset(3, seed=5, side=32, n_buildings=3, size_range=(6, 12), split="test")
    models = [init_params(NetworkConfig(side=32, widths=(4, 8), seed=s)) for s in (0, 1)]
    native = all(
        np.array_equal(degrade_restore(img, 0.5).pixels, img.pixels) for s in scenes for img in (s.pre, s.post)
    )
    schedule = ResolutionSchedule()
    sym = symmetric_sweep(models, scenes, schedule)
    grid = asymmetric_sweep(models, scenes, schedule)
    diag = all(a.metric_values() == b.metric_values() and np.array_equal(a.confusion.counts, b.confusion.counts) for a, b in zip(grid.diagonal(), sym.reports))
    n_cells = len(grid.cells)
    verdict("4", native and diag and n_cells == 49, f"native identity {native}, diagonal bit-equal {diag}, {n_cells} cells")


# ---------------------------------------------------------------------------
# 5 and 6. end-to-end synthetic benchmark


@pytest.fixture(scope="session")
def benchmark(tmp_path_factory):
    import os

    cfg = replace(BenchmarkConfig(), jobs=min(3, os.cpu_count() or 1))
    return run_benchmark(cfg, tmp_path_factory.mktemp("benchmark"))


@pytest.mark.slow
def test_criterion_5_end_to_end_benchmark(benchmark, verdict):
    ens = benchmark.ensemble.metric_values()
    singles = [r.metric_values()["F1_cls"] for r in benchmark.single.values()]
    minutes = benchmark.seconds / 60
    ok = ens["F1_loc"] >= 0.85 and ens["F1_cls"] >= 0.60 and ens["F1_cls"] >= max(singles) - 0.02 and minutes <= 15
    verdict(
        "5",
        ok,
        f"ensemble F1_loc {ens['F1_loc']:.4f}, F1_cls {ens['F1_cls']:.4f}, "
        f"single-seed F1_cls {', '.join(f'{v:.4f}' for v in singles)}, {minutes:.1f} min",
    )


@pytest.mark.slow
def test_criterion_6_resolution_collapse(benchmark, verdict):
    loc = benchmark.symmetric.series("F1_loc")
    cls = benchmark.symmetric.series("F1_cls")
    gap = loc[-1] - cls[-1]
    drop = cls[0] - cls[-1]
    strictly = all(a > b for a, b in zip(cls, cls[1:]))
    ok = gap >= 0.2 and drop >= 0.3 and strictly
    verdict(
        "6",
        ok,
        f"F1_loc(10 m) - F1_cls(10 m) = {gap:.4f}, F1_cls drop {drop:.4f}, "
        f"strictly decreasing {strictly} ({' > '.join(f'{v:.3f}' for v in cls)})",
    )


@pytest.mark.slow
def test_benchmark_training_beats_untrained_and_ensemble_beats_worst(benchmark, note):
    ens = benchmark.ensemble.metric_values()["F1_cls"]
    singles = [r.metric_values()["F1_cls"] for r in benchmark.single.values()]
    untrained = benchmark.untrained.metric_values()["F1_cls"]
    note(f"benchmark: untrained F1_cls {untrained:.4f}, worst seed {min(singles):.4f}, ensemble {ens:.4f}")
    assert min(singles) > untrained
    assert ens >= min(singles)


@pytest.mark.slow
def test_benchmark_flood_fine_tuning_does_not_hurt(benchmark, note):
    gain = benchmark.adaptation.gain(0.5, "F1_cls")
    note(f"benchmark: flood A_cls(0.5) {gain:+.4f}")
    assert gain >= 0


@pytest.mark.slow
@pytest.mark.xfail(
    strict=True,
    reason="co-registered synthetic pairs make pre/post comparison the main cue, so a 10 m pre image "
    "reads as change and binary damage F1 varies more along r_pre",
)
def test_benchmark_binary_damage_depends_mostly_on_post_resolution(benchmark, note):
    cb = benchmark.grid.values("F1_Cb")
    # rows index r_pre, columns r_post
    along_post = float(np.mean(np.ptp(cb, axis=1)))
    along_pre = float(np.mean(np.ptp(cb, axis=0)))
    note(f"benchmark: F1_Cb range along r_post {along_post:.4f} vs along r_pre {along_pre:.4f}")
    assert along_post > along_pre


# ---------------------------------------------------------------------------
# 7. cross-validation bookkeeping


def test_criterion_7_fold_bookkeeping(verdict):
    bundled = xbd_folds().folds == {
        "fold1": ("pinery-bushfire", "joplin-tornado", "sunda-tsunami"),
        "fold2": ("moore-tornado", "portugal-wildfire"),
        "fold3": ("lower-puna-volcano", "tuscaloosa-tornado", "woolsey-fire"),
    }
    scenes = synthetic_dataset(12, seed=2, side=32, n_buildings=2, n_events=6, size_range=(6, 10))
    events = sorted({s.event_id for s in scenes})
    folds = FoldSpec({f"f{k}": (events[k], events[k + 3]) for k in range(3)})
    net = NetworkConfig(side=32, widths=(4, 8))
    result = event_cross_validation(scenes, folds, TrainConfig(), net, trainer=lambda train: zero_params(net))
    leaks = [e["fold"] for e in result.log if set(e["train_events"]) & set(e["test_events"])]
    leaks += [e["fold"] for e in result.log if set(e["train_scenes"]) & set(e["test_scenes"])]
    verdict("7", bundled and not leaks and len(events) == 6, f"bundled folds match {bundled}, leaking folds {leaks}")


# ---------------------------------------------------------------------------
# 8. oversampler counts

_IMG = RasterImage(np.zeros((8, 8, 3)), 0.5)


def _scene(grades, sid):
    return ScenePair(_IMG, _IMG, [BuildingAnnotation(((0, 0), (2, 0), (2, 2)), g) for g in grades], scene_id=sid)


_failures_8: list = []


@given(st.lists(st.lists(st.integers(1, 4), max_size=5), min_size=1, max_size=15), st.integers(0, 1000))
@settings(max_examples=100, deadline=None)
def _grade_three_counts(grade_lists, seed):
    scenes = [_scene(g, str(i)) for i, g in enumerate(grade_lists)]
    counts = np.bincount(build_sampler(scenes, TrainConfig(seed=seed), epoch=seed), minlength=len(scenes))
    for g, c in zip(grade_lists, counts):
        if 3 in g and c != 4:
            _failures_8.append((g, int(c)))
    assert not _failures_8


def test_criterion_8_oversampler_counts(verdict):
    fixed = np.bincount(build_sampler([_scene([1], "a"), _scene([3], "b"), _scene([1, 3, 4], "c")], TrainConfig()), minlength=3)
    try:
        _grade_three_counts()
        prop = True
    except AssertionError:
        prop = False
    ok = fixed.tolist() == [1, 4, 4] and prop
    verdict("8", ok, f"fixed manifest counts {fixed.tolist()}, property over random manifests {prop}")


# ---------------------------------------------------------------------------
# 9. reproducibility


def _tree_bytes(root: Path) -> dict[str, bytes]:
    return {p.name: p.read_bytes() for p in sorted(root.iterdir()) if p.name != "timing.log"}


def test_criterion_9_byte_identical_reruns(tmp_path, verdict):
    cfg = BenchmarkConfig.quick()
    run_benchmark(cfg, tmp_path / "a")
    run_benchmark(cfg, tmp_path / "b")
    a, b = _tree_bytes(tmp_path / "a"), _tree_bytes(tmp_path / "b")
    kinds = sorted({n.rsplit(".", 1)[1] for n in a})
    differ = [n for n in a if a[n] != b.get(n)]
    ok = a.keys() == b.keys() and not differ and {"ckpt", "csv", "json"} <= set(kinds)
    verdict("9", ok, f"{len(a)} files ({', '.join(kinds)}), differing {differ}")
