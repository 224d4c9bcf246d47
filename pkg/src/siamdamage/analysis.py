"""Resolution sweeps, event cross-validation and fine-tuning adaptation."""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from importlib import resources
from typing import Sequence

import numpy as np

from .metrics import FINE, GradeScheme, MetricsReport, average_reports, evaluate, evaluate_maps
from .network import (
    DecisionRule,
    ModelParams,
    NetworkConfig,
    decide,
    fuse_features,
    mean_stacks,
    trunk_features,
)
from .raster_ops import ResolutionSchedule, degrade_restore
from .scene_data import ScenePair, truth_grades
from .training import TrainConfig, fine_tune_on, train_two_stage

# ---------------------------------------------------------------------------
# resolution sweeps


@dataclass
class SweepSeries:
    schedule: ResolutionSchedule
    reports: list[MetricsReport]

    def series(self, metric: str) -> list[float]:
        return [r.metric_values()[metric] for r in self.reports]

    def rows(self):
        for r, rep in zip(self.schedule, self.reports):
            for metric, value in rep.metric_values().items():
                yield r, r, metric, value

    def to_csv(self) -> str:
        return _rows_to_csv(self.rows())


@dataclass
class FrontierGrid:
    """Reports indexed by (pre index, post index) into the schedule."""

    schedule: ResolutionSchedule
    cells: dict[tuple[int, int], MetricsReport]

    def values(self, metric: str) -> np.ndarray:
        n = len(self.schedule)
        out = np.empty((n, n))
        for (i, j), rep in self.cells.items():
            out[i, j] = rep.metric_values()[metric]
        return out

    def diagonal(self) -> list[MetricsReport]:
        return [self.cells[(i, i)] for i in range(len(self.schedule))]

    def rows(self):
        g = self.schedule.gsds
        for (i, j) in sorted(self.cells):
            for metric, value in self.cells[(i, j)].metric_values().items():
                yield g[i], g[j], metric, value

    def to_csv(self) -> str:
        return _rows_to_csv(self.rows())


def _rows_to_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["r_pre", "r_post", "metric", "value"])
    for r_pre, r_post, metric, value in rows:
        w.writerow([r_pre, r_post, metric, repr(float(value))])
    return buf.getvalue()


def _check_native(scenes: Sequence[ScenePair], schedule: ResolutionSchedule) -> None:
    for s in scenes:
        if s.pre.gsd != schedule.native:
            raise ValueError(
                f"scene {s.scene_id} has native gsd {s.pre.gsd}, schedule starts at {schedule.native}"
            )


def _scene_features(models, scene, gsds):
    """Per model, trunk features of the pre and post image at every schedule gsd."""
    feats = []
    for m in models:
        pre = [trunk_features(m, degrade_restore(scene.pre, g)) for g in gsds]
        post = [trunk_features(m, degrade_restore(scene.post, g)) for g in gsds]
        feats.append((pre, post))
    return feats


def _grid_predictions(models, scenes, schedule, pairs, rule, jobs):
    """Grade maps per (i, j) pair and scene; trunk passes are shared across cells."""
    gsds = schedule.gsds

    def per_scene(scene):
        feats = _scene_features(models, scene, gsds)
        out = {}
        for i, j in pairs:
            stacks = [fuse_features(m, f[0][i], f[1][j]) for m, f in zip(models, feats)]
            out[(i, j)] = decide(mean_stacks(stacks), rule)
        return out

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as ex:
            per = list(ex.map(per_scene, scenes))
    else:
        per = [per_scene(s) for s in scenes]
    return per


def symmetric_sweep(
    models: Sequence[ModelParams],
    scenes: Sequence[ScenePair],
    schedule: ResolutionSchedule = ResolutionSchedule(),
    rule: DecisionRule = DecisionRule(),
    scheme: GradeScheme = FINE,
    jobs: int = 1,
) -> SweepSeries:
    """Degrade pre and post together to each schedule gsd and score."""
    _check_native(scenes, schedule)
    pairs = [(i, i) for i in range(len(schedule))]
    per = _grid_predictions(models, scenes, schedule, pairs, rule, jobs)
    truths = [truth_grades(s) for s in scenes]
    reports = [evaluate_maps([p[c] for p in per], truths, scheme) for c in pairs]
    return SweepSeries(schedule, reports)


def asymmetric_sweep(
    models: Sequence[ModelParams],
    scenes: Sequence[ScenePair],
    schedule: ResolutionSchedule = ResolutionSchedule(),
    rule: DecisionRule = DecisionRule(),
    scheme: GradeScheme = FINE,
    jobs: int = 1,
) -> FrontierGrid:
    """Score every (pre gsd, post gsd) combination, row-major over the grid."""
    _check_native(scenes, schedule)
    n = len(schedule)
    pairs = [(i, j) for i in range(n) for j in range(n)]
    per = _grid_predictions(models, scenes, schedule, pairs, rule, jobs)
    truths = [truth_grades(s) for s in scenes]
    cells = {c: evaluate_maps([p[c] for p in per], truths, scheme) for c in pairs}
    return FrontierGrid(schedule, cells)


# ---------------------------------------------------------------------------
# event cross-validation


@dataclass(frozen=True)
class FoldSpec:
    folds: dict[str, tuple[str, ...]]

    def __post_init__(self):
        seen: set[str] = set()
        for name, events in self.folds.items():
            overlap = seen & set(events)
            if overlap:
                raise ValueError(f"fold {name!r} repeats events {sorted(overlap)}")
            seen |= set(events)

    def validate(self, events: Sequence[str]) -> None:
        known = set(events)
        for name, evs in self.folds.items():
            missing = [e for e in evs if e not in known]
            if missing:
                raise ValueError(f"fold {name!r} lists unknown events {missing}")
            if set(evs) >= known:
                raise ValueError(f"fold {name!r} holds out every event; nothing left to train on")

    @classmethod
    def from_json(cls, text: str) -> "FoldSpec":
        doc = json.loads(text)
        return cls({k: tuple(v) for k, v in doc["folds"].items()})

    @classmethod
    def load(cls, path) -> "FoldSpec":
        with open(path) as fh:
            return cls.from_json(fh.read())

    def to_json(self) -> str:
        return json.dumps({"folds": {k: list(v) for k, v in self.folds.items()}}, indent=2) + "\n"


def xbd_folds() -> FoldSpec:
    """The three held-out event groups used for xBD cross-validation."""
    text = resources.files("siamdamage").joinpath("data/xbd_folds.json").read_text()
    return FoldSpec.from_json(text)


@dataclass
class CrossValidationResult:
    reports: dict[str, MetricsReport]
    average: dict[str, float]
    log: list[dict] = field(default_factory=list)

    def to_json(self) -> str:
        doc = [{"fold": k, **r.to_dict()} for k, r in self.reports.items()]
        doc.append({"fold": "average", **self.average})
        return json.dumps({"folds": doc, "log": self.log}, indent=2, sort_keys=True) + "\n"


def event_cross_validation(
    scenes: Sequence[ScenePair],
    folds: FoldSpec,
    cfg: TrainConfig,
    net_cfg: NetworkConfig,
    rule: DecisionRule = DecisionRule(),
    scheme: GradeScheme = FINE,
    trainer=None,
) -> CrossValidationResult:
    """Train on events outside each fold, test on the fold's events.

    ``trainer(train_scenes) -> ModelParams`` replaces the two-stage training
    when given (used for bookkeeping tests).
    """
    events = sorted({s.event_id for s in scenes})
    folds.validate(events)
    if trainer is None:

        def trainer(train_scenes):
            return train_two_stage(train_scenes, cfg, net_cfg).params

    reports, log = {}, []
    for name, held in folds.folds.items():
        held_set = set(held)
        train = [s for s in scenes if s.event_id not in held_set]
        test = [s for s in scenes if s.event_id in held_set]
        # training uses every scene of the remaining events regardless of split
        train = [s if s.split == "train" else _as_train(s) for s in train]
        model = trainer(train)
        reports[name] = evaluate(test, [model], rule, scheme)
        log.append(
            {
                "fold": name,
                "train_events": sorted({s.event_id for s in train}),
                "test_events": sorted({s.event_id for s in test}),
                "train_scenes": [s.scene_id for s in train],
                "test_scenes": [s.scene_id for s in test],
            }
        )
    return CrossValidationResult(reports, average_reports(list(reports.values())), log)


def _as_train(scene: ScenePair) -> ScenePair:
    return replace(scene, split="train")


# ---------------------------------------------------------------------------
# adaptation


@dataclass
class AdaptationCurve:
    shares: list[float]
    f1: list[dict[str, float]]
    gains: list[dict[str, float]]
    test_ids: list[str] = field(default_factory=list)
    subset_ids: list[list[str]] = field(default_factory=list)
    reports: list[MetricsReport] = field(default_factory=list)

    @classmethod
    def from_f1(cls, shares: Sequence[float], f1: Sequence[dict[str, float]]) -> "AdaptationCurve":
        """Gains A(s) = F1(s) - F1(s=0) for every metric; needs s=0 in ``shares``."""
        shares = list(shares)
        if 0.0 not in shares:
            raise ValueError("adaptation needs the s=0 baseline")
        base = f1[shares.index(0.0)]
        gains = [{k: row[k] - base[k] for k in base} for row in f1]
        return cls(shares, [dict(r) for r in f1], gains)

    def gain(self, share: float, metric: str) -> float:
        return self.gains[self.shares.index(share)][metric]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["s", "metric", "F1", "A"])
        for s, row, gain in zip(self.shares, self.f1, self.gains):
            for metric in row:
                w.writerow([s, metric, repr(float(row[metric])), repr(float(gain[metric]))])
        return buf.getvalue()


def split_test_half(scenes: Sequence[ScenePair], seed: int) -> tuple[list[ScenePair], list[ScenePair]]:
    """Fixed (test half, fine-tuning pool); the test half gets the larger share on odd counts."""
    order = np.random.default_rng([seed, 1337]).permutation(len(scenes))
    n_test = math.ceil(len(scenes) / 2)
    test = [scenes[i] for i in order[:n_test]]
    pool = [scenes[i] for i in order[n_test:]]
    return test, pool


def adaptation_study(
    params: ModelParams,
    scenes: Sequence[ScenePair],
    shares: Sequence[float],
    cfg: TrainConfig,
    rule: DecisionRule = DecisionRule(),
    scheme: GradeScheme = FINE,
) -> AdaptationCurve:
    """Fine-tune on nested shares of a new event and track F1 gains on a fixed test half.

    A share s uses floor(s * N) scenes of the N-scene event, all drawn from
    the half not used for testing.
    """
    shares = [float(s) for s in shares]
    if any(not 0.0 <= s <= 0.5 for s in shares):
        raise ValueError(f"shares must lie in [0, 0.5], got {shares}")
    if 0.0 not in shares:
        shares = [0.0] + shares
    test, pool = split_test_half(scenes, cfg.seed)
    order = np.random.default_rng([cfg.seed, 4241]).permutation(len(pool))
    pool = [pool[i] for i in order]
    f1_rows, reports, subsets = [], [], []
    for s in shares:
        subset = pool[: math.floor(s * len(scenes))]
        tuned = fine_tune_on(params, subset, cfg).params if subset else params
        rep = evaluate(test, [tuned], rule, scheme)
        reports.append(rep)
        f1_rows.append(rep.metric_values())
        subsets.append([x.scene_id for x in subset])
    curve = AdaptationCurve.from_f1(shares, f1_rows)
    curve.test_ids = [x.scene_id for x in test]
    curve.subset_ids = subsets
    curve.reports = reports
    return curve
