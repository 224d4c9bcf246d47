"""Pixel-level localization and damage metrics.

Everything derives from one pooled confusion matrix over fine grades
0..4 (row = truth, column = prediction, 0 = background). Unclassified truth
pixels never enter the matrix; they are only counted.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .network import DecisionRule, decide, ensemble_predict
from .scene_data import N_GRADES, UNCLASSIFIED, truth_grades

DAMAGED_FINE = (2, 3, 4)


@dataclass(frozen=True)
class GradeScheme:
    """Maps fine grades 1-4 to coarse labels 1..K."""

    name: str
    mapping: tuple[int, int, int, int]
    labels: tuple[str, ...]

    def __post_init__(self):
        k = len(self.labels)
        if sorted(set(self.mapping)) != list(range(1, k + 1)):
            raise ValueError(f"scheme {self.name!r} must map onto every label 1..{k}")

    @property
    def n_classes(self) -> int:
        return len(self.labels)

    def lookup(self) -> np.ndarray:
        """Index array: fine grade (0..4) -> coarse index (0..K)."""
        return np.array((0,) + tuple(self.mapping))

    def remap(self, grades: np.ndarray) -> np.ndarray:
        out = grades.copy()
        for fine, coarse in enumerate(self.mapping, start=1):
            out[grades == fine] = coarse
        return out


FINE = GradeScheme("fine", (1, 2, 3, 4), ("1", "2", "3", "4"))
AHR = GradeScheme("ahr", (1, 2, 2, 3), ("1", "2/3", "4"))
SCHEMES = {"fine": FINE, "ahr": AHR}


@dataclass(frozen=True)
class PRF:
    f1: float
    precision: float
    recall: float
    tp: int = 0
    fp: int = 0
    fn: int = 0
    defined: bool = True

    def to_dict(self) -> dict:
        return {
            "f1": self.f1,
            "precision": self.precision,
            "recall": self.recall,
            "tp": self.tp,
            "fp": self.fp,
            "fn": self.fn,
            "defined": self.defined,
        }


def f1_from_pr(precision: float, recall: float) -> float:
    if precision + recall == 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def prf_from_counts(tp: int, fp: int, fn: int) -> PRF:
    tp, fp, fn = int(tp), int(fp), int(fn)
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    return PRF(f1_from_pr(precision, recall), precision, recall, tp, fp, fn, defined=tp + fp + fn > 0)


def macro_f1(f1s: Sequence[float]) -> float:
    """Harmonic mean; any zero component gives zero."""
    vals = [float(v) for v in f1s]
    if not vals:
        raise ValueError("macro F1 of an empty list")
    if any(v <= 0 for v in vals):
        return 0.0
    return len(vals) / sum(1.0 / v for v in vals)


def challenge_score(f1_loc: float, f1_cls: float) -> float:
    return 0.3 * f1_loc + 0.7 * f1_cls


# ---------------------------------------------------------------------------
# counting


@dataclass
class ConfusionMatrix:
    """Square count matrix; index 0 is background, 1..K the scheme's labels."""

    counts: np.ndarray
    labels: tuple[str, ...]
    unclassified: int = 0

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        k = len(self.labels) + 1
        if self.counts.shape != (k, k):
            raise ValueError(f"expected {(k, k)} counts, got {self.counts.shape}")

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if self.labels != other.labels:
            raise ValueError("cannot add confusion matrices of different schemes")
        return ConfusionMatrix(self.counts + other.counts, self.labels, self.unclassified + other.unclassified)

    def truth_totals(self) -> np.ndarray:
        return self.counts[1:].sum(axis=1)

    def row_normalized(self) -> np.ndarray:
        """Building rows as fractions of each truth grade (column 0 = missed)."""
        rows = self.counts[1:].astype(np.float64)
        totals = rows.sum(axis=1, keepdims=True)
        return np.divide(rows, totals, out=np.zeros_like(rows), where=totals > 0)

    def remap(self, scheme: GradeScheme) -> "ConfusionMatrix":
        """Merge a fine (5x5) matrix into ``scheme`` labels."""
        if len(self.labels) != N_GRADES:
            raise ValueError("only fine matrices can be remapped")
        lut = scheme.lookup()
        k = scheme.n_classes + 1
        out = np.zeros((k, k), dtype=np.int64)
        np.add.at(out, (lut[:, None], lut[None, :]), self.counts)
        return ConfusionMatrix(out, scheme.labels, self.unclassified)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        names = ["background"] + list(self.labels)
        w.writerow(["truth\\pred"] + [n if i else "missed" for i, n in enumerate(names)])
        for name, row in zip(names, self.counts):
            w.writerow([name] + [int(v) for v in row])
        return buf.getvalue()


def _pairs(pred, truth) -> Iterable[tuple[np.ndarray, np.ndarray]]:
    if isinstance(pred, np.ndarray) and isinstance(truth, np.ndarray):
        return [(pred, truth)]
    pred, truth = list(pred), list(truth)
    if len(pred) != len(truth):
        raise ValueError("prediction and truth lists differ in length")
    return zip(pred, truth)


def confusion_counts(pred, truth) -> ConfusionMatrix:
    """Fine 5x5 counts pooled over one map pair or aligned lists of maps."""
    counts = np.zeros((N_GRADES + 1, N_GRADES + 1), dtype=np.int64)
    uncls = 0
    for p, t in _pairs(pred, truth):
        p = np.asarray(p)
        t = np.asarray(t)
        if p.shape != t.shape:
            raise ValueError(f"prediction {p.shape} and truth {t.shape} are not aligned")
        valid = t != UNCLASSIFIED
        uncls += int((~valid).sum())
        if p[valid].max(initial=0) > N_GRADES or t[valid].max(initial=0) > N_GRADES:
            raise ValueError("grade maps must hold values 0-4 (255 allowed in truth only)")
        idx = t[valid].astype(np.int64) * (N_GRADES + 1) + p[valid].astype(np.int64)
        counts += np.bincount(idx, minlength=(N_GRADES + 1) ** 2).reshape(N_GRADES + 1, N_GRADES + 1)
    return ConfusionMatrix(counts, FINE.labels, uncls)


def _loc_from_matrix(cm: ConfusionMatrix) -> PRF:
    c = cm.counts
    return prf_from_counts(c[1:, 1:].sum(), c[0, 1:].sum(), c[1:, 0].sum())


def _grades_from_matrix(cm: ConfusionMatrix) -> list[PRF]:
    c = cm.counts
    out = []
    for lvl in range(1, len(cm.labels) + 1):
        tp = c[lvl, lvl]
        fn = c[lvl].sum() - tp
        fp = c[1:, lvl].sum() - tp
        out.append(prf_from_counts(tp, fp, fn))
    return out


def _binary_from_fine(cm: ConfusionMatrix) -> PRF:
    c = cm.counts
    dmg = list(DAMAGED_FINE)
    tp = c[np.ix_(dmg, dmg)].sum()
    fn = c[dmg].sum() - tp
    fp = c[1, dmg].sum()
    return prf_from_counts(tp, fp, fn)


def localization_f1(pred, truth) -> PRF:
    """Building (grade >= 1) versus background pixel F1."""
    return _loc_from_matrix(confusion_counts(pred, truth))


def per_grade_f1(pred, truth, scheme: GradeScheme = FINE) -> tuple[list[PRF], ConfusionMatrix]:
    """One-vs-rest F1 per label over truth building pixels.

    Predicted background at a building pixel is a false negative for its
    truth label and lands in the matrix's "missed" column.
    """
    cm = confusion_counts(pred, truth)
    if scheme is not FINE:
        cm = cm.remap(scheme)
    return _grades_from_matrix(cm), cm


def binary_f1(pred, truth) -> PRF:
    """Damaged (grades 2-4) versus undamaged F1 over truth building pixels."""
    return _binary_from_fine(confusion_counts(pred, truth))


# ---------------------------------------------------------------------------
# reports


@dataclass
class MetricsReport:
    loc: PRF
    grades: dict[str, PRF]
    binary: PRF
    f1_cls: float
    score: float
    confusion: ConfusionMatrix
    scheme: str = "fine"
    n_scenes: int = 0

    @property
    def f1_loc(self) -> float:
        return self.loc.f1

    @property
    def f1_binary(self) -> float:
        return self.binary.f1

    def metric_values(self) -> dict[str, float]:
        """Flat name -> value view used by sweeps, folds and averaging."""
        out = {"F1_loc": self.loc.f1, "F1_Cb": self.binary.f1, "F1_cls": self.f1_cls, "score": self.score}
        for label, prf in self.grades.items():
            out[f"F1_C{label}"] = prf.f1
        return out

    def to_dict(self) -> dict:
        return {
            "scheme": self.scheme,
            "n_scenes": self.n_scenes,
            "F1_loc": self.loc.to_dict(),
            "grades": {k: v.to_dict() for k, v in self.grades.items()},
            "F1_Cb": self.binary.to_dict(),
            "F1_cls": self.f1_cls,
            "score": self.score,
            "confusion": {
                "labels": ["background", *self.confusion.labels],
                "counts": self.confusion.counts.tolist(),
                "unclassified_pixels": self.confusion.unclassified,
            },
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def report_from_counts(fine: ConfusionMatrix, scheme: GradeScheme = FINE, n_scenes: int = 0) -> MetricsReport:
    cm = fine if scheme is FINE else fine.remap(scheme)
    loc = _loc_from_matrix(fine)
    grades = _grades_from_matrix(cm)
    # grades absent from both truth and prediction carry no evidence and are left out
    available = [g.f1 for g in grades if g.defined]
    cls = macro_f1(available) if available else 0.0
    return MetricsReport(
        loc=loc,
        grades=dict(zip(scheme.labels, grades)),
        binary=_binary_from_fine(fine),
        f1_cls=cls,
        score=challenge_score(loc.f1, cls),
        confusion=cm,
        scheme=scheme.name,
        n_scenes=n_scenes,
    )


def average_reports(reports: Sequence[MetricsReport]) -> dict[str, float]:
    """Unweighted arithmetic mean of each metric value across reports."""
    if not reports:
        raise ValueError("no reports to average")
    keys = reports[0].metric_values().keys()
    return {k: float(np.mean([r.metric_values()[k] for r in reports])) for k in keys}


def evaluate_maps(pred_maps, truth_maps, scheme: GradeScheme = FINE, aggregate: str = "micro"):
    """Report over aligned lists of grade maps.

    ``micro`` pools pixel counts before computing F1s; ``macro`` averages
    per-scene metric values and returns them as a dict alongside the pooled
    report.
    """
    pred_maps, truth_maps = list(pred_maps), list(truth_maps)
    if not pred_maps:
        raise ValueError("cannot evaluate an empty scene set")
    per_scene = [confusion_counts(p, t) for p, t in zip(pred_maps, truth_maps)]
    pooled = per_scene[0]
    for cm in per_scene[1:]:
        pooled = pooled + cm
    report = report_from_counts(pooled, scheme, len(pred_maps))
    if aggregate == "micro":
        return report
    if aggregate == "macro":
        return report, average_reports([report_from_counts(cm, scheme, 1) for cm in per_scene])
    raise ValueError(f"unknown aggregate mode {aggregate!r}")


def evaluate(scenes, models, rule=None, scheme: GradeScheme = FINE, aggregate: str = "micro", transform=None):
    """Predict every scene with the (ensembled) models, decide, and score.

    ``transform`` optionally maps a scene to a perturbed copy before inference.
    """
    scenes = list(scenes)
    if not scenes:
        raise ValueError("cannot evaluate an empty scene set")
    rule = rule or DecisionRule()
    preds, truths = [], []
    for scene in scenes:
        seen = transform(scene) if transform is not None else scene
        preds.append(decide(ensemble_predict(models, seen.pre, seen.post), rule))
        truths.append(truth_grades(scene))
    return evaluate_maps(preds, truths, scheme, aggregate)
