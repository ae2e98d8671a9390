"""ROC curves, AUROC, average precision and macro-averaged evaluation reports.

Tied scores are always handled as one group: a tie group forms a single ROC
point, and average precision only samples precision at the end of each
group. Average precision is the non-interpolated step sum
``sum_n (R_n - R_{n-1}) * P_n``.
"""
from __future__ import annotations

import csv
import io
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataset import LabelMatrix
from .predictions import PredictionMatrix


class MetricError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray

    @property
    def points(self) -> list[tuple[float, float, float]]:
        return list(zip(self.fpr.tolist(), self.tpr.tolist(), self.thresholds.tolist()))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["fpr", "tpr", "threshold"])
        for f, t, th in self.points:
            w.writerow([repr(f), repr(t), repr(th)])
        return buf.getvalue()

    def to_svg(self, size: int = 400, title: str = "") -> str:
        """Unit-square ROC polyline with the chance diagonal."""
        pts = " ".join(f"{f:.6f},{1.0 - t:.6f}" for f, t in zip(self.fpr, self.tpr))
        label = f"<title>{title}</title>" if title else ""
        return (
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
            f'viewBox="0 0 1 1">{label}'
            '<rect x="0" y="0" width="1" height="1" fill="none" stroke="#000" stroke-width="0.005"/>'
            '<line x1="0" y1="1" x2="1" y2="0" stroke="#999" stroke-width="0.004" '
            'stroke-dasharray="0.02,0.02"/>'
            f'<polyline points="{pts}" fill="none" stroke="#c0392b" stroke-width="0.008"/>'
            "</svg>\n"
        )


def _validate(scores, labels):
    s = np.asarray(scores, dtype=float).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise MetricError(f"scores ({s.size}) and labels ({y.size}) differ in length")
    if not np.all((y == 0) | (y == 1)):
        raise MetricError("labels must be binary")
    if not np.all(np.isfinite(s)):
        raise MetricError("scores must be finite")
    return s, y.astype(bool)


def _tie_groups(s: np.ndarray, y: np.ndarray):
    """Cumulative (tp, fp) at the end of each descending tie group."""
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    ends = np.r_[np.flatnonzero(np.diff(s) != 0), s.size - 1]
    tp = np.cumsum(y)[ends]
    fp = (ends + 1) - tp
    return tp, fp, s[ends]


def roc_curve(scores, labels) -> RocCurve:
    s, y = _validate(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("ROC needs at least one positive and one negative label")
    tp, fp, thr = _tie_groups(s, y)
    fpr = np.r_[0.0, fp / n_neg]
    tpr = np.r_[0.0, tp / n_pos]
    return RocCurve(fpr, tpr, np.r_[np.inf, thr])


def auroc(scores, labels) -> float:
    """Trapezoidal area under the ROC curve (ties contribute one half)."""
    c = roc_curve(scores, labels)
    return float(np.sum(np.diff(c.fpr) * (c.tpr[1:] + c.tpr[:-1]) / 2.0))


def average_precision(scores, labels) -> float:
    s, y = _validate(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise MetricError("average precision needs at least one positive label")
    tp, fp, _ = _tie_groups(s, y)
    precision = tp / (tp + fp)
    recall_step = np.diff(np.r_[0, tp]) / n_pos
    return float(np.sum(recall_step * precision))


# -- reports ---------------------------------------------------------------

@dataclass
class ClassScore:
    name: str
    auroc: float | None
    ap: float | None
    positives: int


@dataclass
class EvalReport:
    classes: list[ClassScore]
    fold_tag: str | None = None
    skipped: list[str] = field(default_factory=list)

    @property
    def evaluable(self) -> list[ClassScore]:
        return [c for c in self.classes if c.name not in self.skipped]

    @property
    def macro_auroc(self) -> float:
        vals = [c.auroc for c in self.evaluable]
        return float(np.mean(vals)) if vals else float("nan")

    @property
    def macro_map(self) -> float:
        vals = [c.ap for c in self.evaluable]
        return float(np.mean(vals)) if vals else float("nan")

    @property
    def challenge_score(self) -> float:
        """Mean of macro AUROC and mAP."""
        return (self.macro_auroc + self.macro_map) / 2.0

    def by_class(self) -> dict[str, ClassScore]:
        return {c.name: c for c in self.classes}

    def to_dict(self) -> dict:
        return {
            "fold_tag": self.fold_tag,
            "macro_auroc": self.macro_auroc,
            "macro_map": self.macro_map,
            "challenge_score": self.challenge_score,
            "skipped": list(self.skipped),
            "classes": [
                {"class": c.name, "auroc": c.auroc, "ap": c.ap, "positives": c.positives}
                for c in self.classes
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, doc: dict) -> "EvalReport":
        classes = [ClassScore(c["class"], c["auroc"], c["ap"], int(c["positives"]))
                   for c in doc["classes"]]
        return cls(classes, doc.get("fold_tag"), list(doc.get("skipped", [])))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["class", "auroc", "ap", "positives"])
        for c in self.classes:
            w.writerow([c.name,
                        "" if c.auroc is None else repr(c.auroc),
                        "" if c.ap is None else repr(c.ap),
                        c.positives])
        return buf.getvalue()


def evaluate_multilabel(
    preds: PredictionMatrix,
    truth: LabelMatrix,
    fold_tag: str | None = None,
) -> EvalReport:
    """Per-class AUROC and AP of ``preds`` against ``truth``.

    Classes are matched by name and samples by id (``truth`` may cover more
    samples than ``preds``). Classes without both outcomes among the
    evaluated samples are skipped with a warning.
    """
    schema = truth.schema.class_names
    unknown = [c for c in preds.class_names if c not in schema]
    if unknown:
        raise MetricError(f"prediction classes not in truth schema: {unknown}")
    row_of = {sid: i for i, sid in enumerate(truth.sample_ids)}
    missing = [s for s in preds.sample_ids if s not in row_of]
    if missing:
        raise MetricError(
            f"{len(missing)} predicted sample(s) absent from truth, e.g. {missing[0]!r}"
        )
    y = truth.to_array()[[row_of[s] for s in preds.sample_ids]]

    scores, skipped = [], []
    for j, name in enumerate(preds.class_names):
        col = y[:, schema.index(name)]
        pos = int(col.sum())
        if pos == 0 or pos == col.size:
            skipped.append(name)
            scores.append(ClassScore(name, None, None, pos))
            continue
        s = preds.values[:, j]
        scores.append(ClassScore(name, auroc(s, col), average_precision(s, col), pos))
    if skipped:
        warnings.warn(f"skipped classes lacking positives or negatives: {skipped}", stacklevel=2)
    return EvalReport(scores, fold_tag, skipped)


def macro_over_folds(reports: Sequence[EvalReport], fold_tag: str = "macro") -> EvalReport:
    """Class-wise mean over folds, then the usual class macro average.

    A class is averaged over the folds where it was evaluable and is skipped
    only if no fold could score it.
    """
    if not reports:
        raise MetricError("no reports to average")
    names = [c.name for c in reports[0].classes]
    for r in reports[1:]:
        if [c.name for c in r.classes] != names:
            raise MetricError("fold reports have different class schemas")
    merged, skipped = [], []
    for name in names:
        per = [r.by_class()[name] for r in reports]
        ok = [c for c, r in zip(per, reports) if name not in r.skipped]
        positives = sum(c.positives for c in per)
        if not ok:
            skipped.append(name)
            merged.append(ClassScore(name, None, None, positives))
            continue
        merged.append(ClassScore(name,
                                 float(np.mean([c.auroc for c in ok])),
                                 float(np.mean([c.ap for c in ok])),
                                 positives))
    return EvalReport(merged, fold_tag, skipped)


def write_report(report: EvalReport, stem: str | Path) -> None:
    stem = Path(stem)
    stem.with_suffix(".json").write_text(report.to_json(), encoding="utf-8")
    stem.with_suffix(".csv").write_text(report.to_csv(), encoding="utf-8")
