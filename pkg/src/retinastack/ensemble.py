"""Bagging across folds and per-class stacked logistic regression.

Base predictors are identified by ``model_id`` and described by an
:class:`EnsembleSpec`. Stacking features are the concatenation of every
member's class probabilities, one column per ``model_id/class``.

Two ways of building stacker training rows are supported:

* ``oof`` (default): for every architecture, each sample takes the
  prediction of the fold member that held it out, so no stacking feature
  was produced by a model that trained on that sample.
* ``replica``: every fold member is its own feature block and the rows are
  augmented replicas of the training images.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from ._math import logit as _logit
from .lbfgs import LbfgsConfig, LogisticModel, fit_logistic, predict_logistic
from .predictions import PredictionError, PredictionMatrix
from .sampling import FoldAssignment

MODEL_TYPES = ("detector", "classifier")


class EnsembleError(ValueError):
    pass


@dataclass(frozen=True)
class EnsembleMember:
    model_id: str
    model_type: str
    architecture: str
    fold: int | None = None

    def __post_init__(self):
        if self.model_type not in MODEL_TYPES:
            raise EnsembleError(f"unknown model type {self.model_type!r}")


def member_id(mode: str, architecture: str, fold: int | None = None) -> str:
    base = f"{mode}-{architecture}"
    return base if fold is None else f"{base}-f{fold}"


@dataclass(frozen=True)
class EnsembleSpec:
    members: tuple[EnsembleMember, ...]

    def __post_init__(self):
        object.__setattr__(self, "members", tuple(self.members))
        ids = [m.model_id for m in self.members]
        dupes = sorted({i for i in ids if ids.count(i) > 1})
        if dupes:
            raise EnsembleError(f"duplicate model_id(s): {dupes}")

    @property
    def model_ids(self) -> list[str]:
        return [m.model_id for m in self.members]

    def get(self, model_id: str) -> EnsembleMember:
        for m in self.members:
            if m.model_id == model_id:
                return m
        raise EnsembleError(f"no member {model_id!r}")

    def architectures(self, model_type: str) -> list[str]:
        seen: list[str] = []
        for m in self.members:
            if m.model_type == model_type and m.architecture not in seen:
                seen.append(m.architecture)
        return seen

    def fold_members(self, model_type: str, architecture: str) -> list[EnsembleMember]:
        return [m for m in self.members
                if m.model_type == model_type and m.architecture == architecture]

    def bagged(self) -> "EnsembleSpec":
        """One fold-less member per (type, architecture), in first-seen order."""
        out = []
        for t in MODEL_TYPES:
            for a in self.architectures(t):
                out.append(EnsembleMember(member_id(t, a), t, a, None))
        return EnsembleSpec(tuple(out))

    def to_dict(self) -> dict:
        return {"members": [
            {"model_id": m.model_id, "model_type": m.model_type,
             "architecture": m.architecture, "fold": m.fold}
            for m in self.members
        ]}

    @classmethod
    def from_dict(cls, doc: Mapping) -> "EnsembleSpec":
        return cls(tuple(EnsembleMember(d["model_id"], d["model_type"], d["architecture"], d.get("fold"))
                         for d in doc["members"]))

    @classmethod
    def grid(cls, detector_archs: Sequence[str], classifier_archs: Sequence[str], k: int) -> "EnsembleSpec":
        """Every (architecture, fold) pair for both model types."""
        out = []
        for t, archs in (("detector", detector_archs), ("classifier", classifier_archs)):
            for a in archs:
                for f in range(k):
                    out.append(EnsembleMember(member_id(t, a, f), t, a, f))
        return cls(tuple(out))


def _ordered(preds: Sequence[PredictionMatrix], spec: EnsembleSpec | None) -> list[PredictionMatrix]:
    by_id: dict[str, PredictionMatrix] = {}
    for p in preds:
        if p.model_id in by_id:
            raise EnsembleError(f"duplicate model_id {p.model_id!r}")
        by_id[p.model_id] = p
    if spec is None:
        return list(preds)
    missing = [i for i in spec.model_ids if i not in by_id]
    if missing:
        raise EnsembleError(f"missing member predictions: {missing}")
    return [by_id[i] for i in spec.model_ids]


def assemble_features(
    preds: Sequence[PredictionMatrix],
    sample_ids: Sequence[str],
    spec: EnsembleSpec | None = None,
    logit: bool = False,
) -> tuple[np.ndarray, list[str]]:
    """Stacking feature matrix for ``sample_ids``.

    Member order follows ``spec`` when given, otherwise input order. Columns
    are ``model_id/class``. With ``logit=True`` probabilities are mapped to
    log-odds first.
    """
    blocks, names = [], []
    for p in _ordered(preds, spec):
        try:
            blocks.append(p.rows(sample_ids))
        except PredictionError as exc:
            raise EnsembleError(str(exc)) from None
        names.extend(f"{p.model_id}/{c}" for c in p.class_names)
    if not blocks:
        raise EnsembleError("no members to assemble")
    X = np.hstack(blocks).astype(float)
    return (_logit(X) if logit else X), names


def mean_bag(preds: Sequence[PredictionMatrix], model_id: str = "mean-bag") -> PredictionMatrix:
    """Elementwise mean of members sharing classes and samples."""
    if not preds:
        raise EnsembleError("nothing to average")
    first = preds[0]
    for p in preds[1:]:
        if p.class_names != first.class_names:
            raise EnsembleError(f"class schema of {p.model_id!r} differs from {first.model_id!r}")
    try:
        stack = np.stack([p.rows(first.sample_ids) for p in preds])
    except PredictionError as exc:
        raise EnsembleError(str(exc)) from None
    if len({len(p.sample_ids) for p in preds}) != 1:
        raise EnsembleError("members cover different sample sets")
    return PredictionMatrix(model_id, first.sample_ids, first.class_names, stack.mean(axis=0))


# -- out-of-fold merging ---------------------------------------------------

@dataclass(frozen=True)
class OofBlock:
    """Architecture-level predictions plus the member that produced each row."""

    preds: PredictionMatrix
    source: dict[str, str]


def merge_out_of_fold(
    member_preds: Mapping[str, PredictionMatrix],
    spec: EnsembleSpec,
    model_type: str,
    architecture: str,
    folds: FoldAssignment,
    sample_ids: Sequence[str] | None = None,
) -> OofBlock:
    """Join fold members' validation predictions into one out-of-fold block.

    Sample ``s`` takes its row from the member whose fold equals
    ``folds.fold_of[s]``; that member never trained on ``s``.
    """
    members = spec.fold_members(model_type, architecture)
    if not members:
        raise EnsembleError(f"no {model_type} members for architecture {architecture!r}")
    by_fold = {}
    for m in members:
        if m.fold is None:
            raise EnsembleError(f"member {m.model_id!r} has no fold")
        if m.model_id not in member_preds:
            raise EnsembleError(f"missing member predictions: {m.model_id!r}")
        by_fold[m.fold] = member_preds[m.model_id]
    ids = list(sample_ids) if sample_ids is not None else list(folds.sample_ids)
    classes = by_fold[members[0].fold].class_names
    fold_of = folds.fold_of
    rows, source = [], {}
    for sid in ids:
        f = fold_of[sid]
        if f not in by_fold:
            raise EnsembleError(f"no {model_type}/{architecture} member held out fold {f}")
        p = by_fold[f]
        if p.class_names != classes:
            raise EnsembleError(f"class schema of {p.model_id!r} differs across folds")
        try:
            rows.append(p.rows([sid])[0])
        except PredictionError as exc:
            raise EnsembleError(str(exc)) from None
        source[sid] = p.model_id
    merged = PredictionMatrix(member_id(model_type, architecture), tuple(ids), classes,
                              np.asarray(rows).reshape(len(ids), len(classes)))
    return OofBlock(merged, source)


def verify_out_of_fold(blocks: Sequence[OofBlock], spec: EnsembleSpec, folds: FoldAssignment) -> None:
    """Raise unless every row was produced by a member that held that sample out."""
    fold_of_member = {m.model_id: m.fold for m in spec.members}
    fold_of = folds.fold_of
    for b in blocks:
        for sid, mid in b.source.items():
            if fold_of_member.get(mid) != fold_of.get(sid):
                raise EnsembleError(
                    f"leak: {b.preds.model_id} row {sid!r} (fold {fold_of.get(sid)}) "
                    f"comes from {mid!r} (fold {fold_of_member.get(mid)})"
                )


def oof_features(
    member_preds: Mapping[str, PredictionMatrix],
    spec: EnsembleSpec,
    folds: FoldAssignment,
    sample_ids: Sequence[str] | None = None,
    logit: bool = False,
) -> tuple[np.ndarray, list[str], EnsembleSpec]:
    """Architecture-level out-of-fold stacking features and the bagged spec."""
    bagged = spec.bagged()
    blocks = [merge_out_of_fold(member_preds, spec, m.model_type, m.architecture, folds, sample_ids)
              for m in bagged.members]
    verify_out_of_fold(blocks, spec, folds)
    ids = list(sample_ids) if sample_ids is not None else list(folds.sample_ids)
    X, names = assemble_features([b.preds for b in blocks], ids, bagged, logit)
    return X, names, bagged


def bag_members(member_preds: Mapping[str, PredictionMatrix], spec: EnsembleSpec) -> list[PredictionMatrix]:
    """Mean of fold members per architecture, named as in :meth:`EnsembleSpec.bagged`."""
    out = []
    for m in spec.bagged().members:
        group = spec.fold_members(m.model_type, m.architecture)
        missing = [g.model_id for g in group if g.model_id not in member_preds]
        if missing:
            raise EnsembleError(f"missing member predictions: {missing}")
        out.append(mean_bag([member_preds[g.model_id] for g in group], m.model_id))
    return out


# -- stacker ---------------------------------------------------------------

@dataclass
class StackedModel:
    classes: list[str]
    feature_names: list[str]
    models: dict[str, LogisticModel]
    members: EnsembleSpec | None = None
    logit: bool = False
    mode: str = "oof"

    def __post_init__(self):
        if set(self.models) != set(self.classes):
            raise EnsembleError("stacked model needs exactly one model per output class")
        for c, m in self.models.items():
            if m.coefficients.size != len(self.feature_names):
                raise EnsembleError(f"model for {c!r} has wrong feature count")

    @property
    def degenerate_classes(self) -> list[str]:
        return [c for c in self.classes if self.models[c].degenerate]

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "logit": self.logit,
            "classes": list(self.classes),
            "feature_names": list(self.feature_names),
            "members": self.members.to_dict() if self.members else None,
            "models": {c: self.models[c].to_dict() for c in self.classes},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def from_dict(cls, doc: Mapping) -> "StackedModel":
        members = EnsembleSpec.from_dict(doc["members"]) if doc.get("members") else None
        return cls(list(doc["classes"]), list(doc["feature_names"]),
                   {c: LogisticModel.from_dict(doc["models"][c]) for c in doc["classes"]},
                   members, bool(doc.get("logit", False)), doc.get("mode", "oof"))

    @classmethod
    def from_json(cls, text: str) -> "StackedModel":
        return cls.from_dict(json.loads(text))

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def read(cls, path: str | Path) -> "StackedModel":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def fit_stacker(
    features,
    feature_names: Sequence[str],
    targets,
    class_names: Sequence[str],
    l2: float = 1e-4,
    members: EnsembleSpec | None = None,
    logit: bool = False,
    mode: str = "oof",
    cfg: LbfgsConfig = LbfgsConfig(),
) -> StackedModel:
    """One L2 logistic regression per output class on the pooled rows.

    ``features`` must already be out-of-fold (or replica) features. A class
    with a single outcome gets a constant model and a warning.
    """
    X = np.asarray(features, dtype=float)
    Y = np.asarray(targets)
    if Y.ndim == 1:
        Y = Y[:, None]
    if X.ndim != 2 or X.shape[1] != len(feature_names):
        raise EnsembleError("feature matrix does not match feature names")
    if Y.shape != (X.shape[0], len(class_names)):
        raise EnsembleError(f"targets shape {Y.shape} does not match {X.shape[0]} rows "
                            f"x {len(class_names)} classes")
    models = {}
    for j, c in enumerate(class_names):
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            models[c] = fit_logistic(X, Y[:, j], l2, cfg, list(feature_names))
        for w in caught:
            warnings.warn(f"stacker class {c!r}: {w.message}", stacklevel=2)
    return StackedModel(list(class_names), list(feature_names), models, members, logit, mode)


def stacked_values(s: StackedModel, X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    return np.column_stack([predict_logistic(s.models[c], X) for c in s.classes])


def predict_stacked(
    s: StackedModel,
    preds: Sequence[PredictionMatrix],
    sample_ids: Sequence[str] | None = None,
    model_id: str = "stacked",
) -> PredictionMatrix:
    """Final per-class probabilities from member predictions.

    Members are matched by ``model_id`` and classes by name against the
    columns the stacker was fit on; any mismatch is an error.
    """
    if sample_ids is None:
        if not preds:
            raise EnsembleError("no member predictions")
        sample_ids = preds[0].sample_ids
    need = list(dict.fromkeys(n.rsplit("/", 1)[0] for n in s.feature_names))
    by_id = {p.model_id: p for p in preds}
    missing = [m for m in need if m not in by_id]
    if missing:
        raise EnsembleError(f"missing member predictions: {missing}")
    X, names = assemble_features([by_id[m] for m in need], sample_ids, None, s.logit)
    if names != s.feature_names:
        absent = sorted(set(s.feature_names) - set(names))
        extra = sorted(set(names) - set(s.feature_names))
        raise EnsembleError(f"member columns differ from fit time: missing {absent}, unexpected {extra}")
    return PredictionMatrix(model_id, tuple(sample_ids), tuple(s.classes), stacked_values(s, X))


def stacker_cv_predictions(
    features,
    feature_names: Sequence[str],
    targets,
    class_names: Sequence[str],
    fold_index: Sequence[int],
    l2: float = 1e-4,
    cfg: LbfgsConfig = LbfgsConfig(),
) -> np.ndarray:
    """Held-out stacker probabilities: rows of fold f come from a stacker fit
    on the other folds."""
    X = np.asarray(features, dtype=float)
    Y = np.asarray(targets)
    if Y.ndim == 1:
        Y = Y[:, None]
    fold_index = np.asarray(fold_index)
    out = np.empty(Y.shape, dtype=float)
    for f in np.unique(fold_index):
        test = fold_index == f
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            s = fit_stacker(X[~test], feature_names, Y[~test], class_names, l2, cfg=cfg)
        out[test] = stacked_values(s, X[test])
    return out
