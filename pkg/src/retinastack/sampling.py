"""Multi-label stratified k-fold splitting and augmentation up-sampling plans."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataset import LabelMatrix, SampleRecord
from .seeds import derive_seed


@dataclass(frozen=True)
class FoldAssignment:
    k: int
    sample_ids: tuple[str, ...]
    folds: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "sample_ids", tuple(self.sample_ids))
        object.__setattr__(self, "folds", tuple(int(f) for f in self.folds))
        if len(self.sample_ids) != len(self.folds):
            raise ValueError("sample_ids and folds differ in length")
        if len(set(self.sample_ids)) != len(self.sample_ids):
            raise ValueError("duplicate sample id in fold assignment")
        if any(not 0 <= f < self.k for f in self.folds):
            raise ValueError(f"fold index outside [0, {self.k})")

    @property
    def fold_of(self) -> dict[str, int]:
        return dict(zip(self.sample_ids, self.folds))

    def members(self, fold: int) -> list[str]:
        return [s for s, f in zip(self.sample_ids, self.folds) if f == fold]

    def train_ids(self, fold: int) -> list[str]:
        return [s for s, f in zip(self.sample_ids, self.folds) if f != fold]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["sample_id", "fold"])
        w.writerows(zip(self.sample_ids, self.folds))
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, k: int | None = None) -> "FoldAssignment":
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or [c.strip() for c in rows[0]] != ["sample_id", "fold"]:
            raise ValueError("fold CSV must start with header 'sample_id,fold'")
        ids = [r[0] for r in rows[1:] if r]
        folds = [int(r[1]) for r in rows[1:] if r]
        if k is None:
            k = max(folds) + 1 if folds else 0
        return cls(k, tuple(ids), tuple(folds))

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_csv(), encoding="utf-8")

    @classmethod
    def read(cls, path: str | Path) -> "FoldAssignment":
        return cls.from_csv(Path(path).read_text(encoding="utf-8"))


def _pick(candidates: np.ndarray, rng: np.random.Generator) -> int:
    if candidates.size == 1:
        return int(candidates[0])
    return int(candidates[rng.integers(candidates.size)])


def stratified_kfold(
    targets,
    k: int,
    seed: int,
    sample_ids: Sequence[str] | None = None,
) -> FoldAssignment:
    """Iterative stratification over a binary ``(n, L)`` target matrix.

    Labels are handled rarest-first (by positives still unassigned). Each
    positive sample goes to the fold that still wants the most of that label;
    ties go to the fold wanting the most of the sample's labels combined,
    then the fold wanting the most samples, then a seeded random choice.
    Samples without any label fill folds by size. A final
    :func:`_refine_folds` pass removes imbalance the greedy leaves behind
    on densely co-occurring labels.
    """
    y = np.asarray(targets).astype(bool)
    if y.ndim == 1:
        y = y[:, None]
    n, n_labels = y.shape
    if k < 2:
        raise ValueError("k must be at least 2")
    if k > n:
        raise ValueError(f"k={k} exceeds number of samples n={n}")
    if sample_ids is None:
        sample_ids = [str(i) for i in range(n)]
    if len(sample_ids) != n:
        raise ValueError("sample_ids length does not match targets")

    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    # desires are kept multiplied by k so every comparison is exact integer math
    want_size = np.full(k, n, dtype=np.int64)
    want_label = np.tile(y.sum(axis=0).astype(np.int64), (k, 1))
    fold = np.full(n, -1, dtype=np.int64)
    pending = np.ones(n, dtype=bool)

    def assign(i: int, f: int) -> None:
        fold[i] = f
        pending[i] = False
        want_size[f] -= k
        want_label[f, y[i]] -= k

    while True:
        remaining = y[pending].sum(axis=0)
        if not remaining.any():
            break
        label = int(np.argmin(np.where(remaining > 0, remaining, np.iinfo(np.int64).max)))
        for i in order:
            if not (pending[i] and y[i, label]):
                continue
            cand = np.arange(k)
            for key in (want_label[:, label], want_label[:, y[i]].sum(axis=1), want_size):
                v = key[cand]
                cand = cand[v == v.max()]
            assign(int(i), _pick(cand, rng))

    for i in order:
        if pending[i]:
            assign(int(i), _pick(np.flatnonzero(want_size == want_size.max()), rng))

    _refine_folds(y, fold, k)
    return FoldAssignment(k, tuple(sample_ids), tuple(int(f) for f in fold))


def _refine_folds(y: np.ndarray, fold: np.ndarray, k: int) -> None:
    """Best-improvement local search over single moves and pairwise swaps.

    Minimizes ``sum((k*c[f,l] - total[l])**2) + sum((k*size[f] - n)**2)``
    where ``c`` holds per-fold positive counts. Every step strictly lowers
    this integer objective, so the loop terminates; ties resolve to the
    lowest index, keeping the result deterministic. Modifies ``fold`` in place.
    """
    Y = y.astype(np.int64)
    n = Y.shape[0]
    total = Y.sum(axis=0)
    n_pos = Y.sum(axis=1)
    rows = np.arange(n)
    while True:
        counts = np.stack([Y[fold == f].sum(axis=0) for f in range(k)])
        dev = k * counts - total
        size_dev = k * np.bincount(fold, minlength=k) - n

        # moving sample i from its fold a to fold b
        proj = Y @ dev.T
        delta = (2 * k * (proj - proj[rows, fold][:, None])
                 + 2 * k * k * n_pos[:, None]
                 + 2 * k * (size_dev[None, :] - size_dev[fold][:, None])
                 + 2 * k * k)
        delta[rows, fold] = 0
        best = delta.min()
        op = ("move", *np.unravel_index(np.argmin(delta), delta.shape)) if best < 0 else None

        # swapping i (fold a) with j (fold b); sizes stay put
        for a in range(k):
            ia = np.flatnonzero(fold == a)
            for b in range(a + 1, k):
                jb = np.flatnonzero(fold == b)
                if not ia.size or not jb.size:
                    continue
                g = dev[a] - dev[b]
                swap = (2 * k * ((Y[jb] @ g)[None, :] - (Y[ia] @ g)[:, None])
                        + 2 * k * k * (n_pos[ia][:, None] + n_pos[jb][None, :]
                                       - 2 * Y[ia] @ Y[jb].T))
                lo = swap.min()
                if lo < best:
                    best = lo
                    ii, jj = np.unravel_index(np.argmin(swap), swap.shape)
                    op = ("swap", ia[ii], jb[jj])

        if op is None:
            return
        if op[0] == "move":
            fold[op[1]] = op[2]
        else:
            i, j = op[1], op[2]
            fold[i], fold[j] = fold[j], fold[i]


def fold_label_counts(targets, assignment: FoldAssignment) -> np.ndarray:
    """``(k, L)`` positive counts per fold."""
    y = np.asarray(targets).astype(np.int64)
    if y.ndim == 1:
        y = y[:, None]
    folds = np.asarray(assignment.folds)
    return np.stack([y[folds == f].sum(axis=0) for f in range(assignment.k)])


# -- up-sampling ----------------------------------------------------------

@dataclass(frozen=True)
class UpsampleEntry:
    source_id: str
    replica_index: int
    aug_seed: int


@dataclass(frozen=True)
class UpsamplePlan:
    entries: tuple[UpsampleEntry, ...]

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))
        keys = {(e.source_id, e.replica_index) for e in self.entries}
        if len(keys) != len(self.entries):
            raise ValueError("replica indices must be unique per source")
        if len({e.aug_seed for e in self.entries}) != len(self.entries):
            raise ValueError("augmentation seeds must be unique across the plan")

    def __len__(self) -> int:
        return len(self.entries)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["source_id", "replica_index", "aug_seed"])
        for e in self.entries:
            w.writerow([e.source_id, e.replica_index, e.aug_seed])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "UpsamplePlan":
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or [c.strip() for c in rows[0]] != ["source_id", "replica_index", "aug_seed"]:
            raise ValueError("plan CSV must start with header 'source_id,replica_index,aug_seed'")
        return cls(tuple(UpsampleEntry(r[0], int(r[1]), int(r[2])) for r in rows[1:] if r))

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_csv(), encoding="utf-8")

    @classmethod
    def read(cls, path: str | Path) -> "UpsamplePlan":
        return cls.from_csv(Path(path).read_text(encoding="utf-8"))


def replica_id(source_id: str, replica_index: int) -> str:
    return f"{source_id}~aug{replica_index}"


def upsample_plan(m: LabelMatrix, threshold: int, seed: int) -> UpsamplePlan:
    """Greedy replica plan lifting every present label to ``threshold``.

    Labels are visited from rarest to most common. For each, its source
    samples are cycled in a seeded shuffled order, one replica at a time,
    until the label's effective count (originals plus replicas, where a
    replica counts toward every label of its source) reaches the threshold.
    Labels with zero occurrences cannot be lifted and are skipped.
    """
    y = m.to_array().astype(np.int64)
    effective = y.sum(axis=0)
    rng = np.random.default_rng(seed)
    ids = m.sample_ids
    next_replica = [1] * len(ids)
    entries: list[UpsampleEntry] = []

    order = sorted(range(y.shape[1]), key=lambda j: (int(effective[j]), j))
    for label in order:
        if effective[label] == 0 or effective[label] >= threshold:
            continue
        sources = rng.permutation(np.flatnonzero(y[:, label]))
        pos = 0
        while effective[label] < threshold:
            src = int(sources[pos % sources.size])
            pos += 1
            r = next_replica[src]
            next_replica[src] += 1
            entries.append(UpsampleEntry(ids[src], r, derive_seed(seed, "upsample", len(entries))))
            effective += y[src]
    return UpsamplePlan(tuple(entries))


def effective_counts(m: LabelMatrix, plan: UpsamplePlan) -> dict[str, int]:
    """Per-label counts after materializing ``plan``."""
    y = m.to_array().astype(np.int64)
    row = {sid: i for i, sid in enumerate(m.sample_ids)}
    total = y.sum(axis=0)
    for e in plan.entries:
        total = total + y[row[e.source_id]]
    return {name: int(total[j]) for j, name in enumerate(m.schema.class_names)}


def apply_plan(m: LabelMatrix, plan: UpsamplePlan) -> LabelMatrix:
    """Original records followed by one record per planned replica."""
    by_id = {r.sample_id: r for r in m.records}
    extra = []
    for e in plan.entries:
        src = by_id[e.source_id]
        extra.append(SampleRecord(replica_id(e.source_id, e.replica_index), src.labels, src.image_path))
    return LabelMatrix(m.records + tuple(extra), m.schema)


def expand_folds(assignment: FoldAssignment, plan: UpsamplePlan) -> FoldAssignment:
    """Give every replica the fold of its source sample."""
    fold_of = assignment.fold_of
    ids = list(assignment.sample_ids)
    folds = list(assignment.folds)
    for e in plan.entries:
        ids.append(replica_id(e.source_id, e.replica_index))
        folds.append(fold_of[e.source_id])
    return FoldAssignment(assignment.k, tuple(ids), tuple(folds))
