"""Per-model probability tables and their CSV format."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np


class PredictionError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class PredictionMatrix:
    """Probabilities for ``sample_ids`` x ``class_names`` emitted by one model."""

    model_id: str
    sample_ids: tuple[str, ...]
    class_names: tuple[str, ...]
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "sample_ids", tuple(str(s) for s in self.sample_ids))
        object.__setattr__(self, "class_names", tuple(self.class_names))
        values = np.array(self.values, dtype=float)
        if values.ndim == 1 and len(self.class_names) == 1:
            values = values[:, None]
        if values.shape != (len(self.sample_ids), len(self.class_names)):
            raise PredictionError(
                f"{self.model_id}: values shape {values.shape} does not match "
                f"{len(self.sample_ids)} samples x {len(self.class_names)} classes"
            )
        if not np.all(np.isfinite(values)) or values.size and (values.min() < 0 or values.max() > 1):
            raise PredictionError(f"{self.model_id}: probabilities must lie in [0, 1]")
        if len(set(self.sample_ids)) != len(self.sample_ids):
            raise PredictionError(f"{self.model_id}: duplicate sample ids")
        if len(set(self.class_names)) != len(self.class_names):
            raise PredictionError(f"{self.model_id}: duplicate class names")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def rows(self, sample_ids: Sequence[str]) -> np.ndarray:
        """Values reordered to ``sample_ids``; every id must be present."""
        index = {s: i for i, s in enumerate(self.sample_ids)}
        missing = [s for s in sample_ids if s not in index]
        if missing:
            raise PredictionError(
                f"{self.model_id}: missing {len(missing)} sample(s), e.g. {missing[0]!r}"
            )
        return self.values[[index[s] for s in sample_ids]]

    def column(self, name: str) -> np.ndarray:
        try:
            return self.values[:, self.class_names.index(name)]
        except ValueError:
            raise PredictionError(f"{self.model_id}: no class {name!r}") from None

    def select(self, sample_ids: Sequence[str]) -> "PredictionMatrix":
        return PredictionMatrix(self.model_id, tuple(sample_ids), self.class_names,
                                self.rows(sample_ids))

    def renamed(self, model_id: str) -> "PredictionMatrix":
        return PredictionMatrix(model_id, self.sample_ids, self.class_names, self.values)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["sample_id", *self.class_names])
        for sid, row in zip(self.sample_ids, self.values):
            # repr gives the shortest round-tripping decimal (up to 17 digits)
            w.writerow([sid, *(repr(float(v)) for v in row)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, model_id: str) -> "PredictionMatrix":
        rows = [r for r in csv.reader(io.StringIO(text)) if r]
        if not rows or rows[0][0].strip() != "sample_id":
            raise PredictionError(f"{model_id}: header must start with 'sample_id'")
        classes = tuple(c.strip() for c in rows[0][1:])
        ids, values = [], []
        for r in rows[1:]:
            if len(r) != len(classes) + 1:
                raise PredictionError(f"{model_id}: ragged row for sample {r[0]!r}")
            ids.append(r[0])
            values.append([float(v) for v in r[1:]])
        vals = np.asarray(values, dtype=float).reshape(len(ids), len(classes))
        return cls(model_id, tuple(ids), classes, vals)

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_csv(), encoding="utf-8")

    @classmethod
    def read(cls, path: str | Path, model_id: str | None = None) -> "PredictionMatrix":
        path = Path(path)
        return cls.from_csv(path.read_text(encoding="utf-8"), model_id or path.stem)
