"""Label manifests: loading, validation, label statistics and training targets.

A manifest is a UTF-8 CSV whose first column holds the sample id and whose
remaining columns are binary labels written as literal ``0``/``1``.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

DEFAULT_RISK_NAME = "Disease_Risk"

# per-class positives in the 1920-image RFMiD training set
RFMID_TABLE1_COUNTS = {
    "Disease_Risk": 1519, "DR": 376, "ARMD": 100, "MH": 317, "DN": 138, "MYA": 101,
    "BRVO": 73, "TSLN": 186, "ERM": 14, "LS": 47, "MS": 15, "CSR": 37, "ODC": 282,
    "CRVO": 28, "TV": 6, "AH": 16, "ODP": 65, "ST": 5, "AION": 17, "PT": 11, "RT": 14,
    "RS": 43, "CRS": 32, "EDN": 15, "RPEC": 22, "MHL": 11, "RP": 6, "OTHER": 34,
}
RFMID_TRAIN_SIZE = 1920

# the count table has 27 columns besides disease risk while the label set
# has 28 (27 conditions plus OTHER); ODE is the RFMiD condition it omits
RFMID_CLASSES = tuple(c for c in RFMID_TABLE1_COUNTS if c != "OTHER") + ("ODE", "OTHER")


class ManifestError(ValueError):
    """Raised for any malformed or inconsistent manifest."""


@dataclass(frozen=True)
class LabelSchema:
    class_names: tuple[str, ...]
    disease_risk_name: str = DEFAULT_RISK_NAME

    def __post_init__(self):
        object.__setattr__(self, "class_names", tuple(self.class_names))
        if len(set(self.class_names)) != len(self.class_names):
            raise ManifestError(f"duplicate class names in schema: {list(self.class_names)}")
        if self.disease_risk_name not in self.class_names:
            raise ManifestError(
                f"header missing disease-risk column {self.disease_risk_name!r}"
            )

    def __len__(self) -> int:
        return len(self.class_names)

    def index(self, name: str) -> int:
        return self.class_names.index(name)

    @property
    def label_names(self) -> tuple[str, ...]:
        """All classes except the disease-risk column, in schema order."""
        return tuple(c for c in self.class_names if c != self.disease_risk_name)


@dataclass(frozen=True)
class SampleRecord:
    sample_id: str
    labels: tuple[int, ...]
    image_path: Path | None = None


@dataclass(frozen=True)
class LabelMatrix:
    records: tuple[SampleRecord, ...]
    schema: LabelSchema

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        width = len(self.schema)
        seen: set[str] = set()
        for rec in self.records:
            if rec.sample_id in seen:
                raise ManifestError(f"duplicate sample_id {rec.sample_id!r}")
            seen.add(rec.sample_id)
            if len(rec.labels) != width:
                raise ManifestError(
                    f"sample {rec.sample_id!r} has {len(rec.labels)} labels, schema has {width}"
                )
            if any(v not in (0, 1) for v in rec.labels):
                raise ManifestError(f"non-binary label in sample {rec.sample_id!r}")

    def __len__(self) -> int:
        return len(self.records)

    @property
    def sample_ids(self) -> list[str]:
        return [r.sample_id for r in self.records]

    def to_array(self) -> np.ndarray:
        """Labels as an ``(n_samples, n_classes)`` int8 array."""
        if not self.records:
            return np.zeros((0, len(self.schema)), dtype=np.int8)
        return np.array([r.labels for r in self.records], dtype=np.int8)

    def subset(self, sample_ids: Iterable[str]) -> "LabelMatrix":
        by_id = {r.sample_id: r for r in self.records}
        try:
            recs = [by_id[s] for s in sample_ids]
        except KeyError as exc:
            raise ManifestError(f"unknown sample_id {exc.args[0]!r}") from None
        return LabelMatrix(tuple(recs), self.schema)

    @classmethod
    def from_array(
        cls,
        sample_ids: Sequence[str],
        labels: np.ndarray,
        schema: LabelSchema,
        image_paths: Sequence[Path | None] | None = None,
    ) -> "LabelMatrix":
        labels = np.asarray(labels)
        if labels.ndim != 2 or labels.shape != (len(sample_ids), len(schema)):
            raise ManifestError(
                f"label array shape {labels.shape} does not match "
                f"({len(sample_ids)}, {len(schema)})"
            )
        paths = image_paths if image_paths is not None else [None] * len(sample_ids)
        recs = tuple(
            SampleRecord(str(sid), tuple(int(v) for v in row), p)
            for sid, row, p in zip(sample_ids, labels, paths)
        )
        return cls(recs, schema)


def rfmid_schema() -> LabelSchema:
    """Disease risk plus the 28 RFMiD label classes."""
    return LabelSchema(RFMID_CLASSES, DEFAULT_RISK_NAME)


def _parse_cell(value: str, sample_id: str, column: str) -> int:
    v = value.strip()
    if v == "0":
        return 0
    if v == "1":
        return 1
    raise ManifestError(
        f"non-binary label {value!r} in sample {sample_id!r}, column {column!r}"
    )


def parse_manifest(
    text: str,
    schema: LabelSchema | None = None,
    disease_risk_name: str = DEFAULT_RISK_NAME,
) -> LabelMatrix:
    """Parse manifest CSV text.

    With ``schema=None`` the class list is taken from the header (everything
    after the first column). With an explicit schema the header must contain
    exactly the schema's classes; columns are reordered to schema order.
    """
    rows = [r for r in csv.reader(io.StringIO(text)) if any(c.strip() for c in r)]
    if not rows:
        raise ManifestError("empty manifest")
    header = [h.strip() for h in rows[0]]
    if len(header) < 2:
        raise ManifestError("manifest header needs a sample-id column and label columns")
    columns = header[1:]

    if schema is None:
        schema = LabelSchema(tuple(columns), disease_risk_name)
        order = list(range(len(columns)))
    else:
        if sorted(columns) != sorted(schema.class_names):
            missing = set(schema.class_names) - set(columns)
            extra = set(columns) - set(schema.class_names)
            raise ManifestError(
                f"header does not match schema (missing {sorted(missing)}, extra {sorted(extra)})"
            )
        order = [columns.index(c) for c in schema.class_names]

    if len(rows) == 1:
        raise ManifestError("empty manifest")

    records = []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise ManifestError(
                f"line {lineno}: expected {len(header)} cells, found {len(row)}"
            )
        sid = row[0].strip()
        cells = [_parse_cell(row[1 + j], sid, columns[j]) for j in order]
        records.append(SampleRecord(sid, tuple(cells)))
    return LabelMatrix(tuple(records), schema)


def load_manifest(
    path: str | Path,
    schema: LabelSchema | None = None,
    disease_risk_name: str = DEFAULT_RISK_NAME,
) -> LabelMatrix:
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    return parse_manifest(path.read_text(encoding="utf-8-sig"), schema, disease_risk_name)


def format_manifest(m: LabelMatrix, id_column: str = "ID") -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([id_column, *m.schema.class_names])
    for rec in m.records:
        w.writerow([rec.sample_id, *rec.labels])
    return buf.getvalue()


def write_manifest(m: LabelMatrix, path: str | Path, id_column: str = "ID") -> None:
    Path(path).write_text(format_manifest(m, id_column), encoding="utf-8")


def label_counts(m: LabelMatrix) -> dict[str, int]:
    """Number of positive records per class, in schema order."""
    totals = m.to_array().sum(axis=0)
    return {name: int(totals[j]) for j, name in enumerate(m.schema.class_names)}


def targets(m: LabelMatrix, mode: str) -> tuple[np.ndarray, list[str]]:
    """Training targets for one of the two model types.

    ``detector`` keeps only the disease-risk column; ``classifier`` keeps every
    other column in schema order.
    """
    if mode == "detector":
        names = [m.schema.disease_risk_name]
    elif mode == "classifier":
        names = list(m.schema.label_names)
    else:
        raise ValueError(f"unknown target mode {mode!r}")
    cols = [m.schema.index(n) for n in names]
    return m.to_array()[:, cols], names


def attach_images(m: LabelMatrix, image_root: str | Path, extensions=(".png", ".ppm")) -> LabelMatrix:
    """Resolve ``<image_root>/<sample_id><ext>`` for every record."""
    root = Path(image_root)
    recs = []
    for rec in m.records:
        found = None
        for ext in extensions:
            cand = root / f"{rec.sample_id}{ext}"
            if cand.is_file():
                found = cand
                break
        if found is None:
            raise ManifestError(f"no image for sample {rec.sample_id!r} under {root}")
        recs.append(SampleRecord(rec.sample_id, rec.labels, found))
    return LabelMatrix(tuple(recs), m.schema)
