"""Seeded synthetic fundus-like images with planted label signal.

Each image is a dim reddish disk on black with pixel noise. Label ``j`` adds
a colored ring at its own radius, so the signal survives rotation and
flipping and is linear in downscaled pixels. Disease risk is the OR of the
labels plus a share of "other" abnormal images marked by a central spot;
every abnormal image also carries a faint rim tint of its own.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataset import (
    DEFAULT_RISK_NAME,
    RFMID_TABLE1_COUNTS,
    RFMID_TRAIN_SIZE,
    LabelMatrix,
    LabelSchema,
    rfmid_schema,
    write_manifest,
)
from .ensemble import EnsembleSpec
from .imaging import write_image
from .predictions import PredictionMatrix
from .seeds import rng_for


@dataclass(frozen=True)
class SyntheticConfig:
    n_samples: int = 500
    size: int = 64
    class_names: tuple[str, ...] = ("c1", "c2", "c3", "c4")
    prevalence: tuple[float, ...] = (0.30, 0.20, 0.12, 0.07)
    ring_radii: tuple[float, ...] = (0.2, 0.4, 0.6, 0.8)
    ring_colors: tuple[tuple[float, float, float], ...] = (
        (0.25, 0.20, -0.10), (-0.10, 0.25, 0.20), (0.20, -0.10, 0.25), (0.20, 0.20, 0.20),
    )
    amplitude: float = 0.22
    other_rate: float = 0.05
    spot_amplitude: float = 0.3
    risk_amplitude: float = 0.03
    noise: float = 0.12

    def __post_init__(self):
        k = len(self.class_names)
        if not (len(self.prevalence) == len(self.ring_radii) == len(self.ring_colors) == k):
            raise ValueError("per-class synthetic settings must have equal length")


def _render(flags: np.ndarray, other: bool, risk: bool, cfg: SyntheticConfig, rng: np.random.Generator) -> np.ndarray:
    s = cfg.size
    c = (s - 1) / 2.0
    yy, xx = np.mgrid[0:s, 0:s]
    r = np.hypot(yy - c, xx - c) / (s / 2.0)
    disk = (r <= 0.95).astype(float)
    img = np.zeros((s, s, 3))
    img += disk[..., None] * np.array([0.55, 0.28, 0.12])
    for j, on in enumerate(flags):
        if on:
            ring = np.exp(-((r - cfg.ring_radii[j]) / 0.06) ** 2) * disk
            img += cfg.amplitude * ring[..., None] * np.array(cfg.ring_colors[j])
    if risk:
        rim = np.exp(-((r - 0.92) / 0.08) ** 2) * disk
        img += cfg.risk_amplitude * rim[..., None] * np.array([0.2, 0.6, 0.9]) / 0.6
    if other:
        spot = np.exp(-(r / 0.12) ** 2)
        img += cfg.spot_amplitude * spot[..., None]
    img += rng.normal(0.0, cfg.noise, img.shape) * disk[..., None]
    return np.clip(img, 0.0, 1.0)


def generate(cfg: SyntheticConfig, seed: int) -> tuple[LabelMatrix, list[np.ndarray]]:
    """Labels and images; sample ``i`` has id ``syn0001``-style names."""
    rng = rng_for(seed, "synthetic", "labels")
    k = len(cfg.class_names)
    flags = rng.random((cfg.n_samples, k)) < np.asarray(cfg.prevalence)
    other = rng.random(cfg.n_samples) < cfg.other_rate
    risk = flags.any(axis=1) | other
    labels = np.column_stack([risk, flags]).astype(np.int8)
    schema = LabelSchema((DEFAULT_RISK_NAME, *cfg.class_names), DEFAULT_RISK_NAME)
    width = max(4, len(str(cfg.n_samples)))
    ids = [f"syn{i:0{width}d}" for i in range(cfg.n_samples)]
    images = [
        _render(flags[i], bool(other[i] and not flags[i].any()), bool(risk[i]), cfg, rng_for(seed, "synthetic", "image", i))
        for i in range(cfg.n_samples)
    ]
    return LabelMatrix.from_array(ids, labels, schema), images


def write_dataset(root: str | Path, cfg: SyntheticConfig, seed: int) -> Path:
    """Write ``manifest.csv`` and ``images/<id>.png`` under ``root``."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    m, images = generate(cfg, seed)
    for sid, img in zip(m.sample_ids, images):
        write_image(img, root / "images" / f"{sid}.png")
    path = root / "manifest.csv"
    write_manifest(m, path)
    return path


def synthetic_predictions(
    labels: np.ndarray,
    separation: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """Noisy probabilities correlated with ``labels`` (for stacking tests)."""
    z = separation * (2.0 * np.asarray(labels, dtype=float) - 1.0) + rng.normal(size=np.shape(labels))
    return 1.0 / (1.0 + np.exp(-z))


def rfmid_like_labels(counts: Sequence[int], n: int, rng: np.random.Generator) -> np.ndarray:
    """Binary matrix with exactly ``counts[j]`` positives in column ``j``.

    Column 0 is treated as disease risk and forced on wherever any other
    column is on, so its count is a lower bound.
    """
    y = np.zeros((n, len(counts)), dtype=np.int8)
    for j, c in enumerate(counts[1:], start=1):
        y[rng.choice(n, size=int(c), replace=False), j] = 1
    any_label = y[:, 1:].any(axis=1)
    y[any_label, 0] = 1
    extra = int(counts[0]) - int(any_label.sum())
    if extra > 0:
        free = np.flatnonzero(~any_label)
        y[rng.choice(free, size=min(extra, free.size), replace=False), 0] = 1
    return y


def rfmid_inventory(
    n_samples: int,
    seed: int,
    separation: float = 1.5,
) -> tuple[EnsembleSpec, list[PredictionMatrix], LabelMatrix]:
    """Member predictions shaped like the full RFMiD ensemble.

    Ten detectors (two architectures by five folds) score disease risk and
    twenty classifiers (four architectures by five folds) score the 28 label
    classes. Label counts follow the training-set table scaled to
    ``n_samples``; ODE, which the table omits, gets the smallest count.
    """
    schema = rfmid_schema()
    scale = n_samples / RFMID_TRAIN_SIZE
    floor = 3
    counts = [max(floor, round(RFMID_TABLE1_COUNTS.get(c, 0) * scale)) for c in schema.class_names]
    rng = rng_for(seed, "rfmid-inventory", "labels")
    y = rfmid_like_labels(counts, n_samples, rng)
    ids = [f"inv{i:05d}" for i in range(n_samples)]
    truth = LabelMatrix.from_array(ids, y, schema)
    spec = EnsembleSpec.grid(["det_a", "det_b"], ["cls_a", "cls_b", "cls_c", "cls_d"], 5)
    risk_col = schema.index(schema.disease_risk_name)
    label_cols = [schema.index(c) for c in schema.label_names]
    preds = []
    for m in spec.members:
        cols = [risk_col] if m.model_type == "detector" else label_cols
        names = [schema.class_names[j] for j in cols]
        p = synthetic_predictions(y[:, cols], separation, rng_for(seed, "rfmid-inventory", m.model_id))
        preds.append(PredictionMatrix(m.model_id, ids, names, p))
    return spec, preds, truth
