"""Class weights and weighted focal / binary cross-entropy losses.

All losses treat every class as an independent binary decision. For one
sample the loss is the *sum* over classes; batch helpers take the mean over
samples.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

EPSILON = 1e-7


@dataclass(frozen=True)
class FocalConfig:
    gamma: float = 2.0
    epsilon: float = EPSILON

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if not 0.0 < self.epsilon < 0.5:
            raise ValueError("epsilon must lie in (0, 0.5)")


@dataclass(frozen=True)
class ClassWeights:
    """Per-class weights for the positive and the negative outcome."""

    class_names: tuple[str, ...]
    pos: tuple[float, ...]
    neg: tuple[float, ...]

    def __post_init__(self):
        for name in ("class_names", "pos", "neg"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if not len(self.class_names) == len(self.pos) == len(self.neg):
            raise ValueError("class_names, pos and neg must have equal length")
        w = np.asarray(self.pos + self.neg, dtype=float)
        if w.size and not (np.all(np.isfinite(w)) and np.all(w > 0)):
            raise ValueError("class weights must be finite and > 0")

    @classmethod
    def uniform(cls, class_names: Sequence[str], value: float = 1.0) -> "ClassWeights":
        n = len(class_names)
        return cls(tuple(class_names), (value,) * n, (value,) * n)

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        return np.asarray(self.pos, dtype=float), np.asarray(self.neg, dtype=float)

    def scaled(self, factor: float) -> "ClassWeights":
        return ClassWeights(self.class_names,
                            tuple(factor * w for w in self.pos),
                            tuple(factor * w for w in self.neg))

    def to_json(self) -> str:
        doc = {c: {"pos": p, "neg": n} for c, p, n in zip(self.class_names, self.pos, self.neg)}
        return json.dumps(doc, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "ClassWeights":
        doc: Mapping[str, Mapping[str, float]] = json.loads(text)
        names = tuple(doc)
        return cls(names,
                   tuple(float(doc[c]["pos"]) for c in names),
                   tuple(float(doc[c]["neg"]) for c in names))

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")


class EmptyClassError(ValueError):
    pass


def class_weight(n_samples: int, n_classes_in_decision: int, count: int) -> float:
    """``n_samples / (n_classes_in_decision * count)``."""
    if n_classes_in_decision < 1:
        raise ValueError("n_classes_in_decision must be >= 1")
    if count < 1:
        raise EmptyClassError("unweightable empty class")
    return n_samples / (n_classes_in_decision * count)


def binary_class_weights(targets, class_names: Sequence[str], on_empty: str = "error") -> ClassWeights:
    """Weights for each column of a binary target matrix, treated as its own
    two-class problem.

    A class with no positives (or no negatives) cannot be weighted. With
    ``on_empty="unit"`` such outcomes get weight 1.0 instead of raising.
    """
    y = np.asarray(targets)
    if y.ndim == 1:
        y = y[:, None]
    n = y.shape[0]
    pos, neg = [], []
    for j in range(y.shape[1]):
        n_pos = int(y[:, j].sum())
        pair = []
        for count in (n_pos, n - n_pos):
            try:
                pair.append(class_weight(n, 2, count))
            except EmptyClassError:
                if on_empty != "unit":
                    raise EmptyClassError(
                        f"unweightable empty class: {class_names[j]!r} has no "
                        f"{'positive' if count == n_pos else 'negative'} samples"
                    ) from None
                pair.append(1.0)
        pos.append(pair[0])
        neg.append(pair[1])
    return ClassWeights(tuple(class_names), tuple(pos), tuple(neg))


def _prepare(p, y, w: ClassWeights, eps: float):
    p = np.asarray(p, dtype=float)
    y = np.asarray(y)
    if p.shape != y.shape:
        raise ValueError(f"length mismatch: p {p.shape} vs y {y.shape}")
    if p.shape[-1] != len(w.pos):
        raise ValueError(f"length mismatch: {p.shape[-1]} classes vs {len(w.pos)} weights")
    w_pos, w_neg = w.arrays()
    positive = y.astype(bool)
    pc = np.clip(p, eps, 1.0 - eps)
    p_t = np.where(positive, pc, 1.0 - pc)
    alpha = np.where(positive, w_pos, w_neg)
    return p, positive, pc, p_t, alpha


def focal_loss(p, y, w: ClassWeights, cfg: FocalConfig = FocalConfig()) -> float | np.ndarray:
    """Weighted focal loss ``-alpha_t (1 - p_t)**gamma * log(p_t)`` summed over classes.

    ``p`` and ``y`` may be a single vector or a ``(batch, classes)`` matrix;
    a matrix returns one loss per row.
    """
    _, _, _, p_t, alpha = _prepare(p, y, w, cfg.epsilon)
    terms = -alpha * (1.0 - p_t) ** cfg.gamma * np.log(p_t)
    out = terms.sum(axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def focal_loss_grad(p, y, w: ClassWeights, cfg: FocalConfig = FocalConfig()) -> np.ndarray:
    """Analytic ``d focal_loss / d p_c``; zero where ``p`` is clamped."""
    p, positive, pc, p_t, alpha = _prepare(p, y, w, cfg.epsilon)
    g = cfg.gamma
    one_minus = 1.0 - p_t
    # d/dp_t of -(1-p_t)^g log p_t
    d_pt = -(one_minus ** g) / p_t
    if g != 0.0:
        d_pt = d_pt + g * one_minus ** (g - 1.0) * np.log(p_t)
    grad = alpha * np.where(positive, d_pt, -d_pt)
    inside = (p > cfg.epsilon) & (p < 1.0 - cfg.epsilon)
    return np.where(inside, grad, 0.0)


def weighted_bce(p, y, w: ClassWeights, epsilon: float = EPSILON) -> float | np.ndarray:
    """``-(w_pos * y * log p + w_neg * (1 - y) * log(1 - p))`` summed over classes."""
    p = np.asarray(p, dtype=float)
    y = np.asarray(y, dtype=float)
    if p.shape != y.shape:
        raise ValueError(f"length mismatch: p {p.shape} vs y {y.shape}")
    w_pos, w_neg = w.arrays()
    pc = np.clip(p, epsilon, 1.0 - epsilon)
    terms = -(w_pos * y * np.log(pc) + w_neg * (1.0 - y) * np.log(1.0 - pc))
    out = terms.sum(axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def weighted_bce_grad(p, y, w: ClassWeights, epsilon: float = EPSILON) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    y = np.asarray(y, dtype=float)
    if p.shape != y.shape:
        raise ValueError(f"length mismatch: p {p.shape} vs y {y.shape}")
    w_pos, w_neg = w.arrays()
    pc = np.clip(p, epsilon, 1.0 - epsilon)
    grad = -w_pos * y / pc + w_neg * (1.0 - y) / (1.0 - pc)
    inside = (p > epsilon) & (p < 1.0 - epsilon)
    return np.where(inside, grad, 0.0)


def batch_loss(kind: str, p, y, w: ClassWeights, cfg: FocalConfig = FocalConfig()) -> float:
    """Mean over samples of the per-sample loss."""
    if kind == "focal":
        per = focal_loss(p, y, w, cfg)
    elif kind == "bce":
        per = weighted_bce(p, y, w, cfg.epsilon)
    else:
        raise ValueError(f"unknown loss {kind!r}")
    return float(np.mean(per))


def batch_loss_grad(kind: str, p, y, w: ClassWeights, cfg: FocalConfig = FocalConfig()) -> np.ndarray:
    """Gradient of :func:`batch_loss` with respect to every entry of ``p``."""
    n = np.shape(p)[0]
    if kind == "focal":
        g = focal_loss_grad(p, y, w, cfg)
    elif kind == "bce":
        g = weighted_bce_grad(p, y, w, cfg.epsilon)
    else:
        raise ValueError(f"unknown loss {kind!r}")
    return g / n
