"""Training loop for the reference predictor.

The reference model is a linear multi-label classifier (one sigmoid output
per class) standing in for a CNN backbone. It is trained with the same
schedule a backbone would get:

* phase 1 ("transfer"): only the output biases are trained, fixed lr;
* phase 2 ("fine-tune"): all parameters, reduce-on-plateau lr decay,
  gated early stopping, best-validation-loss checkpoint.

An epoch is a fixed number of seeded mini-batches drawn with replacement,
not a pass over the data.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from ._math import sigmoid
from .imaging import (
    IMAGENET_STATS,
    ArchPreset,
    NormalizationStats,
    camera_profile_for,
    center_crop,
    preprocess,
)
from .losses import ClassWeights, FocalConfig, batch_loss, batch_loss_grad
from .predictions import PredictionMatrix


class TrainingDivergedError(FloatingPointError):
    """Raised when a loss becomes NaN or infinite."""


@dataclass(frozen=True)
class TrainingConfig:
    phase1_epochs: int = 10
    phase1_lr: float = 1e-4
    phase2_lr_start: float = 1e-5
    lr_floor: float = 1e-7
    lr_factor: float = 0.1
    plateau_patience: int = 8
    early_stop_patience: int = 20
    early_stop_active_after: int = 60
    max_phase2_epochs: int = 290
    iterations_per_epoch: int = 250
    batch_size: int = 32
    gamma: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if not self.lr_floor < self.phase2_lr_start:
            raise ValueError("lr_floor must be below phase2_lr_start")
        if not 0.0 < self.lr_factor < 1.0:
            raise ValueError("lr_factor must lie in (0, 1)")
        if self.batch_size < 1 or self.iterations_per_epoch < 1:
            raise ValueError("batch_size and iterations_per_epoch must be positive")

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainingConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**doc)


# -- Adam ------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: np.ndarray) -> "AdamState":
        return cls(np.zeros_like(params, dtype=float), np.zeros_like(params, dtype=float))


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState, lr: float):
    """One bias-corrected Adam update. Returns ``(new_params, new_state)``."""
    params = np.asarray(params, dtype=float)
    grads = np.asarray(grads, dtype=float)
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise ValueError(
            f"shape mismatch: params {params.shape}, grads {grads.shape}, state {state.m.shape}"
        )
    t = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    v = state.beta2 * state.v + (1.0 - state.beta2) * grads * grads
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    new = params - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new, replace(state, m=m, v=v, step=t)


# -- schedule --------------------------------------------------------------

@dataclass(frozen=True)
class ScheduleState:
    """Validation-loss bookkeeping for lr decay and early stopping.

    ``epochs_since_improvement`` feeds early stopping and only resets on
    improvement. ``plateau_wait`` feeds lr decay and also resets after
    every decay, so both rules see their own patience window.
    """

    current_lr: float
    epochs_since_improvement: int = 0
    plateau_wait: int = 0
    best_val_loss: float = math.inf
    best_epoch: int = 0


def plateau_step(s: ScheduleState, val_loss: float, cfg: TrainingConfig, epoch: int) -> ScheduleState:
    if val_loss < s.best_val_loss:
        return replace(s, epochs_since_improvement=0, plateau_wait=0,
                       best_val_loss=val_loss, best_epoch=epoch)
    stale = s.epochs_since_improvement + 1
    wait = s.plateau_wait + 1
    lr = s.current_lr
    if wait >= cfg.plateau_patience:
        lr = max(lr * cfg.lr_factor, cfg.lr_floor)
        wait = 0
    return replace(s, current_lr=lr, epochs_since_improvement=stale, plateau_wait=wait)


def early_stop_check(s: ScheduleState, epoch: int, cfg: TrainingConfig) -> str:
    if epoch >= cfg.early_stop_active_after and s.epochs_since_improvement >= cfg.early_stop_patience:
        return "stop"
    return "continue"


def run_schedule(val_losses: Sequence[float], cfg: TrainingConfig) -> list[dict]:
    """Replay the fine-tune schedule over a fixed validation-loss sequence.

    One row per epoch (1-based): the lr the epoch ran with, the lr for the
    next epoch, the stale-epoch count and the stop decision. Replay ends at
    the first stop or when the losses or ``max_phase2_epochs`` run out.
    """
    s = ScheduleState(cfg.phase2_lr_start)
    trace = []
    for epoch, loss in enumerate(val_losses[:cfg.max_phase2_epochs], start=1):
        lr_used = s.current_lr
        s = plateau_step(s, float(loss), cfg, epoch)
        decision = early_stop_check(s, epoch, cfg)
        trace.append({"epoch": epoch, "lr": lr_used, "next_lr": s.current_lr,
                      "stale": s.epochs_since_improvement, "decision": decision})
        if decision == "stop":
            break
    return trace


# -- reference model ---------------------------------------------------------

@dataclass(frozen=True)
class FeatureSpec:
    """How a sample becomes a feature vector.

    ``pixels``: preprocess the image to ``size x size`` and flatten
    (``3 * size**2`` features). With ``zoom < 1`` only the central ``zoom``
    fraction of the preprocessed field is kept, at the same output size.
    ``embedding``: an external vector of ``length`` values.
    """

    kind: str = "pixels"
    size: int = 16
    length: int = 0
    zoom: float = 1.0

    def __post_init__(self):
        if self.kind not in ("pixels", "embedding"):
            raise ValueError(f"unknown feature kind {self.kind!r}")
        if self.kind == "pixels":
            if self.size <= 0:
                raise ValueError("pixel feature size must be positive")
            if not 0.0 < self.zoom <= 1.0:
                raise ValueError("zoom must lie in (0, 1]")
            object.__setattr__(self, "length", 3 * self.size * self.size)

    @property
    def n_features(self) -> int:
        return self.length


def extract_features(img, spec: FeatureSpec, stats: NormalizationStats = IMAGENET_STATS) -> np.ndarray:
    if spec.kind != "pixels":
        raise ValueError("embedding features are supplied externally")
    h, w = np.shape(img)[:2]
    cam = camera_profile_for(w, h)
    field = int(round(spec.size / spec.zoom))
    out = preprocess(img, cam, ArchPreset(f"pixels{field}", field), stats)
    if field != spec.size:
        out = center_crop(out, spec.size)
    return out.reshape(-1)


@dataclass(eq=False)
class ReferenceModel:
    weights: np.ndarray          # (n_features, n_classes)
    bias: np.ndarray             # (n_classes,)
    classes: list[str]
    feature_spec: FeatureSpec = field(default_factory=FeatureSpec)
    training_config: TrainingConfig | None = None
    best_epoch: int = 0
    val_loss: float = math.nan

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        self.bias = np.asarray(self.bias, dtype=float).reshape(-1)
        if self.weights.ndim != 2 or self.weights.shape[1] != self.bias.size:
            raise ValueError("weights must be (features, classes) matching bias")
        if len(self.classes) != self.bias.size:
            raise ValueError("class names do not match the number of outputs")
        if not (np.all(np.isfinite(self.weights)) and np.all(np.isfinite(self.bias))):
            raise ValueError("model parameters must be finite")

    @property
    def n_features(self) -> int:
        return self.weights.shape[0]

    def params(self) -> np.ndarray:
        return np.concatenate([self.weights.ravel(), self.bias])

    def with_params(self, theta: np.ndarray) -> "ReferenceModel":
        f, c = self.weights.shape
        return replace(self, weights=theta[:f * c].reshape(f, c).copy(), bias=theta[f * c:].copy())

    def to_dict(self) -> dict:
        return {
            "feature_spec": asdict(self.feature_spec),
            "classes": list(self.classes),
            "shape": list(self.weights.shape),
            "weights": [float(x) for x in self.weights.ravel()],
            "bias": [float(x) for x in self.bias],
            "training_config": asdict(self.training_config) if self.training_config else None,
            "best_epoch": self.best_epoch,
            "val_loss": self.val_loss,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, doc: dict) -> "ReferenceModel":
        rows, cols = doc["shape"]
        cfg = doc.get("training_config")
        return cls(
            np.asarray(doc["weights"], dtype=float).reshape(rows, cols),
            np.asarray(doc["bias"], dtype=float),
            list(doc["classes"]),
            FeatureSpec(**doc["feature_spec"]),
            TrainingConfig(**cfg) if cfg else None,
            int(doc.get("best_epoch", 0)),
            float(doc.get("val_loss", math.nan)),
        )

    @classmethod
    def from_json(cls, text: str) -> "ReferenceModel":
        return cls.from_dict(json.loads(text))

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def read(cls, path: str | Path) -> "ReferenceModel":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def predict_proba(model: ReferenceModel, features) -> np.ndarray:
    X = np.asarray(features, dtype=float)
    if X.ndim != 2 or X.shape[1] != model.n_features:
        raise ValueError(f"expected {model.n_features} features, got shape {X.shape}")
    return sigmoid(X @ model.weights + model.bias)


def predict(model: ReferenceModel, features, sample_ids: Sequence[str], model_id: str) -> PredictionMatrix:
    return PredictionMatrix(model_id, tuple(sample_ids), tuple(model.classes),
                            predict_proba(model, features))


@dataclass(frozen=True)
class Checkpoint:
    params: np.ndarray
    epoch: int
    val_loss: float


@dataclass
class FitResult:
    model: ReferenceModel
    checkpoint: Checkpoint
    history: list[dict]

    def history_csv(self) -> str:
        lines = ["epoch,phase,lr,train_loss,val_loss"]
        for h in self.history:
            lines.append(f"{h['epoch']},{h['phase']},{h['lr']!r},{h['train_loss']!r},{h['val_loss']!r}")
        return "\n".join(lines) + "\n"


def _loss_and_grad(theta, X, Y, shape, kind, weights, fcfg):
    f, c = shape
    W = theta[:f * c].reshape(f, c)
    b = theta[f * c:]
    p = sigmoid(X @ W + b)
    loss = batch_loss(kind, p, Y, weights, fcfg)
    dz = batch_loss_grad(kind, p, Y, weights, fcfg) * p * (1.0 - p)
    grad = np.concatenate([(X.T @ dz).ravel(), dz.sum(axis=0)])
    return loss, grad


def fit_reference_model(
    X_train,
    Y_train,
    X_val,
    Y_val,
    weights: ClassWeights,
    loss: str = "focal",
    cfg: TrainingConfig = TrainingConfig(),
    classes: Sequence[str] | None = None,
    feature_spec: FeatureSpec | None = None,
) -> FitResult:
    """Train a :class:`ReferenceModel` and return the best-val-loss checkpoint.

    The history covers every epoch of both phases; epoch numbers are global
    while early stopping counts phase-2 epochs only.
    """
    X_train = np.asarray(X_train, dtype=float)
    X_val = np.asarray(X_val, dtype=float)
    Y_train = np.asarray(Y_train, dtype=float)
    Y_val = np.asarray(Y_val, dtype=float)
    if Y_train.ndim == 1:
        Y_train = Y_train[:, None]
    if Y_val.ndim == 1:
        Y_val = Y_val[:, None]
    n, n_feat = X_train.shape
    n_cls = Y_train.shape[1]
    if Y_train.shape[0] != n or X_val.shape[1] != n_feat or Y_val.shape[1] != n_cls:
        raise ValueError("inconsistent feature/target dimensions")
    if n == 0 or X_val.shape[0] == 0:
        raise ValueError("training and validation sets must be non-empty")
    if not (np.all((Y_train == 0) | (Y_train == 1)) and np.all((Y_val == 0) | (Y_val == 1))):
        raise ValueError("targets must be binary")
    if loss not in ("focal", "bce"):
        raise ValueError(f"unknown loss {loss!r}")
    classes = list(classes) if classes is not None else [str(j) for j in range(n_cls)]
    if feature_spec is None:
        feature_spec = FeatureSpec("embedding", length=n_feat)

    fcfg = FocalConfig(gamma=cfg.gamma)
    shape = (n_feat, n_cls)
    theta = np.zeros(n_feat * n_cls + n_cls)
    bias_only = np.zeros_like(theta)
    bias_only[n_feat * n_cls:] = 1.0
    rng = np.random.default_rng(cfg.seed)

    history: list[dict] = []
    best = Checkpoint(theta.copy(), 0, math.inf)

    def run_epoch(theta, state, lr, mask):
        total = 0.0
        for _ in range(cfg.iterations_per_epoch):
            idx = rng.integers(0, n, cfg.batch_size)
            batch_loss_value, grad = _loss_and_grad(theta, X_train[idx], Y_train[idx],
                                                    shape, loss, weights, fcfg)
            if mask is not None:
                grad = grad * mask
            theta, state = adam_step(theta, grad, state, lr)
            total += batch_loss_value
        return theta, state, total / cfg.iterations_per_epoch

    def finish_epoch(theta, epoch, phase, lr, train_loss):
        nonlocal best
        val_loss, _ = _loss_and_grad(theta, X_val, Y_val, shape, loss, weights, fcfg)
        if not (math.isfinite(train_loss) and math.isfinite(val_loss)):
            raise TrainingDivergedError(
                f"non-finite loss at epoch {epoch} ({phase}): train={train_loss}, val={val_loss}"
            )
        history.append({"epoch": epoch, "phase": phase, "lr": lr,
                        "train_loss": train_loss, "val_loss": val_loss})
        if val_loss < best.val_loss:
            best = Checkpoint(theta.copy(), epoch, val_loss)
        return val_loss

    epoch = 0
    state = AdamState.zeros_like(theta)
    for _ in range(cfg.phase1_epochs):
        epoch += 1
        theta, state, tl = run_epoch(theta, state, cfg.phase1_lr, bias_only)
        finish_epoch(theta, epoch, "transfer", cfg.phase1_lr, tl)

    # fresh optimizer for fine-tuning, as after recompiling an unfrozen network
    state = AdamState.zeros_like(theta)
    sched = ScheduleState(cfg.phase2_lr_start)
    for phase_epoch in range(1, cfg.max_phase2_epochs + 1):
        epoch += 1
        lr = sched.current_lr
        theta, state, tl = run_epoch(theta, state, lr, None)
        vl = finish_epoch(theta, epoch, "finetune", lr, tl)
        sched = plateau_step(sched, vl, cfg, phase_epoch)
        if early_stop_check(sched, phase_epoch, cfg) == "stop":
            break

    model = ReferenceModel(np.zeros(shape), np.zeros(n_cls), classes, feature_spec, cfg)
    model = model.with_params(best.params)
    model.best_epoch = best.epoch
    model.val_loss = best.val_loss
    return FitResult(model, best, history)


# -- feature tables --------------------------------------------------------

def feature_table_csv(sample_ids: Sequence[str], X) -> str:
    """``sample_id,f0,f1,...`` with shortest round-tripping decimals."""
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[0] != len(sample_ids):
        raise ValueError("feature table rows must match sample ids")
    lines = ["sample_id," + ",".join(f"f{j}" for j in range(X.shape[1]))]
    for sid, row in zip(sample_ids, X):
        lines.append(str(sid) + "," + ",".join(repr(float(v)) for v in row))
    return "\n".join(lines) + "\n"


def parse_feature_table(text: str) -> tuple[list[str], np.ndarray]:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or not lines[0].startswith("sample_id"):
        raise ValueError("feature table must start with a 'sample_id' header")
    width = len(lines[0].split(",")) - 1
    ids, rows = [], []
    for ln in lines[1:]:
        parts = ln.split(",")
        if len(parts) != width + 1:
            raise ValueError(f"ragged feature row for sample {parts[0]!r}")
        ids.append(parts[0])
        rows.append([float(v) for v in parts[1:]])
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate sample id in feature table")
    return ids, np.asarray(rows, dtype=float).reshape(len(ids), width)
