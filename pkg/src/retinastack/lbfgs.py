"""Limited-memory BFGS and the L2-regularized binary logistic regression it fits.

The minimizer is unconstrained: two-loop recursion for the search direction
and a line search enforcing the strong Wolfe conditions (bracketing phase
followed by a safeguarded cubic-interpolation zoom).
"""
from __future__ import annotations

import json
import warnings
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from ._math import logit, sigmoid
from .losses import EPSILON

Objective = Callable[[np.ndarray], tuple[float, np.ndarray]]


class NonFiniteError(FloatingPointError):
    pass


@dataclass(frozen=True)
class LbfgsConfig:
    memory: int = 10
    max_iterations: int = 500
    grad_tolerance: float = 1e-8
    c1: float = 1e-4
    c2: float = 0.9
    max_line_search: int = 40

    def __post_init__(self):
        if not 0.0 < self.c1 < self.c2 < 1.0:
            raise ValueError("line search constants need 0 < c1 < c2 < 1")
        if self.memory < 1:
            raise ValueError("memory must be >= 1")


@dataclass
class LbfgsResult:
    x: np.ndarray
    value: float
    grad: np.ndarray
    iterations: int
    converged: bool
    message: str
    evaluations: int = 0


def _two_loop(g: np.ndarray, s_hist, y_hist, rho_hist) -> np.ndarray:
    """Apply the inverse-Hessian approximation to ``g``."""
    q = g.copy()
    alphas = []
    for s, y, rho in zip(reversed(s_hist), reversed(y_hist), reversed(rho_hist)):
        a = rho * s.dot(q)
        alphas.append(a)
        q -= a * y
    if s_hist:
        s, y = s_hist[-1], y_hist[-1]
        q *= s.dot(y) / y.dot(y)
    for (s, y, rho), a in zip(zip(s_hist, y_hist, rho_hist), reversed(alphas)):
        b = rho * y.dot(q)
        q += (a - b) * s
    return q


def _cubic_min(a, fa, da, b, fb, db):
    """Minimizer of the cubic interpolating (a, fa, da) and (b, fb, db), or None."""
    if a == b:
        return None
    d1 = da + db - 3.0 * (fa - fb) / (a - b)
    disc = d1 * d1 - da * db
    if disc < 0 or not np.isfinite(disc):
        return None
    d2 = np.sign(b - a) * np.sqrt(disc)
    denom = db - da + 2.0 * d2
    if denom == 0:
        return None
    return b - (b - a) * (db + d2 - d1) / denom


class _Line:
    """phi(alpha) = f(x + alpha d) with evaluation bookkeeping."""

    def __init__(self, fun: Objective, x: np.ndarray, d: np.ndarray):
        self.fun, self.x, self.d = fun, x, d
        self.evals = 0

    def __call__(self, alpha: float):
        self.evals += 1
        f, g = self.fun(self.x + alpha * self.d)
        g = np.asarray(g, dtype=float)
        return float(f), g, float(g.dot(self.d))


def _secant_min(a, da, b, db):
    """Zero of the linear interpolant of the slope, or None."""
    if da == db:
        return None
    return a - da * (b - a) / (db - da)


def _strong_wolfe(line: _Line, f0: float, d0: float, alpha: float, cfg: LbfgsConfig):
    """Return ``(alpha, f, g)`` meeting the strong Wolfe conditions, or None.

    Close to a minimizer, differences in ``f`` fall below floating-point
    noise while slopes stay informative. Values within ``noise`` of ``f0``
    are therefore treated as flat: such a point is accepted when its slope
    passes the curvature test (approximate Wolfe conditions, Hager & Zhang),
    and brackets are updated from the slope sign alone.
    """
    c1, c2 = cfg.c1, cfg.c2
    budget = cfg.max_line_search
    noise = 1e-11 * max(1.0, abs(f0))

    def flat(f_a):
        return abs(f_a - f0) <= noise

    def acceptable(a, f_a, d_a):
        if abs(d_a) > -c2 * d0:
            return False
        return f_a <= f0 + c1 * a * d0 or flat(f_a)

    def zoom(lo, f_lo, d_lo, g_lo, hi, f_hi, d_hi):
        # invariant: lo is the best point so far and the slope at lo points into hi
        nonlocal budget
        widths = [np.inf, np.inf]
        while budget > 0:
            width = abs(hi - lo)
            left, right = min(lo, hi), max(lo, hi)
            if flat(f_lo) and (not np.isfinite(f_hi) or flat(f_hi)):
                cand = _secant_min(lo, d_lo, hi, d_hi)
            else:
                cand = _cubic_min(lo, f_lo, d_lo, hi, f_hi, d_hi)
            if cand is None or not left < cand < right or width > 0.5 * widths[0]:
                # bisect when interpolation is unusable or the bracket stalls
                cand = 0.5 * (lo + hi)
            else:
                cand = min(max(cand, left + 0.01 * width), right - 0.01 * width)
            widths = [widths[1], width]
            budget -= 1
            f_c, g_c, d_c = line(cand)
            if not np.isfinite(f_c) or not np.all(np.isfinite(g_c)):
                hi, f_hi, d_hi = cand, np.inf, 0.0
                continue
            if acceptable(cand, f_c, d_c):
                return cand, f_c, g_c
            if flat(f_c):
                worse = d_c * (hi - lo) > 0
            else:
                worse = f_c > f0 + c1 * cand * d0 or f_c >= f_lo
            if worse:
                hi, f_hi, d_hi = cand, f_c, d_c
            else:
                if d_c * (hi - lo) >= 0:
                    hi, f_hi, d_hi = lo, f_lo, d_lo
                lo, f_lo, d_lo, g_lo = cand, f_c, d_c, g_c
            if abs(hi - lo) <= 1e-16 * max(1.0, abs(lo)):
                break
        # out of budget: settle for sufficient decrease if we have it
        if lo > 0 and g_lo is not None:
            return lo, f_lo, g_lo
        return None

    a_prev, f_prev, d_prev, g_prev = 0.0, f0, d0, None
    first = True
    while budget > 0:
        budget -= 1
        f_a, g_a, d_a = line(alpha)
        if not np.isfinite(f_a) or not np.all(np.isfinite(g_a)):
            # overshot into a non-finite region; pull back toward the last good point
            alpha = a_prev + 0.5 * (alpha - a_prev)
            continue
        if acceptable(alpha, f_a, d_a):
            return alpha, f_a, g_a
        if flat(f_a):
            too_far = d_a >= 0
        else:
            too_far = f_a > f0 + c1 * alpha * d0 or (not first and f_a >= f_prev)
        if too_far:
            return zoom(a_prev, f_prev, d_prev, g_prev, alpha, f_a, d_a)
        if d_a >= 0:
            return zoom(alpha, f_a, d_a, g_a, a_prev, f_prev, d_prev)
        if flat(f_a) and flat(f_prev):
            nxt = _secant_min(a_prev, d_prev, alpha, d_a)
        else:
            nxt = _cubic_min(a_prev, f_prev, d_prev, alpha, f_a, d_a)
        if nxt is None or not np.isfinite(nxt):
            nxt = 2.0 * alpha
        nxt = min(max(nxt, 1.1 * alpha), 10.0 * alpha)
        a_prev, f_prev, d_prev, g_prev = alpha, f_a, d_a, g_a
        alpha = nxt
        first = False
    return None


def lbfgs_minimize(fun: Objective, x0, cfg: LbfgsConfig = LbfgsConfig()) -> LbfgsResult:
    """Minimize ``fun`` (returning ``(value, gradient)``) from ``x0``.

    Stops when ``max|grad| <= cfg.grad_tolerance`` or after
    ``cfg.max_iterations``. A failed line search returns the current iterate
    with ``converged=False``. Raises :class:`NonFiniteError` if the objective
    is not finite at ``x0``.
    """
    x = np.array(x0, dtype=float, copy=True)
    f, g = fun(x)
    f = float(f)
    g = np.asarray(g, dtype=float)
    evals = 1
    if not np.isfinite(f) or not np.all(np.isfinite(g)):
        raise NonFiniteError("objective or gradient is not finite at the starting point")

    s_hist: deque = deque(maxlen=cfg.memory)
    y_hist: deque = deque(maxlen=cfg.memory)
    rho_hist: deque = deque(maxlen=cfg.memory)

    for it in range(cfg.max_iterations + 1):
        gnorm = np.max(np.abs(g)) if g.size else 0.0
        if gnorm <= cfg.grad_tolerance:
            return LbfgsResult(x, f, g, it, True, "gradient tolerance reached", evals)
        if it == cfg.max_iterations:
            break

        d = -_two_loop(g, s_hist, y_hist, rho_hist)
        dg = d.dot(g)
        if not dg < 0:
            s_hist.clear(); y_hist.clear(); rho_hist.clear()
            d = -g
            dg = d.dot(g)
        alpha0 = 1.0 if s_hist else min(1.0, 1.0 / gnorm)

        line = _Line(fun, x, d)
        found = _strong_wolfe(line, f, dg, alpha0, cfg)
        evals += line.evals
        if found is None:
            return LbfgsResult(x, f, g, it, False, "line search failed", evals)
        alpha, f_new, g_new = found

        s = alpha * d
        y = g_new - g
        sy = s.dot(y)
        x = x + s
        f, g = f_new, g_new
        if sy > 1e-12 * y.dot(y) and sy > 0:
            s_hist.append(s)
            y_hist.append(y)
            rho_hist.append(1.0 / sy)

    return LbfgsResult(x, f, g, cfg.max_iterations, False, "iteration limit reached", evals)


# -- logistic regression ----------------------------------------------------

@dataclass
class LogisticModel:
    coefficients: np.ndarray
    intercept: float
    l2_lambda: float = 1e-4
    feature_names: list[str] = field(default_factory=list)
    converged: bool = True
    degenerate: bool = False
    iterations: int = 0

    def __post_init__(self):
        self.coefficients = np.asarray(self.coefficients, dtype=float)
        if not (np.all(np.isfinite(self.coefficients)) and np.isfinite(self.intercept)):
            raise ValueError("logistic model parameters must be finite")
        if self.l2_lambda < 0:
            raise ValueError("l2_lambda must be >= 0")

    def to_dict(self) -> dict:
        return {
            "lambda": self.l2_lambda,
            "intercept": float(self.intercept),
            "coefficients": [float(c) for c in self.coefficients],
            "feature_names": list(self.feature_names),
            "converged": self.converged,
            "degenerate": self.degenerate,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "LogisticModel":
        return cls(
            np.asarray(doc["coefficients"], dtype=float),
            float(doc["intercept"]),
            float(doc["lambda"]),
            list(doc.get("feature_names", [])),
            bool(doc.get("converged", True)),
            bool(doc.get("degenerate", False)),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "LogisticModel":
        return cls.from_dict(json.loads(text))

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")


def logistic_objective(X: np.ndarray, y: np.ndarray, l2: float) -> Objective:
    """Mean log-loss plus ``l2/2 * |coef|^2``; the last parameter is the
    unpenalized intercept."""
    n = X.shape[0]

    def fun(theta: np.ndarray):
        w, b = theta[:-1], theta[-1]
        z = X @ w + b
        value = np.mean(np.logaddexp(0.0, z) - y * z) + 0.5 * l2 * w.dot(w)
        r = (sigmoid(z) - y) / n
        grad = np.empty_like(theta)
        grad[:-1] = X.T @ r + l2 * w
        grad[-1] = r.sum()
        return float(value), grad

    return fun


def fit_logistic(
    X,
    y,
    l2: float = 1e-4,
    cfg: LbfgsConfig = LbfgsConfig(),
    feature_names: Sequence[str] | None = None,
) -> LogisticModel:
    """Fit a binary logistic regression from a zero start.

    If ``y`` holds a single class the result is the constant model with
    intercept ``logit(clip(rate, eps, 1 - eps))`` and ``degenerate=True``.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float).ravel()
    if X.ndim != 2 or X.shape[0] != y.size:
        raise ValueError(f"X has shape {X.shape} but y has {y.size} entries")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("y must be binary")
    if l2 < 0:
        raise ValueError("l2 must be >= 0")
    names = list(feature_names) if feature_names is not None else []

    if y.size == 0 or y.min() == y.max():
        rate = float(y.mean()) if y.size else 0.5
        b = float(logit(np.clip(rate, EPSILON, 1.0 - EPSILON)))
        warnings.warn("single-class target; fitted a constant model", stacklevel=2)
        return LogisticModel(np.zeros(X.shape[1]), b, l2, names, True, True, 0)

    res = lbfgs_minimize(logistic_objective(X, y, l2), np.zeros(X.shape[1] + 1), cfg)
    if not res.converged:
        warnings.warn(f"logistic regression did not converge: {res.message}", stacklevel=2)
    return LogisticModel(res.x[:-1].copy(), float(res.x[-1]), l2, names,
                         res.converged, False, res.iterations)


def predict_logistic(model: LogisticModel, X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != model.coefficients.size:
        raise ValueError(
            f"expected {model.coefficients.size} features, got shape {X.shape}"
        )
    return sigmoid(X @ model.coefficients + model.intercept)
