"""Comparison response models and the plug-in estimates/policies they induce.

Five baselines: linear regression, logistic regression, a logit choice model
with per-coordinate treatment interactions, an unstructured response net, and
a non-personalized per-level-mean rule. Each fits a response surface on the
training fold and answers through plain plug-in prediction (no orthogonal
correction), which is exactly what makes them comparison points.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import Dataset, InvalidInputError, LEVEL_TOL, ValueParams
from .nets import PlainNet, TrainConfig, plain_prob_batch, plain_train, sigmoid
from .policy import ConstantPolicy, IndexedTablePolicy

VARIANTS = ("lr", "logr", "lcm", "plain", "uni")

_GD_TOL = 1e-6
_GD_MAX_ITERS = 20_000


@dataclass(frozen=True)
class LinearModel:
    """y = b0 + alpha'x + bt*t fit by least squares."""

    intercept: float
    alpha: np.ndarray
    bt: float

    def predict(self, x: np.ndarray, ts) -> np.ndarray:
        x = np.atleast_2d(x)
        ts = np.broadcast_to(np.asarray(ts, dtype=float), (x.shape[0],))
        return self.intercept + x @ self.alpha + self.bt * ts


@dataclass(frozen=True)
class LogisticModel:
    """P(y=1) = sigmoid(b0 + alpha'x + bt*t) fit by MLE."""

    intercept: float
    alpha: np.ndarray
    bt: float
    converged: bool

    def predict(self, x: np.ndarray, ts) -> np.ndarray:
        x = np.atleast_2d(x)
        ts = np.broadcast_to(np.asarray(ts, dtype=float), (x.shape[0],))
        return sigmoid(self.intercept + x @ self.alpha + self.bt * ts)


@dataclass(frozen=True)
class LogitChoiceModel:
    """Utility b0 + alpha'x + (beta'x)*t with extreme-value noise; P = sigmoid(u)."""

    intercept: float
    alpha: np.ndarray
    beta: np.ndarray
    converged: bool

    def predict(self, x: np.ndarray, ts) -> np.ndarray:
        x = np.atleast_2d(x)
        ts = np.broadcast_to(np.asarray(ts, dtype=float), (x.shape[0],))
        return sigmoid(self.intercept + x @ self.alpha + (x @ self.beta) * ts)


@dataclass(frozen=True)
class PlainNetModel:
    net: PlainNet

    def predict(self, x: np.ndarray, ts) -> np.ndarray:
        x = np.atleast_2d(x)
        ts = np.broadcast_to(np.asarray(ts, dtype=float), (x.shape[0],))
        return plain_prob_batch(self.net, x, ts)


@dataclass(frozen=True)
class UniformModel:
    """Per-level empirical mean outcomes; knows nothing between levels."""

    levels: tuple[float, ...]
    level_means: tuple[float, ...]
    level_counts: tuple[int, ...]

    def _level_index(self, t: float) -> int:
        for j, lv in enumerate(self.levels):
            if abs(lv - t) <= LEVEL_TOL:
                return j
        raise InvalidInputError(f"uniform model has no mean for level {t!r}; it cannot extrapolate")

    def predict(self, x: np.ndarray, ts) -> np.ndarray:
        x = np.atleast_2d(x)
        ts = np.broadcast_to(np.asarray(ts, dtype=float), (x.shape[0],))
        means = np.asarray(self.level_means)
        idx = np.array([self._level_index(float(t)) for t in np.unique(ts)])
        lookup = {float(self.levels[j]): means[j] for j in idx}
        return np.array([lookup[float(t)] for t in ts])

    def level_values(self, vp: ValueParams) -> np.ndarray:
        """w * mean outcome - c * level, per level."""
        return vp.w * np.asarray(self.level_means) - vp.c * np.asarray(self.levels)


ResponseModel = LinearModel | LogisticModel | LogitChoiceModel | PlainNetModel | UniformModel


def _design_matrix(ds: Dataset, variant: str) -> np.ndarray:
    if variant in ("lr", "logr"):
        return np.column_stack([np.ones(ds.n), ds.x, ds.t])
    if variant == "lcm":
        return np.column_stack([np.ones(ds.n), ds.x, ds.x * ds.t[:, None]])
    raise InvalidInputError(f"no design matrix for variant {variant!r}")


def _gd_logistic(features: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, bool]:
    """Full-batch gradient descent with Armijo backtracking on the mean NLL.

    Stops when the gradient sup-norm drops below 1e-6; the returned flag
    records whether that happened before the iteration cap.
    """
    n, p = features.shape
    coef = np.zeros(p)

    def nll(c: np.ndarray) -> float:
        u = features @ c
        # log(1 + exp(u)) - y*u, computed stably
        return float(np.mean(np.logaddexp(0.0, u) - y * u))

    loss = nll(coef)
    step = 1.0
    for _ in range(_GD_MAX_ITERS):
        g = features.T @ (sigmoid(features @ coef) - y) / n
        gnorm = float(np.max(np.abs(g)))
        if gnorm < _GD_TOL:
            return coef, True
        step = min(step * 2.0, 64.0)
        g2 = float(g @ g)
        while step > 1e-16:
            cand = coef - step * g
            cand_loss = nll(cand)
            if cand_loss <= loss - 1e-4 * step * g2:
                break
            step *= 0.5
        coef = coef - step * g
        loss = nll(coef)
    g = features.T @ (sigmoid(features @ coef) - y) / n
    return coef, bool(np.max(np.abs(g)) < _GD_TOL)


def fit(variant: str, train_ds: Dataset, cfg: TrainConfig | None = None) -> ResponseModel:
    """Fit one benchmark response model on the training fold."""
    if variant == "lr":
        features = _design_matrix(train_ds, variant)
        gram = features.T @ features + 1e-8 * np.eye(features.shape[1])
        try:
            coef = np.linalg.solve(gram, features.T @ train_ds.y)
        except np.linalg.LinAlgError as exc:
            raise InvalidInputError("rank-deficient design beyond the ridge") from exc
        if not np.all(np.isfinite(coef)):
            raise InvalidInputError("rank-deficient design beyond the ridge")
        return LinearModel(float(coef[0]), coef[1:-1], float(coef[-1]))
    if variant == "logr":
        features = _design_matrix(train_ds, variant)
        coef, ok = _gd_logistic(features, train_ds.y)
        return LogisticModel(float(coef[0]), coef[1:-1], float(coef[-1]), ok)
    if variant == "lcm":
        features = _design_matrix(train_ds, variant)
        coef, ok = _gd_logistic(features, train_ds.y)
        d = train_ds.d
        return LogitChoiceModel(float(coef[0]), coef[1 : 1 + d], coef[1 + d :], ok)
    if variant == "plain":
        net, _ = plain_train(train_ds, cfg or TrainConfig())
        return PlainNetModel(net)
    if variant == "uni":
        levels = train_ds.design.level_array()
        means, counts = [], []
        for j in range(train_ds.design.m):
            mask = train_ds.arm == j
            if not mask.any():
                raise InvalidInputError(f"no training samples at level {levels[j]!r}")
            means.append(float(train_ds.y[mask].mean()))
            counts.append(int(mask.sum()))
        return UniformModel(tuple(float(v) for v in levels), tuple(means), tuple(counts))
    raise InvalidInputError(f"unknown benchmark variant {variant!r}; expected one of {VARIANTS}")


def predict(model: ResponseModel, x: np.ndarray, t: float) -> np.ndarray:
    return model.predict(x, float(t))


def plugin_ate(model: ResponseModel, x: np.ndarray, level: float) -> float:
    """Mean over covariates of predict(x, level) - predict(x, 0)."""
    x = np.atleast_2d(x)
    return float((model.predict(x, float(level)) - model.predict(x, 0.0)).mean())


def plugin_policy(
    model: ResponseModel,
    x: np.ndarray,
    candidates: Sequence[float],
    vp: ValueParams,
    t_max: float = 1.0,
):
    """Per-sample argmax of w*predict(x, a) - c*a over the candidate actions.

    The uniform model instead picks its single best level for everyone (it has
    no covariate channel and no values between levels).
    """
    cand = np.asarray(candidates, dtype=float)
    if cand.size == 0:
        raise InvalidInputError("need at least one candidate action")
    if np.any(np.diff(cand) <= 0):
        raise InvalidInputError("candidate actions must be strictly increasing")
    if isinstance(model, UniformModel):
        values = model.level_values(vp)
        return ConstantPolicy(float(model.levels[int(np.argmax(values))]), t_max)
    x = np.atleast_2d(x)
    vals = np.empty((x.shape[0], cand.size))
    for j, a in enumerate(cand):
        vals[:, j] = vp.w * model.predict(x, float(a)) - vp.c * a
    return IndexedTablePolicy(cand[np.argmax(vals, axis=1)], t_max)
