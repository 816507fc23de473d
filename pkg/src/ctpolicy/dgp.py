"""Synthetic and semi-synthetic data generation with a queryable ground truth.

Every ground truth exposes exact outcome probabilities, so experiments can
compute true policy values and regrets by Monte Carlo against the oracle
rather than against noisy outcomes.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Protocol, Union

import numpy as np

from .core import (
    Dataset,
    Design,
    InvalidInputError,
    ValueParams,
    poly_features_batch,
    substream,
    write_text_atomic,
)
from .nets import PlainNet, net_from_dict, net_to_dict, plain_prob_batch, sigmoid

# sigmoid(+-40) is within 4e-18 of {0, 1}; latents beyond this bound would
# silently saturate outcome probabilities, so they are rejected instead.
LATENT_BOUND = 40.0


class CovariateLaw(Protocol):
    d: int

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray: ...


@dataclass(frozen=True)
class UniformLaw:
    """I.i.d. uniform covariates on [low, high]^d (default [-1, 1]^d)."""

    d: int
    low: float = -1.0
    high: float = 1.0

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return rng.uniform(self.low, self.high, size=(n, self.d))


@dataclass(frozen=True)
class BinaryMixLaw:
    """First n_binary coordinates are +-1 fair coins, the rest uniform on [-1, 1].

    The binary block induces 2^n_binary exact covariate subgroups.
    """

    n_binary: int
    n_uniform: int = 0

    @property
    def d(self) -> int:
        return self.n_binary + self.n_uniform

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        bits = rng.integers(0, 2, size=(n, self.n_binary)) * 2.0 - 1.0
        if self.n_uniform == 0:
            return bits
        cont = rng.uniform(-1.0, 1.0, size=(n, self.n_uniform))
        return np.column_stack([bits, cont])


@dataclass(frozen=True)
class AffineTheta:
    """Serializable coefficient map theta(x) = intercepts + slopes @ x."""

    intercepts: np.ndarray  # (K*+1,)
    slopes: np.ndarray  # (K*+1, d)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return self.intercepts[None, :] + x @ self.slopes.T


@dataclass(frozen=True)
class SineLatent:
    """Serializable latent amp*sin(freq*t + phase) + x @ gamma + offset."""

    amp: float
    freq: float
    gamma: np.ndarray  # (d,)
    phase: float = 0.0
    offset: float = 0.0

    def __call__(self, x: np.ndarray, t: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        t = np.asarray(t, dtype=float)
        return self.amp * np.sin(self.freq * t + self.phase) + x @ self.gamma + self.offset


def _checked_prob(latent: np.ndarray, where: str) -> np.ndarray:
    if not np.all(np.isfinite(latent)):
        raise InvalidInputError(f"{where}: latent value is not finite")
    if np.any(np.abs(latent) > LATENT_BOUND):
        raise InvalidInputError(
            f"{where}: |latent| exceeds {LATENT_BOUND}; outcome probability would saturate"
        )
    return sigmoid(latent)


@dataclass(frozen=True)
class SigmoidPolyTruth:
    """Outcome probability sigmoid(theta(x) . (1, t, ..., t^K*))."""

    theta_fn: Callable[[np.ndarray], np.ndarray]  # (n, d) -> (n, K*+1)
    degree: int
    t_max: float = 1.0

    def prob(self, x: np.ndarray, ts: Union[float, np.ndarray]) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        ts = np.broadcast_to(np.asarray(ts, dtype=float), (x.shape[0],))
        _check_t_range(ts, self.t_max)
        theta = np.atleast_2d(self.theta_fn(x))
        tf = poly_features_batch(ts, self.degree)
        return _checked_prob(np.einsum("ij,ij->i", theta, tf), "sigmoid-poly truth")


@dataclass(frozen=True)
class SmoothLatentTruth:
    """Outcome probability sigmoid(latent(x, t)) for a smooth-in-t latent."""

    latent_fn: Callable[[np.ndarray, np.ndarray], np.ndarray]
    t_max: float = 1.0

    def prob(self, x: np.ndarray, ts: Union[float, np.ndarray]) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        ts = np.broadcast_to(np.asarray(ts, dtype=float), (x.shape[0],))
        _check_t_range(ts, self.t_max)
        return _checked_prob(np.asarray(self.latent_fn(x, ts), dtype=float), "smooth truth")


@dataclass(frozen=True)
class FittedNetTruth:
    """A frozen response net used as the data-generating oracle."""

    net: PlainNet
    t_max: float = 1.0

    def prob(self, x: np.ndarray, ts: Union[float, np.ndarray]) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        ts = np.broadcast_to(np.asarray(ts, dtype=float), (x.shape[0],))
        _check_t_range(ts, self.t_max)
        p = plain_prob_batch(self.net, x, ts)
        if np.any(p <= 0.0) or np.any(p >= 1.0):
            raise InvalidInputError("fitted-net truth: probability saturated outside (0, 1)")
        return p


GroundTruth = Union[SigmoidPolyTruth, SmoothLatentTruth, FittedNetTruth]


def _check_t_range(ts: np.ndarray, t_max: float) -> None:
    if np.any(ts < 0.0) or np.any(ts > t_max):
        raise InvalidInputError(f"treatment outside [0, {t_max}]")


def outcome_prob(gt: GroundTruth, x: np.ndarray, t: float) -> float:
    """Oracle outcome probability for a single (x, t); always in (0, 1)."""
    return float(gt.prob(np.asarray(x, dtype=float)[None, :], float(t))[0])


def generate(
    gt: GroundTruth,
    n: int,
    d: int,
    design: Design,
    covariate_law: CovariateLaw | None = None,
    seed: int = 0,
) -> Dataset:
    """Draw an experiment: x ~ law, arm ~ design.probs (independent of x), y ~ Bernoulli.

    Reproducible: identical (gt, n, seed) give a byte-identical dataset.
    """
    if n < 1:
        raise InvalidInputError("n must be >= 1")
    law = covariate_law or UniformLaw(d)
    if law.d != d:
        raise InvalidInputError(f"covariate law has d={law.d}, expected {d}")
    x = law.sample(substream(seed, "dgp", "x"), n)
    arm = substream(seed, "dgp", "arm").choice(design.m, size=n, p=design.prob_array())
    t = design.level_array()[arm]
    p = gt.prob(x, t)
    y = (substream(seed, "dgp", "y").random(n) < p).astype(float)
    return Dataset(x, t, y, design)


def true_value(
    gt: GroundTruth,
    policy,
    covariates: Union[np.ndarray, CovariateLaw],
    vp: ValueParams,
    mc_n: int = 100_000,
    seed: int = 0,
) -> tuple[float, float]:
    """Oracle policy value w*p(x, pi(x)) - c*pi(x), averaged by Monte Carlo.

    `covariates` is either a fixed (n, d) matrix (used as-is) or a law to draw
    mc_n points from. Returns (value, standard error).
    """
    if isinstance(covariates, np.ndarray):
        x = covariates
    else:
        if mc_n < 1:
            raise InvalidInputError("mc_n must be >= 1")
        x = covariates.sample(substream(seed, "dgp", "value-mc"), mc_n)
    a = policy.apply_batch(x)
    vals = vp.w * gt.prob(x, a) - vp.c * a
    se = float(vals.std(ddof=0) / math.sqrt(len(vals))) if len(vals) > 1 else 0.0
    return float(vals.mean()), se


def true_ate(
    gt: GroundTruth,
    level: float,
    covariates: Union[np.ndarray, CovariateLaw],
    mc_n: int = 100_000,
    seed: int = 0,
) -> tuple[float, float]:
    """Oracle average treatment effect E[p(x, level) - p(x, 0)]."""
    if isinstance(covariates, np.ndarray):
        x = covariates
    else:
        x = covariates.sample(substream(seed, "dgp", "ate-mc"), mc_n)
    diff = gt.prob(x, float(level)) - gt.prob(x, 0.0)
    se = float(diff.std(ddof=0) / math.sqrt(len(diff))) if len(diff) > 1 else 0.0
    return float(diff.mean()), se


def true_best_level(
    gt: GroundTruth, x: np.ndarray, grid: np.ndarray, vp: ValueParams
) -> tuple[float, float]:
    """Oracle argmax of w*p(x, a) - c*a over a grid; ties go to the smaller level."""
    levels, values = true_best_levels(gt, np.asarray(x, dtype=float)[None, :], grid, vp)
    return float(levels[0]), float(values[0])


def true_best_levels(
    gt: GroundTruth, x: np.ndarray, grid: np.ndarray, vp: ValueParams
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized oracle best level per row of x. Grid must be sorted ascending."""
    grid = np.asarray(grid, dtype=float)
    if grid.size == 0:
        raise InvalidInputError("grid must be non-empty")
    if np.any(np.diff(grid) < 0):
        raise InvalidInputError("grid must be sorted ascending")
    _check_t_range(grid, gt.t_max)
    x = np.atleast_2d(x)
    vals = np.empty((x.shape[0], grid.size))
    for j, a in enumerate(grid):
        vals[:, j] = vp.w * gt.prob(x, float(a)) - vp.c * a
    # argmax returns the first (smallest-level) maximizer
    best = np.argmax(vals, axis=1)
    return grid[best], vals[np.arange(x.shape[0]), best]


def pointwise_oracle_value(
    gt: GroundTruth, x: np.ndarray, grid: np.ndarray, vp: ValueParams
) -> float:
    """Mean over x of the per-point best value over the grid."""
    _, values = true_best_levels(gt, x, grid, vp)
    return float(values.mean())


# ---------------------------------------------------------------------------
# Standard synthetic constructions used by the experiment suite
# ---------------------------------------------------------------------------


def make_polynomial_truth(d: int = 4) -> SigmoidPolyTruth:
    """Default well-specified degree-3 truth with covariate-driven coefficients.

    Coefficients are affine in the first coordinates so the best action varies
    smoothly across users while probabilities stay well inside (0, 1) on
    [-1, 1]^d x [0, 1].
    """
    intercepts = np.array([-1.0, 4.0, -4.0, 0.8])
    slopes = np.zeros((4, d))
    slopes[0, 0] = 0.5
    slopes[1, 1 % d] = 1.6
    slopes[2, 2 % d] = -1.0
    if d > 3:
        slopes[3, 3] = 0.4
    return SigmoidPolyTruth(AffineTheta(intercepts, slopes), degree=3)


def make_degree1_truth(d: int = 4) -> SigmoidPolyTruth:
    """Exactly degree-1 truth: latent affine in t, used as a well-specified control.

    Coefficients put the net-benefit optimum strictly inside (0, 1) for every
    x, so the control exercises real estimation rather than a boundary push.
    """
    intercepts = np.array([0.2, 3.4])
    slopes = np.zeros((2, d))
    slopes[0, 0] = 0.6
    slopes[1, 1 % d] = 0.6
    return SigmoidPolyTruth(AffineTheta(intercepts, slopes), degree=1)


def make_sine_truth(d: int = 4, amp: float = 1.6, freq: float = 2.4) -> SmoothLatentTruth:
    """Smooth non-polynomial truth: latent amp*sin(freq*t) + gamma'x + offset.

    Holder-smooth in t and not exactly polynomial, so degree sweeps show the
    approximation trade-off; the value peak sits in the interior of [0, 1].
    """
    gamma = np.zeros(d)
    gamma[0] = 0.7
    if d > 1:
        gamma[1] = -0.4
    return SmoothLatentTruth(SineLatent(amp=amp, freq=freq, gamma=gamma, offset=-0.6))


def make_grouped_truth(n_binary: int = 4) -> SigmoidPolyTruth:
    """Degree-3 truth whose best arm differs across the 2^n_binary sign groups."""
    intercepts = np.array([-1.1, 3.6, -3.4, 0.6])
    slopes = np.zeros((4, n_binary))
    slopes[0, 0] = 0.45
    slopes[1, 1 % n_binary] = 1.1
    slopes[1, 2 % n_binary] = -0.7
    slopes[2, 3 % n_binary] = 0.9
    return SigmoidPolyTruth(AffineTheta(intercepts, slopes), degree=3)


# ---------------------------------------------------------------------------
# JSON round-trip for the parametric families
# ---------------------------------------------------------------------------


def truth_to_dict(gt: GroundTruth) -> dict:
    if isinstance(gt, SigmoidPolyTruth):
        if not isinstance(gt.theta_fn, AffineTheta):
            raise InvalidInputError("only affine coefficient maps are serializable")
        return {
            "variant": "sigmoid_poly",
            "degree": gt.degree,
            "t_max": gt.t_max,
            "intercepts": np.asarray(gt.theta_fn.intercepts).tolist(),
            "slopes": np.asarray(gt.theta_fn.slopes).tolist(),
        }
    if isinstance(gt, SmoothLatentTruth):
        if not isinstance(gt.latent_fn, SineLatent):
            raise InvalidInputError("only sine latents are serializable")
        f = gt.latent_fn
        return {
            "variant": "sine_latent",
            "t_max": gt.t_max,
            "amp": f.amp,
            "freq": f.freq,
            "phase": f.phase,
            "offset": f.offset,
            "gamma": np.asarray(f.gamma).tolist(),
        }
    if isinstance(gt, FittedNetTruth):
        return {"variant": "fitted_net", "t_max": gt.t_max, "net": net_to_dict(gt.net)}
    raise InvalidInputError(f"cannot serialize truth of type {type(gt).__name__}")


def truth_from_dict(payload: dict) -> GroundTruth:
    variant = payload.get("variant")
    if variant == "sigmoid_poly":
        theta = AffineTheta(
            np.asarray(payload["intercepts"], dtype=float),
            np.asarray(payload["slopes"], dtype=float),
        )
        return SigmoidPolyTruth(theta, int(payload["degree"]), float(payload.get("t_max", 1.0)))
    if variant == "sine_latent":
        latent = SineLatent(
            amp=float(payload["amp"]),
            freq=float(payload["freq"]),
            gamma=np.asarray(payload["gamma"], dtype=float),
            phase=float(payload.get("phase", 0.0)),
            offset=float(payload.get("offset", 0.0)),
        )
        return SmoothLatentTruth(latent, float(payload.get("t_max", 1.0)))
    if variant == "fitted_net":
        return FittedNetTruth(net_from_dict(payload["net"]), float(payload.get("t_max", 1.0)))
    raise InvalidInputError(f"unknown ground-truth variant {variant!r}")


def save_truth_json(gt: GroundTruth, path: str | Path) -> None:
    write_text_atomic(path, json.dumps(truth_to_dict(gt)) + "\n")


def load_truth_json(path: str | Path) -> GroundTruth:
    with open(path) as fh:
        return truth_from_dict(json.load(fh))
