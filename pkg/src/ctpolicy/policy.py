"""Policy representations and ERM learners.

Four families of treatment rules: a single level for everyone, a per-sample
(or per-group) chosen level, a clipped linear rule, and a neural rule with a
scaled-sigmoid output. The discrete families are learned by exact per-sample
argmax of the orthogonal score; the smooth families by gradient ascent on the
mean score with an analytic d(score)/d(action).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from .core import (
    Dataset,
    DivergenceError,
    GroupSpec,
    InvalidInputError,
    PolicyDomainError,
    ValueParams,
    group_key,
    group_keys,
    poly_deriv_batch,
    poly_features_batch,
    substream,
    write_text_atomic,
)
from .nets import MLP, StructuredNet, init_mlp, mlp_backward, mlp_raw, sigmoid, theta_batch
from .orthogonal import ScoreContext, correction_vectors, score_value_batch
from . import dgp


@dataclass(frozen=True)
class ConstantPolicy:
    a: float
    t_max: float = 1.0

    def __post_init__(self) -> None:
        if not (0.0 <= self.a <= self.t_max):
            raise InvalidInputError(f"constant action {self.a!r} outside [0, {self.t_max}]")

    def apply(self, x: np.ndarray) -> float:
        return self.a

    def apply_batch(self, x: np.ndarray) -> np.ndarray:
        return np.full(np.atleast_2d(x).shape[0], self.a)


@dataclass(frozen=True)
class LinearPolicy:
    """t = alpha'x + beta, hard-clipped into [0, t_max]."""

    alpha: np.ndarray
    beta: float
    t_max: float = 1.0

    def apply(self, x: np.ndarray) -> float:
        return float(self.apply_batch(np.asarray(x, dtype=float)[None, :])[0])

    def apply_batch(self, x: np.ndarray) -> np.ndarray:
        raw = np.atleast_2d(x) @ self.alpha + self.beta
        return np.clip(raw, 0.0, self.t_max)


@dataclass
class NeuralPolicy:
    """t = t_max * sigmoid(f(x)) for an MLP body f; smooth and range-safe."""

    body: MLP
    t_max: float = 1.0

    def apply(self, x: np.ndarray) -> float:
        return float(self.apply_batch(np.asarray(x, dtype=float)[None, :])[0])

    def apply_batch(self, x: np.ndarray) -> np.ndarray:
        raw, _ = mlp_raw(self.body, np.atleast_2d(x))
        return self.t_max * sigmoid(raw[:, 0])


@dataclass(frozen=True)
class IndexedTablePolicy:
    """Per-sample chosen levels, valid only for the dataset it was learned on."""

    actions: np.ndarray
    t_max: float = 1.0

    def apply(self, x: np.ndarray) -> float:
        raise PolicyDomainError(
            "per-sample table policies answer by sample index, not by covariate; "
            "use .actions or learn a per-group table"
        )

    def apply_batch(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        if x.shape[0] != self.actions.shape[0]:
            raise PolicyDomainError(
                f"table was learned on {self.actions.shape[0]} samples, queried with {x.shape[0]}"
            )
        return self.actions


@dataclass(frozen=True)
class GroupTablePolicy:
    """Chosen level per covariate group; unseen groups are errors, not guesses."""

    group_spec: GroupSpec
    table: dict
    t_max: float = 1.0

    def apply(self, x: np.ndarray) -> float:
        key = group_key(np.asarray(x, dtype=float), self.group_spec)
        if key not in self.table:
            raise PolicyDomainError(f"no action learned for group {key}")
        return float(self.table[key])

    def apply_batch(self, x: np.ndarray) -> np.ndarray:
        keys = group_keys(np.atleast_2d(x), self.group_spec)
        missing = next((k for k in keys if k not in self.table), None)
        if missing is not None:
            raise PolicyDomainError(f"no action learned for group {missing}")
        return np.array([self.table[k] for k in keys], dtype=float)


Policy = Union[ConstantPolicy, LinearPolicy, NeuralPolicy, IndexedTablePolicy, GroupTablePolicy]


@dataclass(frozen=True)
class PolicyOptConfig:
    """Settings for the gradient-ascent learners (linear and neural classes).

    A val_fraction slice of the scoring fold is held out of the ascent and
    used for early stopping and checkpoint selection; the score corrections
    carry heavy per-sample noise, and stopping on the optimized samples alone
    rewards chasing it.
    """

    learning_rate: float = 1e-2
    max_epochs: int = 150
    batch_size: int = 256
    patience: int = 5
    restarts: int = 5
    seed: int = 0
    hidden: tuple[int, ...] = (10, 10, 10)
    constant_grid: int = 101
    val_fraction: float = 0.2

    def __post_init__(self) -> None:
        if self.learning_rate <= 0 or self.max_epochs < 1 or self.restarts < 1:
            raise InvalidInputError("learning_rate, max_epochs, restarts must be positive")
        if not (0.0 <= self.val_fraction < 1.0):
            raise InvalidInputError("val_fraction must lie in [0, 1)")


# ---------------------------------------------------------------------------
# Discrete classes: exact per-sample argmax
# ---------------------------------------------------------------------------


def _candidate_score_matrix(
    ds: Dataset, thetas: np.ndarray, q: np.ndarray, levels: np.ndarray, ctx: ScoreContext
) -> np.ndarray:
    """Scores psi(z_i, a) for every sample i and candidate level a; (n, L)."""
    out = np.empty((ds.n, levels.size))
    for j, a in enumerate(levels):
        out[:, j] = score_value_batch(ds, float(a), thetas, ctx, q=q)
    return out


def learn_finite(
    eval_ds: Dataset,
    net: StructuredNet,
    ctx: ScoreContext,
    levels: Sequence[float] | None = None,
) -> IndexedTablePolicy:
    """Assign each sample the design level with the highest orthogonal score.

    Ties break toward the smaller level (argmax takes the first maximizer of
    an ascending candidate list).
    """
    lv = np.asarray(levels if levels is not None else ctx.design.levels, dtype=float)
    if lv.size == 0:
        raise InvalidInputError("need at least one candidate level")
    if np.any(np.diff(lv) <= 0):
        raise InvalidInputError("candidate levels must be strictly increasing")
    thetas = theta_batch(net, eval_ds.x)
    q = correction_vectors(eval_ds, thetas, ctx)
    scores = _candidate_score_matrix(eval_ds, thetas, q, lv, ctx)
    return IndexedTablePolicy(lv[np.argmax(scores, axis=1)], ctx.design.t_max)


def learn_grid(
    eval_ds: Dataset,
    net: StructuredNet,
    ctx: ScoreContext,
    grid_spec: Union[int, Sequence[float]] = 101,
) -> IndexedTablePolicy:
    """Like learn_finite but over an even discretization of [0, t_max]."""
    if isinstance(grid_spec, int):
        if grid_spec < 1:
            raise InvalidInputError("grid must have at least one point")
        grid = np.linspace(0.0, ctx.design.t_max, grid_spec)
    else:
        grid = np.asarray(grid_spec, dtype=float)
    return learn_finite(eval_ds, net, ctx, levels=grid)


# ---------------------------------------------------------------------------
# Smooth classes: gradient ascent with an analytic action derivative
# ---------------------------------------------------------------------------


def dscore_daction(
    thetas: np.ndarray, actions: np.ndarray, q: np.ndarray, ctx: ScoreContext
) -> np.ndarray:
    """d psi / d a at each sample.

    With u = theta.T(a), G = sigmoid(u), the plug-in part contributes
    w*G(1-G)*u' - c and the correction contributes
    -w*[G(1-G)(1-2G)*u'*(T(a).q) + G(1-G)*(T'(a).q)].
    """
    actions = np.asarray(actions, dtype=float)
    tf = poly_features_batch(actions, ctx.k)
    td = poly_deriv_batch(actions, ctx.k)
    u_prime = np.einsum("ij,ij->i", thetas, td)
    g = sigmoid(np.einsum("ij,ij->i", thetas, tf))
    gp = g * (1.0 - g)
    tq = np.einsum("ij,ij->i", tf, q)
    tdq = np.einsum("ij,ij->i", td, q)
    d_plug = ctx.vp.w * gp * u_prime - ctx.vp.c
    d_corr = ctx.vp.w * (gp * (1.0 - 2.0 * g) * u_prime * tq + gp * tdq)
    return d_plug - d_corr


def best_constant_action(
    ds: Dataset, thetas: np.ndarray, q: np.ndarray, ctx: ScoreContext, n_grid: int = 101
) -> tuple[float, float]:
    """Best single level by mean orthogonal score over an even grid."""
    grid = np.linspace(0.0, ctx.design.t_max, n_grid)
    means = [float(score_value_batch(ds, float(a), thetas, ctx, q=q).mean()) for a in grid]
    j = int(np.argmax(means))
    return float(grid[j]), means[j]


class _Ascent:
    """Adam on a list of arrays, maximizing (negated internally)."""

    def __init__(self, params: list[np.ndarray], lr: float):
        self.params = params
        self.lr = lr
        self.b1, self.b2, self.eps = 0.9, 0.999, 1e-8
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads_up: list[np.ndarray]) -> None:
        self.t += 1
        for p, g, m, v in zip(self.params, grads_up, self.m, self.v):
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            mhat = m / (1 - self.b1**self.t)
            vhat = v / (1 - self.b2**self.t)
            p += self.lr * mhat / (np.sqrt(vhat) + self.eps)


def _objective(ds: Dataset, thetas: np.ndarray, q: np.ndarray, actions: np.ndarray, ctx) -> float:
    return float(score_value_batch(ds, actions, thetas, ctx, q=q).mean())


def _plugin_mean(thetas: np.ndarray, actions: np.ndarray, ctx: ScoreContext) -> float:
    """Mean plug-in benefit w*G(theta, a) - c*a; the checkpoint-selection signal.

    The orthogonal correction has conditional mean near zero, so it moves the
    level of the objective, not the ranking of nearby policies; its per-sample
    spread is orders of magnitude larger than real value differences at desk
    scale. Checkpoints are therefore compared on the plug-in part alone, whose
    ranking differences are first-order unbiased under a shared theta_hat.
    """
    tf = poly_features_batch(actions, ctx.k)
    g = sigmoid(np.einsum("ij,ij->i", thetas, tf))
    return float((ctx.vp.w * g - ctx.vp.c * actions).mean())


def _val_split(n: int, frac: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    n_val = int(round(n * frac))
    perm = substream(seed, "policy", "valsplit", n).permutation(n)
    val, opt = perm[:n_val], perm[n_val:]
    if opt.size == 0:
        raise InvalidInputError("val_fraction leaves no samples to optimize on")
    if n_val == 0:
        val = opt
    return np.sort(opt), np.sort(val)


def learn_linear(
    eval_ds: Dataset,
    net: StructuredNet,
    ctx: ScoreContext,
    opt_cfg: PolicyOptConfig | None = None,
) -> LinearPolicy:
    """ERM over clipped linear rules by multi-restart gradient ascent.

    Ascent follows the orthogonal-score gradient; checkpoints are taken on the
    held-out slice's plug-in value (see _plugin_mean for why), and the final
    pick among the restart checkpoints and the exact best constant uses the
    full-fold orthogonal objective, so the returned objective dominates the
    best constant and the zero policy up to score noise.
    """
    cfg = opt_cfg or PolicyOptConfig()
    thetas = theta_batch(net, eval_ds.x)
    q = correction_vectors(eval_ds, thetas, ctx)
    t_max = ctx.design.t_max
    d = eval_ds.d
    a0, _ = best_constant_action(eval_ds, thetas, q, ctx, cfg.constant_grid)
    opt_idx, val_idx = _val_split(eval_ds.n, cfg.val_fraction, cfg.seed)
    ds_opt, th_opt, q_opt = eval_ds.subset(opt_idx), thetas[opt_idx], q[opt_idx]
    th_val, x_val = thetas[val_idx], eval_ds.x[val_idx]

    rng = substream(cfg.seed, "policy", "linear")
    candidates: list[tuple[np.ndarray, float]] = [(np.zeros(d), float(a0))]

    for restart in range(cfg.restarts):
        if restart == 0:
            alpha, beta = np.zeros(d), float(a0)
        else:
            alpha = rng.normal(0.0, 0.2 / math.sqrt(d), size=d)
            beta = float(rng.uniform(0.1, 0.9) * t_max)
        opt = _Ascent([alpha, np.array([beta])], cfg.learning_rate)
        alpha, beta_arr = opt.params
        stall, val_best = 0, -np.inf
        ckpt = (alpha.copy(), float(beta_arr[0]))
        for it in range(cfg.max_epochs):
            val_actions = np.clip(x_val @ alpha + beta_arr[0], 0.0, t_max)
            val_obj = _plugin_mean(th_val, val_actions, ctx)
            if not math.isfinite(val_obj):
                raise DivergenceError(f"linear policy objective diverged at iteration {it}")
            if val_obj > val_best + 1e-9:
                val_best, stall = val_obj, 0
                ckpt = (alpha.copy(), float(beta_arr[0]))
            else:
                stall += 1
                if stall > cfg.patience:
                    break
            raw = ds_opt.x @ alpha + beta_arr[0]
            actions = np.clip(raw, 0.0, t_max)
            dpsi = dscore_daction(th_opt, actions, q_opt, ctx)
            if not np.all(np.isfinite(dpsi)):
                raise DivergenceError(f"linear policy gradient diverged at iteration {it}")
            inside = ((raw > 0.0) & (raw < t_max)).astype(float)
            grad_a = dpsi * inside / ds_opt.n
            opt.step([ds_opt.x.T @ grad_a, np.array([grad_a.sum()])])
        candidates.append(ckpt)

    best, best_obj = None, -np.inf
    for alpha, beta in candidates:
        actions = np.clip(eval_ds.x @ alpha + beta, 0.0, t_max)
        obj = _objective(eval_ds, thetas, q, actions, ctx)
        if obj > best_obj:
            best, best_obj = (alpha, beta), obj
    return LinearPolicy(best[0], best[1], t_max)


def _constant_body(d: int, hidden: tuple[int, ...], a0: float, t_max: float, rng) -> MLP:
    """Body whose output starts exactly at logit(a0/t_max): last layer zeroed."""
    body = init_mlp([d, *hidden, 1], rng)
    body.weights[-1][:] = 0.0
    frac = min(max(a0 / t_max, 0.02), 0.98)
    body.biases[-1][:] = math.log(frac / (1.0 - frac))
    return body


def learn_neural(
    eval_ds: Dataset,
    net: StructuredNet,
    ctx: ScoreContext,
    opt_cfg: PolicyOptConfig | None = None,
) -> NeuralPolicy:
    """ERM over scaled-sigmoid MLP rules by mini-batch gradient ascent.

    Restart 0 is an exact constant at the best grid level (zeroed output
    layer); later restarts are random bodies re-biased to the same level.
    Checkpoint selection and final pick follow the same scheme as the linear
    learner: plug-in value on the held-out slice for checkpoints, full-fold
    orthogonal objective for the final choice among checkpoints and the exact
    best constant.
    """
    cfg = opt_cfg or PolicyOptConfig()
    thetas = theta_batch(net, eval_ds.x)
    q = correction_vectors(eval_ds, thetas, ctx)
    t_max = ctx.design.t_max
    a0, _ = best_constant_action(eval_ds, thetas, q, ctx, cfg.constant_grid)
    opt_idx, val_idx = _val_split(eval_ds.n, cfg.val_fraction, cfg.seed)
    ds_opt, th_opt, q_opt = eval_ds.subset(opt_idx), thetas[opt_idx], q[opt_idx]
    th_val, x_val = thetas[val_idx], eval_ds.x[val_idx]
    n_opt = ds_opt.n

    candidates = [_constant_body(eval_ds.d, cfg.hidden, a0, t_max, substream(cfg.seed, "policy", "neural", "c"))]
    for restart in range(cfg.restarts):
        rng = substream(cfg.seed, "policy", "neural", restart)
        if restart == 0:
            body = _constant_body(eval_ds.d, cfg.hidden, a0, t_max, rng)
        else:
            body = init_mlp([eval_ds.d, *cfg.hidden, 1], rng)
            body.weights[-1] *= 0.1
            frac = min(max(a0 / t_max, 0.02), 0.98)
            body.biases[-1][:] = math.log(frac / (1.0 - frac))
        opt = _Ascent(body.params(), cfg.learning_rate)
        stall, val_best = 0, -np.inf
        ckpt = body.copy()
        for epoch in range(cfg.max_epochs):
            raw, _ = mlp_raw(body, x_val)
            val_obj = _plugin_mean(th_val, t_max * sigmoid(raw[:, 0]), ctx)
            if not math.isfinite(val_obj):
                raise DivergenceError(f"neural policy objective diverged at epoch {epoch}")
            if val_obj > val_best + 1e-9:
                val_best, stall = val_obj, 0
                ckpt = body.copy()
            else:
                stall += 1
                if stall > cfg.patience:
                    break
            order = substream(cfg.seed, "policy", "neural", restart, "shuffle", epoch).permutation(n_opt)
            for start in range(0, n_opt, cfg.batch_size):
                b = order[start : start + cfg.batch_size]
                raw, cache = mlp_raw(body, ds_opt.x[b])
                acts = t_max * sigmoid(raw[:, 0])
                dpsi = dscore_daction(th_opt[b], acts, q_opt[b], ctx)
                if not np.all(np.isfinite(dpsi)):
                    raise DivergenceError(f"neural policy gradient diverged at epoch {epoch}")
                d_raw = (dpsi * t_max * (acts / t_max) * (1.0 - acts / t_max) / b.size)[:, None]
                gw, gb, _ = mlp_backward(body, cache, d_raw)
                opt.step(gw + gb)
        candidates.append(ckpt)

    best_body, best_obj = None, -np.inf
    for body in candidates:
        raw, _ = mlp_raw(body, eval_ds.x)
        obj = _objective(eval_ds, thetas, q, t_max * sigmoid(raw[:, 0]), ctx)
        if obj > best_obj:
            best_body, best_obj = body, obj
    return NeuralPolicy(best_body, t_max)


# ---------------------------------------------------------------------------
# Regret against a ground-truth oracle
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RegretResult:
    value: float
    optimal_value: float
    regret: float
    mpr: float | None  # percent; None when optimal_value <= 0


def regret(
    policy,
    gt,
    vp: ValueParams,
    covariates,
    optimal_value: float,
    mc_n: int = 100_000,
    seed: int = 0,
) -> RegretResult:
    """Oracle value gap against a supplied in-class optimal value.

    MPR is regret as a percentage of the optimal value; undefined (None) when
    the optimal value is not positive, in which case only the absolute gap is
    meaningful.
    """
    value, _ = dgp.true_value(gt, policy, covariates, vp, mc_n=mc_n, seed=seed)
    gap = optimal_value - value
    mpr = (gap / optimal_value * 100.0) if optimal_value > 0 else None
    return RegretResult(value, float(optimal_value), float(gap), mpr)


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def policy_to_dict(policy) -> dict:
    if isinstance(policy, ConstantPolicy):
        return {"variant": "constant", "a": policy.a, "t_max": policy.t_max}
    if isinstance(policy, LinearPolicy):
        return {
            "variant": "linear",
            "alpha": np.asarray(policy.alpha).tolist(),
            "beta": policy.beta,
            "t_max": policy.t_max,
        }
    if isinstance(policy, NeuralPolicy):
        from .nets import _mlp_to_dict

        return {"variant": "neural", "body": _mlp_to_dict(policy.body), "t_max": policy.t_max}
    if isinstance(policy, IndexedTablePolicy):
        return {
            "variant": "indexed_table",
            "actions": np.asarray(policy.actions).tolist(),
            "t_max": policy.t_max,
        }
    if isinstance(policy, GroupTablePolicy):
        return {
            "variant": "group_table",
            "group_spec": [[idx, list(edges)] for idx, edges in policy.group_spec],
            "table": {"|".join(map(str, k)): v for k, v in sorted(policy.table.items())},
            "t_max": policy.t_max,
        }
    raise InvalidInputError(f"cannot serialize policy of type {type(policy).__name__}")


def policy_from_dict(payload: dict):
    variant = payload.get("variant")
    if variant == "constant":
        return ConstantPolicy(float(payload["a"]), float(payload["t_max"]))
    if variant == "linear":
        return LinearPolicy(
            np.asarray(payload["alpha"], dtype=float), float(payload["beta"]), float(payload["t_max"])
        )
    if variant == "neural":
        from .nets import _mlp_from_dict

        return NeuralPolicy(_mlp_from_dict(payload["body"]), float(payload["t_max"]))
    if variant == "indexed_table":
        return IndexedTablePolicy(np.asarray(payload["actions"], dtype=float), float(payload["t_max"]))
    if variant == "group_table":
        spec = tuple((int(idx), tuple(float(e) for e in edges)) for idx, edges in payload["group_spec"])
        table = {
            tuple(int(v) for v in k.split("|")): float(a) for k, a in payload["table"].items()
        }
        return GroupTablePolicy(spec, table, float(payload["t_max"]))
    raise InvalidInputError(f"unknown policy variant {variant!r}")


def save_policy_json(policy, path: str | Path) -> None:
    write_text_atomic(path, json.dumps(policy_to_dict(policy)) + "\n")


def load_policy_json(path: str | Path):
    with open(path) as fh:
        return policy_from_dict(json.load(fh))
