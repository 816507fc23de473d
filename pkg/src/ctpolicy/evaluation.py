"""Experiment protocols and metrics at desk scale.

Each experiment draws its own data from a ground-truth oracle (or consumes a
real dataset where noted), runs the full pipeline, and emits a report whose
aggregates recompute exactly from its rows. All randomness descends from one
seed through named substreams, so a (config, seed) pair pins every number.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import t as student_t

from . import benchmarks, dgp, nets, orthogonal, policy as pol
from .core import (
    Dataset,
    Design,
    GroupSpec,
    IdentifiabilityError,
    InvalidInputError,
    ValueParams,
    config_hash,
    group_keys,
    split,
    substream,
    write_text_atomic,
)

FINE_GRID_POINTS = 201

# Treatment-coverage level sets on the rescaled [0, 1] axis, keyed by span.
COVERAGE_LEVEL_SETS: dict[str, tuple[float, ...]] = {
    "0.25": (0.0, 0.068, 0.128, 0.168, 0.25),
    "0.50": (0.0, 0.128, 0.268, 0.358, 0.5),
    "0.75": (0.0, 0.178, 0.358, 0.538, 0.75),
    "1.00": (0.0, 0.268, 0.538, 0.718, 1.0),
}

DEFAULT_LEVELS = (0.0, 0.178, 0.358, 0.538, 0.718)


def substream_int(seed: int, *names: object) -> int:
    """A child seed (not a generator) for components that reseed internally."""
    return int(substream(seed, *names).integers(0, 2**31 - 1))


@dataclass(frozen=True)
class PipelineConfig:
    """One place for the knobs every experiment shares."""

    k: int = 3
    loss: str = "bce"
    vp: ValueParams = field(default_factory=ValueParams)
    levels: tuple[float, ...] = DEFAULT_LEVELS
    t_max: float = 1.0
    n: int = 10_000
    d: int = 4
    seed: int = 0
    train_epochs: int = 25
    train_lr: float = 3e-3
    train_hidden: tuple[int, ...] = (32, 16, 8)
    train_patience: int = 5
    policy_epochs: int = 60
    policy_lr: float = 1e-2
    policy_restarts: int = 2
    standardize: bool = False
    ridge: float = 1e-8

    def design(self, levels: Sequence[float] | None = None) -> Design:
        return Design.uniform(tuple(levels) if levels is not None else self.levels, self.t_max)

    def train_config(self, seed: int) -> nets.TrainConfig:
        return nets.TrainConfig(
            loss=self.loss,
            learning_rate=self.train_lr,
            epochs=self.train_epochs,
            hidden=self.train_hidden,
            patience=self.train_patience,
            seed=seed,
        )

    def policy_config(self, seed: int) -> pol.PolicyOptConfig:
        return pol.PolicyOptConfig(
            learning_rate=self.policy_lr,
            max_epochs=self.policy_epochs,
            restarts=self.policy_restarts,
            seed=seed,
        )

    def context(self, design: Design) -> orthogonal.ScoreContext:
        return orthogonal.ScoreContext(design, self.loss, self.vp, self.k, self.ridge)

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "loss": self.loss,
            "w": self.vp.w,
            "c": self.vp.c,
            "levels": list(self.levels),
            "t_max": self.t_max,
            "n": self.n,
            "d": self.d,
            "seed": self.seed,
            "train_epochs": self.train_epochs,
            "train_lr": self.train_lr,
            "train_hidden": list(self.train_hidden),
            "train_patience": self.train_patience,
            "policy_epochs": self.policy_epochs,
            "policy_lr": self.policy_lr,
            "policy_restarts": self.policy_restarts,
            "standardize": self.standardize,
            "ridge": self.ridge,
        }


def _metadata(cfg: PipelineConfig, extra: dict | None = None) -> dict:
    meta = {"seed": cfg.seed, "n": cfg.n, "k": cfg.k, "config_hash": config_hash(cfg.to_dict())}
    if extra:
        meta.update(extra)
    return meta


@dataclass
class Report:
    """Rows plus aggregates plus run metadata; CSV/JSON emittable."""

    kind: str
    columns: tuple[str, ...]
    rows: list[tuple]
    aggregates: dict
    metadata: dict

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "columns": list(self.columns),
            "rows": [list(r) for r in self.rows],
            "aggregates": self.aggregates,
            "metadata": self.metadata,
        }

    def write_json(self, path: str | Path) -> None:
        write_text_atomic(path, json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    def write_csv(self, path: str | Path) -> None:
        lines = [",".join(self.columns)]
        for row in self.rows:
            lines.append(",".join(_csv_cell(v) for v in row))
        write_text_atomic(path, "\n".join(lines) + "\n")


def _csv_cell(v) -> str:
    if isinstance(v, float):
        return "%.17g" % v
    return str(v)


# ---------------------------------------------------------------------------
# Ground-truth treatment effects from raw experimental arms
# ---------------------------------------------------------------------------


def ground_truth_ate(ds: Dataset, level: float) -> tuple[float, float]:
    """Difference in mean outcomes, treated level vs control, with pooled-variance SE.

    Equals the dummy-regression coefficient under randomization.
    """
    lv = ds.design.level_array()
    j = int(np.argmin(np.abs(lv - level)))
    if abs(lv[j] - level) > 1e-12:
        raise InvalidInputError(f"{level!r} is not a design level")
    if lv[0] != 0.0:
        raise InvalidInputError("design has no control arm at level 0")
    y1 = ds.y[ds.arm == j]
    y0 = ds.y[ds.arm == 0]
    if y1.size == 0 or y0.size == 0:
        raise InvalidInputError("both the treated arm and the control arm need samples")
    n1, n0 = y1.size, y0.size
    pooled = ((n1 - 1) * y1.var(ddof=1) + (n0 - 1) * y0.var(ddof=1)) / (n1 + n0 - 2)
    se = math.sqrt(pooled * (1.0 / n1 + 1.0 / n0))
    return float(y1.mean() - y0.mean()), se


# ---------------------------------------------------------------------------
# Shared pipeline pieces
# ---------------------------------------------------------------------------


def _fit_stage1(train_ds: Dataset, cfg: PipelineConfig, seed: int) -> nets.StructuredNet:
    net, _ = nets.structured_train(train_ds, cfg.k, cfg.train_config(seed))
    return net


def _fit_benchmark(method: str, train_ds: Dataset, cfg: PipelineConfig, seed: int):
    return benchmarks.fit(method, train_ds, cfg.train_config(seed))


def _learn_policy(
    klass: str,
    infer_ds: Dataset,
    net: nets.StructuredNet,
    ctx: orthogonal.ScoreContext,
    cfg: PipelineConfig,
    seed: int,
):
    if klass == "finite":
        return pol.learn_finite(infer_ds, net, ctx)
    if klass == "grid":
        return pol.learn_grid(infer_ds, net, ctx, 101)
    if klass == "linear":
        return pol.learn_linear(infer_ds, net, ctx, cfg.policy_config(seed))
    if klass == "neural":
        return pol.learn_neural(infer_ds, net, ctx, cfg.policy_config(seed))
    raise InvalidInputError(f"unknown policy class {klass!r}")


def _plugin_learn_policy(klass: str, model, x: np.ndarray, cfg: PipelineConfig):
    """Benchmark policy for a class: plug-in argmax over the class's action menu."""
    if klass == "finite" or isinstance(model, benchmarks.UniformModel):
        return benchmarks.plugin_policy(model, x, cfg.levels, cfg.vp, cfg.t_max)
    grid = np.linspace(0.0, cfg.t_max, 101)
    return benchmarks.plugin_policy(model, x, grid, cfg.vp, cfg.t_max)


def oracle_class_value(
    klass: str,
    gt,
    x: np.ndarray,
    cfg: PipelineConfig,
    seed: int = 0,
) -> float:
    """In-class optimal value on a fixed covariate sample, by brute force.

    Per-sample classes (finite, grid) scan their action menus exactly; the
    neural class is scored against the pointwise best over a fine grid (the
    class is flexible enough that this is its effective optimum); the linear
    class uses a direct oracle-value ascent over (alpha, beta) seeded from the
    best constant.
    """
    if klass == "finite":
        return dgp.pointwise_oracle_value(gt, x, np.asarray(cfg.levels), cfg.vp)
    if klass in ("grid", "neural"):
        grid = np.linspace(0.0, cfg.t_max, 101 if klass == "grid" else FINE_GRID_POINTS)
        return dgp.pointwise_oracle_value(gt, x, grid, cfg.vp)
    if klass == "linear":
        return _oracle_linear_value(gt, x, cfg, seed)
    raise InvalidInputError(f"unknown policy class {klass!r}")


def _oracle_linear_value(gt, x: np.ndarray, cfg: PipelineConfig, seed: int) -> float:
    """Best clipped-linear policy value on x by multi-restart finite-difference ascent."""
    grid = np.linspace(0.0, cfg.t_max, 101)
    level_means = np.array(
        [float((cfg.vp.w * gt.prob(x, float(a)) - cfg.vp.c * a).mean()) for a in grid]
    )
    rng = substream(seed, "evaluation", "oracle-linear")
    d = x.shape[1]
    best = float(level_means.max())
    h = 1e-3
    for restart in range(4):
        if restart == 0:
            params = np.concatenate([np.zeros(d), [float(grid[int(np.argmax(level_means))])]])
        else:
            alpha = rng.normal(0.0, 0.3 / math.sqrt(d), size=d)
            beta = float(rng.uniform(0.2, 0.8) * cfg.t_max)
            params = np.concatenate([alpha, [beta]])

        def value(p: np.ndarray) -> float:
            a = np.clip(x @ p[:-1] + p[-1], 0.0, cfg.t_max)
            return float((cfg.vp.w * gt.prob(x, a) - cfg.vp.c * a).mean())

        cur = value(params)
        step = 0.05
        for _ in range(200):
            g = np.empty_like(params)
            for i in range(params.size):
                up = params.copy()
                dn = params.copy()
                up[i] += h
                dn[i] -= h
                g[i] = (value(up) - value(dn)) / (2 * h)
            nxt = params + step * g
            nv = value(nxt)
            if nv > cur + 1e-9:
                params, cur = nxt, nv
            else:
                step *= 0.5
                if step < 1e-4:
                    break
        best = max(best, cur)
    return best


# ---------------------------------------------------------------------------
# ATE recovery (masked-arm cross-evaluation)
# ---------------------------------------------------------------------------

ATE_METHODS = ("ortho", "lr", "logr", "lcm", "plain")


def ate_recovery_run(
    source,
    masked_level: float,
    cfg: PipelineConfig,
    methods: Sequence[str] = ATE_METHODS,
    seed: int | None = None,
) -> list[tuple]:
    """Mask one treated arm, train without it, recover its effect, score APE.

    `source` is a ground truth (synthetic mode: data drawn here, truth from the
    oracle) or a Dataset (data mode: truth from the masked arm's difference in
    means). Returns rows (method, masked_level, estimate, truth, ape).
    """
    seed = cfg.seed if seed is None else seed
    if isinstance(source, Dataset):
        full = source
        design = full.design
        truth, _ = ground_truth_ate(full, masked_level)
    else:
        design = cfg.design()
        full = dgp.generate(source, cfg.n, cfg.d, design, seed=substream_int(seed, "ate", "gen"))
        truth, _ = dgp.true_ate(source, masked_level, full.x)

    lv = design.level_array()
    j = int(np.argmin(np.abs(lv - masked_level)))
    if abs(lv[j] - masked_level) > 1e-12 or j == 0:
        raise InvalidInputError("masked level must be a treated design level")
    keep_levels = tuple(float(v) for i, v in enumerate(lv) if i != j)
    if len(keep_levels) < cfg.k + 1:
        raise IdentifiabilityError(
            f"masking leaves {len(keep_levels)} levels, K={cfg.k} needs {cfg.k + 1}"
        )
    reduced = Design.uniform(keep_levels, design.t_max)
    rest = full.subset(full.arm != j).with_design(reduced)
    train_ds, infer_ds = split(rest, (0.5, 0.5), seed=substream_int(seed, "ate", "split"))

    rows: list[tuple] = []
    ctx = cfg.context(reduced)
    for method in methods:
        if method == "ortho":
            net = _fit_stage1(train_ds, cfg, substream_int(seed, "ate", "fit"))
            est = orthogonal.estimate_ate(infer_ds, masked_level, net, ctx).point
        else:
            model = _fit_benchmark(method, train_ds, cfg, substream_int(seed, "ate", method))
            est = benchmarks.plugin_ate(model, infer_ds.x, masked_level)
        ape = abs(est - truth) / abs(truth) if truth != 0 else float("inf")
        rows.append((method, float(masked_level), float(est), float(truth), float(ape)))
    return rows


def ate_recovery_experiment(
    source,
    cfg: PipelineConfig,
    methods: Sequence[str] = ATE_METHODS,
    masked_levels: Sequence[float] | None = None,
    n_seeds: int = 1,
) -> Report:
    """Masked-arm recovery over every treated level and seed; MAPE/MSE/MAE per method."""
    if masked_levels is not None:
        masked = tuple(masked_levels)
    elif isinstance(source, Dataset):
        masked = tuple(source.design.levels[1:])
    else:
        masked = tuple(cfg.levels[1:])
    rows: list[tuple] = []
    for s in range(n_seeds):
        seed = substream_int(cfg.seed, "ate-recovery", s)
        for level in masked:
            for row in ate_recovery_run(source, level, cfg, methods, seed=seed):
                rows.append((s,) + row)
    aggregates: dict = {}
    for method in methods:
        sub = [r for r in rows if r[1] == method]
        apes = np.array([r[5] for r in sub])
        errs = np.array([r[3] - r[4] for r in sub])
        aggregates[method] = {
            "mape": float(apes.mean()),
            "mse": float((errs**2).mean()),
            "mae": float(np.abs(errs).mean()),
        }
    return Report(
        kind="ate-recovery",
        columns=("seed_index", "method", "masked_level", "estimate", "truth", "ape"),
        rows=rows,
        aggregates=aggregates,
        metadata=_metadata(cfg, {"n_seeds": n_seeds, "masked_levels": list(masked)}),
    )


# ---------------------------------------------------------------------------
# Discrete-class regret over covariate subgroups
# ---------------------------------------------------------------------------

DISCRETE_METHODS = ("ortho", "lr", "logr", "lcm", "plain", "uni", "random")


def discrete_regret_experiment(
    source,
    group_spec: GroupSpec,
    cfg: PipelineConfig,
    methods: Sequence[str] = DISCRETE_METHODS,
    covariate_law: dgp.CovariateLaw | None = None,
    min_arm_count: int = 50,
    seed: int | None = None,
) -> Report:
    """Group-split protocol: train on half the groups, pick levels for the rest.

    Outcomes on the inference groups are treated as unobserved, so every
    method chooses by covariates alone (ours through the personalized plug-in
    value at the fitted coefficients, aggregated within group). Ground truth
    per group is the oracle best arm in synthetic mode, or the empirical
    per-arm means in data mode (groups missing an arm beyond min_arm_count
    are dropped and counted).
    """
    seed = cfg.seed if seed is None else seed
    synthetic = not isinstance(source, Dataset)
    if synthetic:
        design = cfg.design()
        law = covariate_law or dgp.BinaryMixLaw(cfg.d)
        full = dgp.generate(source, cfg.n, law.d, design, law, seed=substream_int(seed, "dr", "gen"))
    else:
        full = source
        design = full.design

    keys = group_keys(full.x, group_spec)
    uniq = sorted(set(keys))
    if len(uniq) < 2:
        raise InvalidInputError("need at least two covariate groups")
    key_to_gid = {k: i for i, k in enumerate(uniq)}
    gid = np.array([key_to_gid[k] for k in keys])

    order = substream(seed, "dr", "groupsplit").permutation(len(uniq))
    train_groups = set(order[: len(uniq) // 2].tolist())
    infer_groups = sorted(set(range(len(uniq))) - train_groups)
    train_ds = full.subset(np.isin(gid, list(train_groups)))

    # per inference group: the value of every arm, by oracle or empirical means
    lv = design.level_array()
    dropped = 0
    group_rows = []
    for g in infer_groups:
        mask = gid == g
        xg = full.x[mask]
        if synthetic:
            arm_values = np.array(
                [float((cfg.vp.w * source.prob(xg, float(a)) - cfg.vp.c * a).mean()) for a in lv]
            )
        else:
            means = np.full(design.m, np.nan)
            ok = True
            for j in range(design.m):
                sel = mask & (full.arm == j)
                if sel.sum() < min_arm_count:
                    ok = False
                    break
                means[j] = full.y[sel].mean()
            if not ok:
                dropped += 1
                continue
            arm_values = cfg.vp.w * means - cfg.vp.c * lv
        group_rows.append((g, uniq[g], int(mask.sum()), arm_values))

    if not group_rows:
        raise InvalidInputError("no evaluable inference groups")

    net = None
    models: dict[str, object] = {}
    for method in methods:
        if method == "ortho":
            net = _fit_stage1(train_ds, cfg, substream_int(seed, "dr", "fit"))
        elif method == "uni":
            models[method] = benchmarks.fit("uni", train_ds)
        elif method != "random":
            models[method] = _fit_benchmark(method, train_ds, cfg, substream_int(seed, "dr", method))

    choices: dict[str, dict[int, int]] = {m: {} for m in methods}
    rng_guess = substream(seed, "dr", "random-guess")
    for g, key, size, arm_values in group_rows:
        xg = full.x[gid == g]
        for method in methods:
            if method == "ortho":
                vals = [
                    float((cfg.vp.w * nets.prob_batch(net, xg, np.full(len(xg), a)) - cfg.vp.c * a).mean())
                    for a in lv
                ]
                choices[method][g] = int(np.argmax(vals))
            elif method == "uni":
                choices[method][g] = int(np.argmax(models[method].level_values(cfg.vp)))
            elif method == "random":
                choices[method][g] = int(rng_guess.integers(0, design.m))
            else:
                vals = [
                    float((cfg.vp.w * models[method].predict(xg, float(a)) - cfg.vp.c * a).mean())
                    for a in lv
                ]
                choices[method][g] = int(np.argmax(vals))

    rows: list[tuple] = []
    aggregates: dict = {}
    total_size = sum(size for _, _, size, _ in group_rows)
    for method in methods:
        prs, hits, whits = [], [], 0.0
        for g, key, size, arm_values in group_rows:
            best = int(np.argmax(arm_values))
            chosen = choices[method][g]
            vstar = arm_values[best]
            pr = float((vstar - arm_values[chosen]) / vstar * 100.0) if vstar > 0 else float("nan")
            hit = chosen == best
            prs.append(pr)
            hits.append(hit)
            whits += size * hit
            rows.append(
                (
                    method,
                    "|".join(map(str, key)),
                    size,
                    float(lv[chosen]),
                    float(lv[best]),
                    float(arm_values[chosen]),
                    float(vstar),
                    pr,
                )
            )
        aggregates[method] = {
            "mpr": float(np.nanmean(prs)),
            "accuracy": float(np.mean(hits)),
            "weighted_accuracy": float(whits / total_size),
        }
    return Report(
        kind="discrete-regret",
        columns=(
            "method", "group", "group_size", "chosen_level", "best_level",
            "chosen_value", "best_value", "pct_regret",
        ),
        rows=rows,
        aggregates=aggregates,
        metadata=_metadata(
            cfg,
            {"n_groups_infer": len(group_rows), "n_groups_dropped": dropped, "methods": list(methods)},
        ),
    )


# ---------------------------------------------------------------------------
# Continuous-class regret with bootstrap resamples and subgroup panels
# ---------------------------------------------------------------------------

POLICY_CLASSES = ("finite", "grid", "linear", "neural")
CONTINUOUS_METHODS = ("ortho", "lr", "logr", "lcm", "plain", "uni")


def continuous_regret_experiment(
    gt,
    cfg: PipelineConfig,
    classes: Sequence[str] = POLICY_CLASSES,
    methods: Sequence[str] = CONTINUOUS_METHODS,
    n_bootstrap: int = 30,
    segment_coords: tuple[int, int] = (0, 1),
    covariate_law: dgp.CovariateLaw | None = None,
    seed: int | None = None,
) -> Report:
    """Bootstrap comparison of learned-policy regret per class and per method.

    One training fold fixes the nuisance net and the benchmark response
    surfaces. Each bootstrap resample redraws the inference fold (where the
    smooth policy classes are optimized) and the evaluation fold (where the
    oracle scores everything against the in-class optimum). The per-sample
    classes (finite, grid) are argmax rules, so the rule is applied directly
    on the evaluation resample's records. Segment rows (neural class) split
    the fixed evaluation fold at the medians of two designated coordinates.
    p-values are paired t over resamples, ours versus each benchmark.
    """
    seed = cfg.seed if seed is None else seed
    if n_bootstrap < 1:
        raise InvalidInputError("need at least one bootstrap resample")
    design = cfg.design()
    ctx = cfg.context(design)
    law = covariate_law or dgp.UniformLaw(cfg.d)
    full = dgp.generate(gt, cfg.n, law.d, design, law, seed=substream_int(seed, "cr", "gen"))
    train_ds, infer_ds, eval_ds = split(full, (0.5, 0.25, 0.25), seed=substream_int(seed, "cr", "split"))

    net = _fit_stage1(train_ds, cfg, substream_int(seed, "cr", "fit"))
    models = {
        m: (
            benchmarks.fit("uni", train_ds)
            if m == "uni"
            else _fit_benchmark(m, train_ds, cfg, substream_int(seed, "cr", m))
        )
        for m in methods
        if m != "ortho"
    }

    grid = np.linspace(0.0, cfg.t_max, FINE_GRID_POINTS)
    seg_oracle_actions, seg_oracle_values = dgp.true_best_levels(gt, eval_ds.x, grid, cfg.vp)
    track_segments = "neural" in classes
    mprs: dict[tuple[str, str], list[float]] = {(c, m): [] for c in classes for m in methods}
    seg_actions: dict[str, list[np.ndarray]] = {m: [] for m in methods}
    seg_values: dict[str, list[np.ndarray]] = {m: [] for m in methods}

    for b in range(n_bootstrap):
        rs = substream(seed, "cr", "boot", b)
        infer_b = infer_ds.subset(np.sort(rs.integers(0, infer_ds.n, size=infer_ds.n)))
        eval_b = eval_ds.subset(np.sort(rs.integers(0, eval_ds.n, size=eval_ds.n)))
        for klass in classes:
            vstar = oracle_class_value(klass, gt, eval_b.x, cfg, seed=seed)
            for method in methods:
                fixed_actions = None
                if method == "ortho":
                    if klass in ("finite", "grid"):
                        learned = _learn_policy(klass, eval_b, net, ctx, cfg, 0)
                        actions = learned.actions
                    else:
                        learned = _learn_policy(
                            klass, infer_b, net, ctx, cfg, substream_int(seed, "cr", "pol", b, klass)
                        )
                        actions = learned.apply_batch(eval_b.x)
                        fixed_actions = learned.apply_batch(eval_ds.x)
                else:
                    learned = _plugin_learn_policy(klass, models[method], eval_b.x, cfg)
                    if isinstance(learned, pol.IndexedTablePolicy):
                        actions = learned.actions
                    else:
                        actions = learned.apply_batch(eval_b.x)
                        fixed_actions = learned.apply_batch(eval_ds.x)
                vals = cfg.vp.w * gt.prob(eval_b.x, actions) - cfg.vp.c * actions
                value = float(vals.mean())
                mpr = (vstar - value) / vstar * 100.0 if vstar > 0 else float("nan")
                mprs[(klass, method)].append(float(mpr))
                if track_segments and klass == "neural":
                    if fixed_actions is None:
                        fixed = _plugin_learn_policy(klass, models[method], eval_ds.x, cfg)
                        fixed_actions = (
                            fixed.actions
                            if isinstance(fixed, pol.IndexedTablePolicy)
                            else fixed.apply_batch(eval_ds.x)
                        )
                    fixed_vals = cfg.vp.w * gt.prob(eval_ds.x, fixed_actions) - cfg.vp.c * fixed_actions
                    seg_actions[method].append(np.asarray(fixed_actions))
                    seg_values[method].append(np.asarray(fixed_vals))

    rows: list[tuple] = []
    aggregates: dict = {"classes": {}, "segments": {}, "p_values": {}}
    for klass in classes:
        aggregates["classes"][klass] = {}
        for method in methods:
            arr = np.asarray(mprs[(klass, method)])
            rows.append((klass, method, float(np.nanmean(arr)), float(np.nanstd(arr))))
            aggregates["classes"][klass][method] = float(np.nanmean(arr))
        if "ortho" in methods:
            ours = np.asarray(mprs[(klass, "ortho")])
            aggregates["p_values"][klass] = {
                method: _paired_p_value(np.asarray(mprs[(klass, method)]), ours)
                for method in methods
                if method != "ortho"
            }

    if track_segments and any(seg_actions[m] for m in methods):
        med = np.median(eval_ds.x[:, list(segment_coords)], axis=0)
        lo0 = eval_ds.x[:, segment_coords[0]] <= med[0]
        lo1 = eval_ds.x[:, segment_coords[1]] <= med[1]
        segments = {"LL": lo0 & lo1, "LH": lo0 & ~lo1, "HL": ~lo0 & lo1, "HH": ~lo0 & ~lo1}
        for name, mask in segments.items():
            if not mask.any():
                continue
            tstar = float(seg_oracle_actions[mask].mean())
            vstar = float(seg_oracle_values[mask].mean())
            seg_agg = {}
            for method in methods:
                acts = np.stack([a[mask] for a in seg_actions[method]])
                vals = np.stack([v[mask] for v in seg_values[method]])
                mean_action = float(acts.mean())
                ape = abs(mean_action - tstar) / abs(tstar) * 100.0 if tstar != 0 else float("nan")
                mean_value = float(vals.mean())
                preg = (vstar - mean_value) / vstar * 100.0 if vstar > 0 else float("nan")
                seg_agg[method] = {"mean_action": mean_action, "action_ape": ape, "pct_regret": preg}
                rows.append((f"segment:{name}", method, mean_action, preg))
            aggregates["segments"][name] = {
                "share": float(mask.mean()),
                "oracle_action": tstar,
                "oracle_value": vstar,
                "methods": seg_agg,
            }

    return Report(
        kind="continuous-regret",
        columns=("class_or_segment", "method", "mean_mpr_or_action", "sd_or_pct_regret"),
        rows=rows,
        aggregates=aggregates,
        metadata=_metadata(
            cfg, {"n_bootstrap": n_bootstrap, "classes": list(classes), "methods": list(methods)}
        ),
    )


def _paired_p_value(a: np.ndarray, b: np.ndarray) -> float:
    """Two-sided paired t-test p-value for mean(a - b) = 0."""
    diff = a - b
    diff = diff[np.isfinite(diff)]
    if diff.size < 2 or np.allclose(diff, diff[0]):
        return float("nan")
    tstat = diff.mean() / (diff.std(ddof=1) / math.sqrt(diff.size))
    return float(2.0 * student_t.sf(abs(tstat), diff.size - 1))


# ---------------------------------------------------------------------------
# Regret-vs-sample-size scaling
# ---------------------------------------------------------------------------


def scaling_experiment(
    gt,
    n_grid: Sequence[int],
    reps: int,
    cfg: PipelineConfig,
    n_validation: int = 20_000,
    covariate_law: dgp.CovariateLaw | None = None,
) -> Report:
    """Neural-class policy regret versus training size on one fixed validation set.

    Per replication at size n: a fresh n-sample fold fits the nuisance net,
    another fresh n-sample fold learns the policy, and regret is the oracle
    value gap to the pointwise optimum on the shared validation covariates.
    Reports mean and sd per n plus the least-squares log-log slope.
    """
    if len(n_grid) < 3:
        raise InvalidInputError("need at least three sample sizes for a slope")
    law = covariate_law or dgp.UniformLaw(cfg.d)
    x_val = law.sample(substream(cfg.seed, "scaling", "validation"), n_validation)
    grid = np.linspace(0.0, cfg.t_max, FINE_GRID_POINTS)
    v_star = dgp.pointwise_oracle_value(gt, x_val, grid, cfg.vp)
    design = cfg.design()
    ctx = cfg.context(design)

    rows: list[tuple] = []
    means = []
    for n in n_grid:
        regrets = []
        for r in range(reps):
            ds_fit = dgp.generate(
                gt, n, law.d, design, law, seed=substream_int(cfg.seed, "scaling", n, r, "d1")
            )
            ds_pol = dgp.generate(
                gt, n, law.d, design, law, seed=substream_int(cfg.seed, "scaling", n, r, "d2")
            )
            net = _fit_stage1(ds_fit, cfg, substream_int(cfg.seed, "scaling", n, r, "fit"))
            learned = pol.learn_neural(
                ds_pol, net, ctx, cfg.policy_config(substream_int(cfg.seed, "scaling", n, r, "pol"))
            )
            value, _ = dgp.true_value(gt, learned, x_val, cfg.vp)
            regrets.append(v_star - value)
        regrets = np.asarray(regrets)
        rows.append((int(n), float(regrets.mean()), float(regrets.std(ddof=0)), int(reps)))
        means.append(regrets.mean())
    slope = float(
        np.polyfit(np.log(np.asarray(n_grid, dtype=float)), np.log(np.maximum(means, 1e-300)), 1)[0]
    )
    return Report(
        kind="scaling",
        columns=("n", "mean_regret", "sd_regret", "n_reps"),
        rows=rows,
        aggregates={"loglog_slope": slope, "oracle_value": v_star},
        metadata=_metadata(
            cfg, {"n_grid": list(map(int, n_grid)), "reps": reps, "n_validation": n_validation}
        ),
    )


# ---------------------------------------------------------------------------
# Approximation-degree and treatment-coverage sweeps
# ---------------------------------------------------------------------------


def _one_pipeline_regret(
    gt,
    cfg: PipelineConfig,
    levels: Sequence[float],
    seed: int,
    covariate_law: dgp.CovariateLaw | None = None,
) -> float:
    """Generate, fit, learn a neural policy, return oracle regret on fresh covariates."""
    law = covariate_law or dgp.UniformLaw(cfg.d)
    design = cfg.design(levels)
    ctx = cfg.context(design)
    ds = dgp.generate(gt, cfg.n, law.d, design, law, seed=substream_int(seed, "sweep", "gen"))
    train_ds, infer_ds = split(ds, (0.5, 0.5), seed=substream_int(seed, "sweep", "split"))
    net = _fit_stage1(train_ds, cfg, substream_int(seed, "sweep", "fit"))
    learned = pol.learn_neural(infer_ds, net, ctx, cfg.policy_config(substream_int(seed, "sweep", "pol")))
    x_eval = law.sample(substream(seed, "sweep", "eval"), 20_000)
    grid = np.linspace(0.0, cfg.t_max, FINE_GRID_POINTS)
    v_star = dgp.pointwise_oracle_value(gt, x_eval, grid, cfg.vp)
    value, _ = dgp.true_value(gt, learned, x_eval, cfg.vp)
    return float(v_star - value)


def k_sweep(
    gt,
    k_list: Sequence[int],
    cfg: PipelineConfig,
    n_seeds: int = 10,
    covariate_law: dgp.CovariateLaw | None = None,
) -> Report:
    """Mean regret per assumed polynomial degree, holding everything else fixed.

    Seeds are paired across degrees: within one seed every K sees the same
    generated data, so differences reflect the degree alone.
    """
    rows: list[tuple] = []
    per_seed: dict[int, list[float]] = {}
    for k in k_list:
        if k + 1 > len(cfg.levels):
            raise IdentifiabilityError(f"K={k} needs {k + 1} levels, design has {len(cfg.levels)}")
        kcfg = replace(cfg, k=k)
        regrets = np.asarray(
            [
                _one_pipeline_regret(
                    gt, kcfg, cfg.levels, substream_int(cfg.seed, "ksweep", s), covariate_law
                )
                for s in range(n_seeds)
            ]
        )
        per_seed[int(k)] = [float(v) for v in regrets]
        rows.append((int(k), float(regrets.mean()), float(regrets.std(ddof=0)), n_seeds))
    return Report(
        kind="k-sweep",
        columns=("k", "mean_regret", "sd_regret", "n_reps"),
        rows=rows,
        aggregates={str(r[0]): r[1] for r in rows},
        metadata=_metadata(
            cfg, {"k_list": list(map(int, k_list)), "n_seeds": n_seeds, "per_seed": per_seed}
        ),
    )


def coverage_sweep(
    gt,
    spans: Sequence[str],
    cfg: PipelineConfig,
    n_seeds: int = 10,
    covariate_law: dgp.CovariateLaw | None = None,
) -> Report:
    """Mean regret per treatment-coverage span, using the listed level sets."""
    rows: list[tuple] = []
    for span in spans:
        if span not in COVERAGE_LEVEL_SETS:
            raise InvalidInputError(f"unknown span {span!r}; choose from {sorted(COVERAGE_LEVEL_SETS)}")
        levels = COVERAGE_LEVEL_SETS[span]
        regrets = np.asarray(
            [
                _one_pipeline_regret(
                    gt, cfg, levels, substream_int(cfg.seed, "coverage", span, s), covariate_law
                )
                for s in range(n_seeds)
            ]
        )
        rows.append((span, float(regrets.mean()), float(regrets.std(ddof=0)), n_seeds))
    return Report(
        kind="coverage-sweep",
        columns=("span", "mean_regret", "sd_regret", "n_reps"),
        rows=rows,
        aggregates={r[0]: r[1] for r in rows},
        metadata=_metadata(cfg, {"spans": list(spans), "n_seeds": n_seeds}),
    )
