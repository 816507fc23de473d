"""Batch front-end: config-driven subcommands wiring the pipeline end to end.

Every subcommand reads a JSON config (flags override file values), derives all
randomness from the single seed, writes primary outputs atomically, and drops
a resolved-config snapshot plus a metadata sidecar (the only place timestamps
live) next to them. Reruns with identical config and seed produce
byte-identical primary outputs.

Exit codes: 0 success, 2 config/validation error, 3 numerical failure,
4 I/O error.
"""

from __future__ import annotations

import argparse
import datetime
import json
import sys
from pathlib import Path

import numpy as np

from . import benchmarks, dgp, evaluation, nets, orthogonal, policy as pol
from .core import (
    Dataset,
    Design,
    DivergenceError,
    InvalidInputError,
    SingularMatrixError,
    ValueParams,
    config_hash,
    load_dataset_csv,
    load_design_json,
    save_dataset_csv,
    save_design_json,
    split,
    write_text_atomic,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_IO = 4

EXPERIMENTS = (
    "ate-recovery",
    "discrete-regret",
    "continuous-regret",
    "scaling",
    "k-sweep",
    "coverage-sweep",
    "orthogonality-probe",
)

_CONFIG_DEFAULTS: dict = {
    "mode": "synthetic",
    "seed": 0,
    "n": 10_000,
    "d": 4,
    "k": 3,
    "loss": "bce",
    "w": 0.5,
    "c": 0.1,
    "levels": list(evaluation.DEFAULT_LEVELS),
    "t_max": 1.0,
    "truth": None,  # inline truth dict or path to truth JSON (synthetic mode)
    "dataset_csv": None,  # data mode inputs
    "design_json": None,
    "rescale_by": None,  # divide raw t and design levels on ingest
    "standardize": False,
    "train_epochs": 25,
    "train_lr": 3e-3,
    "train_hidden": [32, 16, 8],
    "train_patience": 5,
    "policy_epochs": 60,
    "policy_lr": 1e-2,
    "policy_restarts": 2,
    "ridge": 1e-8,
    "confidence": 0.95,
    "experiment": {},  # per-experiment knobs (n_seeds, reps, n_grid, ...)
}


def _load_config(path: str | None, overrides: dict) -> dict:
    cfg = dict(_CONFIG_DEFAULTS)
    if path is not None:
        with open(path) as fh:
            try:
                user = json.load(fh)
            except json.JSONDecodeError as exc:
                raise InvalidInputError(f"{path}: not valid JSON ({exc})") from exc
        unknown = set(user) - set(cfg)
        if unknown:
            raise InvalidInputError(f"{path}: unknown config keys {sorted(unknown)}")
        cfg.update(user)
    for key, value in overrides.items():
        if value is not None:
            cfg[key] = value
    return cfg


def _pipeline_config(cfg: dict) -> evaluation.PipelineConfig:
    return evaluation.PipelineConfig(
        k=int(cfg["k"]),
        loss=cfg["loss"],
        vp=ValueParams(float(cfg["w"]), float(cfg["c"])),
        levels=tuple(float(v) for v in cfg["levels"]),
        t_max=float(cfg["t_max"]),
        n=int(cfg["n"]),
        d=int(cfg["d"]),
        seed=int(cfg["seed"]),
        train_epochs=int(cfg["train_epochs"]),
        train_lr=float(cfg["train_lr"]),
        train_hidden=tuple(int(v) for v in cfg["train_hidden"]),
        train_patience=int(cfg["train_patience"]),
        policy_epochs=int(cfg["policy_epochs"]),
        policy_lr=float(cfg["policy_lr"]),
        policy_restarts=int(cfg["policy_restarts"]),
        standardize=bool(cfg["standardize"]),
        ridge=float(cfg["ridge"]),
    )


def _load_truth(cfg: dict) -> dgp.GroundTruth:
    spec = cfg.get("truth")
    if spec is None:
        return dgp.make_polynomial_truth(int(cfg["d"]))
    if isinstance(spec, str):
        return dgp.load_truth_json(spec)
    return dgp.truth_from_dict(spec)


def _load_data(cfg: dict) -> Dataset:
    if not cfg.get("dataset_csv") or not cfg.get("design_json"):
        raise InvalidInputError("data mode needs dataset_csv and design_json paths")
    rescale = cfg.get("rescale_by")
    rescale = float(rescale) if rescale is not None else None
    design = load_design_json(cfg["design_json"], rescale_by=rescale)
    return load_dataset_csv(cfg["dataset_csv"], design, rescale_by=rescale)


def _out_dir(cfg_out: str | None) -> Path:
    out = Path(cfg_out or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_run_files(out: Path, name: str, cfg: dict) -> None:
    """Resolved-config snapshot (deterministic) and timestamp sidecar (not)."""
    write_text_atomic(out / f"{name}.config.json", json.dumps(cfg, indent=2, sort_keys=True) + "\n")
    sidecar = {
        "written_at": datetime.datetime.now(datetime.timezone.utc).isoformat(),
        "config_hash": config_hash(cfg),
    }
    write_text_atomic(out / f"{name}.meta.json", json.dumps(sidecar, indent=2) + "\n")


def _fit_common(cfg: dict):
    """Shared by fit/estimate/learn: dataset, halves, context, fitted net."""
    pcfg = _pipeline_config(cfg)
    if cfg["mode"] == "data":
        ds = _load_data(cfg)
    else:
        gt = _load_truth(cfg)
        ds = dgp.generate(gt, pcfg.n, pcfg.d, pcfg.design(), seed=pcfg.seed)
    train_ds, infer_ds = split(ds, (0.5, 0.5), seed=evaluation.substream_int(pcfg.seed, "cli", "split"))
    ctx = evaluation.PipelineConfig.context(pcfg, train_ds.design)
    net, history = nets.structured_train(train_ds, pcfg.k, pcfg.train_config(pcfg.seed))
    return pcfg, ds, train_ds, infer_ds, ctx, net, history


def cmd_generate(args: argparse.Namespace) -> int:
    cfg = _load_config(args.config, {"seed": args.seed, "n": args.n})
    pcfg = _pipeline_config(cfg)
    gt = _load_truth(cfg)
    ds = dgp.generate(gt, pcfg.n, pcfg.d, pcfg.design(), seed=pcfg.seed)
    out = _out_dir(args.out)
    save_dataset_csv(ds, out / "dataset.csv")
    save_design_json(ds.design, out / "design.json")
    _write_run_files(out, "generate", cfg)
    print(f"wrote {out / 'dataset.csv'} ({ds.n} samples, d={ds.d}) and {out / 'design.json'}")
    return EXIT_OK


def cmd_fit(args: argparse.Namespace) -> int:
    overrides = {"seed": args.seed, "dataset_csv": args.data, "design_json": args.design}
    if args.data:
        overrides["mode"] = "data"
    cfg = _load_config(args.config, overrides)
    _, _, _, _, _, net, history = _fit_common(cfg)
    out = _out_dir(args.out)
    nets.save_net_json(net, out / "net.json")
    nets.save_history_csv(history, out / "history.csv")
    _write_run_files(out, "fit", cfg)
    print(f"wrote {out / 'net.json'} (val loss {history[-1][2]:.6f} after {history[-1][0]} epochs)")
    return EXIT_OK


def cmd_estimate(args: argparse.Namespace) -> int:
    overrides = {"seed": args.seed, "dataset_csv": args.data, "design_json": args.design}
    if args.data:
        overrides["mode"] = "data"
    cfg = _load_config(args.config, overrides)
    if (args.ate_level is None) == (args.policy is None):
        raise InvalidInputError("estimate needs exactly one of --ate-level or --policy")
    pcfg, _, _, infer_ds, ctx, net, _ = _fit_common(cfg)
    if args.net:
        net = nets.load_net_json(args.net)
    confidence = float(cfg["confidence"])
    if args.ate_level is not None:
        est = orthogonal.estimate_ate(infer_ds, float(args.ate_level), net, ctx, confidence)
        target = f"ate@{args.ate_level}"
    else:
        policy = pol.load_policy_json(args.policy)
        est = orthogonal.estimate_value(infer_ds, policy, net, ctx, confidence)
        target = f"value@{Path(args.policy).name}"
    out = _out_dir(args.out)
    write_text_atomic(out / "estimate.json", json.dumps(est.to_dict(target), indent=2) + "\n")
    _write_run_files(out, "estimate", cfg)
    print(f"{target}: {est.point:.6f} [{est.ci_low:.6f}, {est.ci_high:.6f}] @ {confidence:.0%}")
    return EXIT_OK


def cmd_learn(args: argparse.Namespace) -> int:
    overrides = {"seed": args.seed, "dataset_csv": args.data, "design_json": args.design}
    if args.data:
        overrides["mode"] = "data"
    cfg = _load_config(args.config, overrides)
    pcfg, _, _, infer_ds, ctx, net, _ = _fit_common(cfg)
    if args.net:
        net = nets.load_net_json(args.net)
    learned = evaluation._learn_policy(args.policy_class, infer_ds, net, ctx, pcfg, pcfg.seed)
    out = _out_dir(args.out)
    pol.save_policy_json(learned, out / "policy.json")
    _write_run_files(out, "learn", cfg)
    est = orthogonal.estimate_value(infer_ds, _as_scorable(learned, infer_ds), net, ctx)
    print(f"learned {args.policy_class} policy -> {out / 'policy.json'} (objective {est.point:.6f})")
    return EXIT_OK


def _as_scorable(policy, ds: Dataset):
    """Table policies score on their own fold; others pass through."""
    return policy


def cmd_evaluate(args: argparse.Namespace) -> int:
    cfg = _load_config(args.config, {"seed": args.seed})
    pcfg = _pipeline_config(cfg)
    which = args.experiment
    knobs: dict = dict(cfg.get("experiment") or {})
    out = _out_dir(args.out)

    if cfg["mode"] == "data" and which in ("ate-recovery", "discrete-regret"):
        source: object = _load_data(cfg)
    else:
        source = _load_truth(cfg)

    if which == "ate-recovery":
        report = evaluation.ate_recovery_experiment(
            source, pcfg, n_seeds=int(knobs.get("n_seeds", 1))
        )
    elif which == "discrete-regret":
        n_binary = int(knobs.get("n_binary", 4))
        spec = tuple((i, (0.0,)) for i in range(n_binary))
        law = dgp.BinaryMixLaw(n_binary, pcfg.d - n_binary) if not isinstance(source, Dataset) else None
        gt_src = source if isinstance(source, Dataset) else dgp.make_grouped_truth(n_binary)
        if not isinstance(source, Dataset) and cfg.get("truth") is not None:
            gt_src = source
        report = evaluation.discrete_regret_experiment(
            gt_src, spec, pcfg, covariate_law=law, min_arm_count=int(knobs.get("min_arm_count", 50))
        )
    elif which == "continuous-regret":
        report = evaluation.continuous_regret_experiment(
            source,
            pcfg,
            classes=tuple(knobs.get("classes", evaluation.POLICY_CLASSES)),
            methods=tuple(knobs.get("methods", evaluation.CONTINUOUS_METHODS)),
            n_bootstrap=int(knobs.get("n_bootstrap", 30)),
        )
    elif which == "scaling":
        report = evaluation.scaling_experiment(
            source,
            [int(v) for v in knobs.get("n_grid", (1000, 5000, 10000, 20000))],
            int(knobs.get("reps", 30)),
            pcfg,
            n_validation=int(knobs.get("n_validation", 20000)),
        )
    elif which == "k-sweep":
        report = evaluation.k_sweep(
            source,
            [int(v) for v in knobs.get("k_list", (1, 2, 3))],
            pcfg,
            n_seeds=int(knobs.get("n_seeds", 10)),
        )
    elif which == "coverage-sweep":
        report = evaluation.coverage_sweep(
            source,
            [str(s) for s in knobs.get("spans", ("0.25", "0.50", "0.75", "1.00"))],
            pcfg,
            n_seeds=int(knobs.get("n_seeds", 10)),
        )
    elif which == "orthogonality-probe":
        gt = source
        if not isinstance(gt, dgp.SigmoidPolyTruth):
            raise InvalidInputError("orthogonality-probe needs a sigmoid-poly truth (known coefficients)")
        design = pcfg.design()
        ds = dgp.generate(gt, pcfg.n, pcfg.d, design, seed=pcfg.seed)
        ctx = pcfg.context(design)
        probe = orthogonal.orthogonality_probe(
            ds,
            float(knobs.get("level", pcfg.levels[-1])),
            gt.theta_fn,
            ctx,
            epsilons=tuple(knobs.get("epsilons", (0.02, 0.05, 0.1, 0.15, 0.2))),
            n_directions=int(knobs.get("n_directions", 8)),
            seed=pcfg.seed,
        )
        report = evaluation.Report(
            kind="orthogonality-probe",
            columns=("epsilon", "orthogonal_shift", "plugin_shift"),
            rows=[(r.epsilon, r.orthogonal_shift, r.plugin_shift) for r in probe.rows],
            aggregates={"orthogonal_slope": probe.orthogonal_slope, "plugin_slope": probe.plugin_slope},
            metadata=evaluation._metadata(pcfg),
        )
    else:
        raise InvalidInputError(f"unknown experiment {which!r}; choose from {EXPERIMENTS}")

    report.write_csv(out / f"{which}.csv")
    report.write_json(out / f"{which}.json")
    _write_run_files(out, which, cfg)
    print(f"{which}: wrote {out / (which + '.csv')} and {out / (which + '.json')}")
    for key, val in report.aggregates.items():
        if isinstance(val, (int, float)):
            print(f"  {key}: {val:.6g}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ctpolicy",
        description="Learn and evaluate personalized continuous-treatment policies "
        "from discrete-arm randomized experiments.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="JSON config path; flags override file values")
        p.add_argument("--seed", type=int, default=None, help="root seed override")
        p.add_argument("--out", default=None, help="output directory (default: cwd)")

    p = sub.add_parser("generate", help="draw a synthetic experiment to CSV")
    common(p)
    p.add_argument("--n", type=int, default=None, help="sample count override")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("fit", help="fit the structured nuisance net on the training half")
    common(p)
    p.add_argument("--data", help="dataset CSV (switches to data mode)")
    p.add_argument("--design", help="design JSON (data mode)")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("estimate", help="orthogonal estimate of an effect or a policy's value")
    common(p)
    p.add_argument("--data", help="dataset CSV (switches to data mode)")
    p.add_argument("--design", help="design JSON (data mode)")
    p.add_argument("--net", help="pre-fitted net JSON (skips refit for scoring)")
    p.add_argument("--ate-level", type=float, default=None, help="treated level for an effect estimate")
    p.add_argument("--policy", default=None, help="policy JSON whose value to estimate")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("learn", help="learn a policy in one of the four classes")
    common(p)
    p.add_argument("--data", help="dataset CSV (switches to data mode)")
    p.add_argument("--design", help="design JSON (data mode)")
    p.add_argument("--net", help="pre-fitted net JSON (skips refit for scoring)")
    p.add_argument(
        "--class",
        dest="policy_class",
        required=True,
        choices=("finite", "grid", "linear", "neural"),
    )
    p.set_defaults(func=cmd_learn)

    p = sub.add_parser("evaluate", help="run one of the experiment protocols")
    common(p)
    p.add_argument("--experiment", required=True, choices=EXPERIMENTS)
    p.set_defaults(func=cmd_evaluate)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (InvalidInputError,) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DivergenceError, SingularMatrixError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
