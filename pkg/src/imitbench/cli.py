"""Command-line front end: data generation, training, evaluation, sweeps,
and static plot emission.

Exit codes: 0 success, 2 usage error, 3 data error (missing or corrupt
inputs, bad config), 4 numeric failure (divergent training or non-finite
parameters).  Every command writes its resolved configuration and a digest
of its inputs next to its outputs, and identical inputs plus seeds produce
byte-identical output files.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import evaluation, svgplot
from .arm import task_features
from .auxtraj import load_aux_model, make_aux_model, save_aux_model
from .checkpoint import CheckpointError
from .config import (
    ConfigError,
    arch_from,
    arm_from,
    expert_from,
    file_digest,
    load_config,
    make_aux_from,
    make_policy_from,
    sampler_from,
    train_config_from,
    write_run_outputs,
)
from .datasets import Dataset, DatasetError, dataset_digest, load_dataset, save_dataset
from .expert import GenerationError, generate_dataset
from .nn import PowerIterationError
from .optim import NonFiniteGradient
from .policies import NnPolicy, load_policy, save_policy
from .training import METHODS, TrainingDiverged, train

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def _out_dir(raw: str) -> Path:
    root = os.environ.get("IMITBENCH_OUT_ROOT", "")
    p = Path(raw)
    if root and not p.is_absolute():
        p = Path(root) / p
    p.mkdir(parents=True, exist_ok=True)
    return p


def _default_jobs() -> int:
    return int(os.environ.get("IMITBENCH_JOBS", "1"))


def _int_list(text: str) -> list:
    try:
        return [int(x) for x in text.split(",") if x.strip() != ""]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="imitbench",
        description="Imitation-learning workbench on a planar acceleration-driven arm",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_gen = sub.add_parser("gen", help="generate expert demonstrations")
    p_gen.add_argument("--config", default=None)
    p_gen.add_argument("--n", type=int, required=True, help="number of trajectories")
    p_gen.add_argument("--seed", type=int, default=None)
    p_gen.add_argument("--out", required=True)
    p_gen.set_defaults(func=cmd_gen)

    p_train = sub.add_parser("train", help="train a policy on a dataset")
    p_train.add_argument("--config", default=None)
    p_train.add_argument("--method", choices=METHODS, default=None)
    p_train.add_argument("--policy", choices=("nn", "rmp"), default=None)
    p_train.add_argument("--data", required=True)
    p_train.add_argument("--seed", type=int, default=None)
    p_train.add_argument("--out", required=True)
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a policy checkpoint")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--data", required=True)
    p_eval.add_argument("--aux", default=None, help="auxiliary-trajectory checkpoint for audits")
    p_eval.add_argument("--audit", action="store_true")
    p_eval.add_argument(
        "--validation-tail",
        type=int,
        default=0,
        help="evaluate only the last N trajectories (0 = all)",
    )
    p_eval.add_argument("--config", default=None)
    p_eval.add_argument("--out", required=True)
    p_eval.set_defaults(func=cmd_eval)

    p_sweep = sub.add_parser("sweep", help="data-efficiency sweep")
    p_sweep.add_argument("--config", default=None)
    p_sweep.add_argument("--data", required=True)
    p_sweep.add_argument("--sizes", type=_int_list, default=None)
    p_sweep.add_argument("--seeds", type=_int_list, default=None)
    p_sweep.add_argument("--methods", default=None, help="comma-separated subset of bc,bc_noise,code")
    p_sweep.add_argument("--classes", default=None, help="comma-separated subset of nn,rmp")
    p_sweep.add_argument("--jobs", type=int, default=None)
    p_sweep.add_argument("--out", required=True)
    p_sweep.set_defaults(func=cmd_sweep)

    p_plot = sub.add_parser("plot", help="render SVG charts from CSV outputs")
    p_plot.add_argument(
        "--curves",
        nargs="*",
        default=[],
        help="label=path pairs of eval_curves.csv files for the deviation chart",
    )
    p_plot.add_argument("--sweep", default=None, help="sweep.csv for the RMSE box chart")
    p_plot.add_argument("--out", required=True)
    p_plot.set_defaults(func=cmd_plot)

    return parser


# ---------------------------------------------------------------------------
# commands


def cmd_gen(args) -> int:
    if args.n < 1:
        print("error: --n must be at least 1", file=sys.stderr)
        return EXIT_USAGE
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    arm = arm_from(cfg)
    dataset = generate_dataset(
        args.n,
        sampler_from(cfg),
        arm,
        expert_from(cfg),
        ts=cfg["data"]["ts"],
        seed=cfg["seed"],
    )
    out = _out_dir(args.out)
    save_dataset(out / "dataset.bin", dataset)
    digests = {"dataset.bin": dataset_digest(dataset)}
    if args.config:
        digests["config"] = file_digest(args.config)
    write_run_outputs(out, cfg, digests)
    horizons = np.array([t.horizon for t in dataset.trajectories])
    reach = dataset.provenance["n"] / dataset.provenance["attempts"]
    print(
        f"generated {len(dataset)} trajectories (ts={dataset.ts}s) -> {out / 'dataset.bin'}\n"
        f"horizons: min={horizons.min()} median={int(np.median(horizons))} max={horizons.max()}"
        f"  reach_rate={reach:.3f}"
    )
    return EXIT_OK


def _policy_seed(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, 1))))


def _aux_seed(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, 2))))


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.policy is not None:
        cfg["policy"]["class"] = args.policy
    dataset = load_dataset(args.data)
    method = args.method or cfg["train"]["method"]
    cfg["train"]["method"] = method
    arm = dataset.arm
    meta = dataset.trajectories[0].meta
    n_features = int(task_features(meta).size)
    policy = make_policy_from(cfg, arm, n_features, _policy_seed(cfg["seed"]))
    aux = None
    if method == "code":
        aux = make_aux_from(
            cfg,
            arm.d,
            dataset.ts,
            n_demos=len(dataset),
            context_dim=3 + n_features,
            rng=_aux_seed(cfg["seed"]),
        )
    tconf = train_config_from(cfg, method=method)
    out = _out_dir(args.out)
    digests = {"data": file_digest(args.data)}
    if args.config:
        digests["config"] = file_digest(args.config)
    write_run_outputs(out, cfg, digests)
    try:
        result = train(dataset, policy, tconf, aux_model=aux)
    except TrainingDiverged as exc:
        n_policy = len(policy.param_arrays())
        save_policy(out / "policy.diverged.ckpt", policy.with_params(exc.snapshot[:n_policy]))
        print(f"numeric failure: {exc}; last finite checkpoint written", file=sys.stderr)
        return EXIT_NUMERIC
    save_policy(out / "policy.ckpt", result.policy)
    if result.aux_model is not None:
        save_aux_model(out / "aux.ckpt", result.aux_model)
    result.history.to_csv(out / "history.csv")
    h = result.history
    print(
        f"trained {method} ({cfg['policy']['class']}) for {h.n_epochs} epochs "
        f"(stop: {h.stop_reason}); final loss {h.total[-1]:.6g} -> {out / 'policy.ckpt'}"
    )
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    policy = load_policy(args.checkpoint)
    dataset = load_dataset(args.data)
    meta = dataset.trajectories[0].meta
    n_features = int(task_features(meta).size)
    if policy.d != dataset.d or policy.n_features != n_features:
        raise CheckpointError(
            f"{args.checkpoint}: policy expects d={policy.d}, m={policy.n_features}; "
            f"dataset has d={dataset.d}, m={n_features}"
        )
    if args.validation_tail:
        n = len(dataset)
        dataset = dataset.subset(range(max(0, n - args.validation_tail), n))
    aux = load_aux_model(args.aux) if args.aux else None
    audit = None
    if args.audit:
        audit = "certified" if isinstance(policy, NnPolicy) else "estimated"
    report = evaluation.evaluate(
        policy,
        dataset,
        dataset.arm,
        success_radius=cfg["eval"]["success_radius"],
        audit=audit,
        aux_model=aux,
    )
    out = _out_dir(args.out)
    (out / "eval_report.json").write_text(report.to_json() + "\n")
    evaluation.report_to_csv(report, dataset, out / "eval_trajectories.csv")
    evaluation.curves_to_csv(report.curves, out / "eval_curves.csv")
    digests = {"checkpoint": file_digest(args.checkpoint), "data": file_digest(args.data)}
    if args.config:
        digests["config"] = file_digest(args.config)
    write_run_outputs(out, cfg, digests)
    finite = report.rmse[np.isfinite(report.rmse)]
    med = float(np.median(report.rmse)) if finite.size == report.rmse.size else float("inf")
    line = f"evaluated {len(dataset)} trajectories: median RMSE {med:.6g} rad, success {report.success:.2f}"
    if report.audit:
        line += (
            f"\naudit: L={report.audit.L:.4f} ({report.audit.L_source}), "
            f"eps={report.audit.epsilon:.4g}, recursion margin {report.audit.recursion_margin:.3g}"
        )
    print(line)
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = load_config(args.config)
    dataset = load_dataset(args.data)
    sweep_cfg = cfg["sweep"]
    methods = args.methods.split(",") if args.methods else sweep_cfg["methods"]
    classes = args.classes.split(",") if args.classes else sweep_cfg["classes"]
    for m in methods:
        if m not in METHODS:
            print(f"error: unknown method {m!r}; valid: {', '.join(METHODS)}", file=sys.stderr)
            return EXIT_USAGE
    for c in classes:
        if c not in ("nn", "rmp"):
            print(f"error: unknown policy class {c!r}; valid: nn, rmp", file=sys.stderr)
            return EXIT_USAGE
    sizes = args.sizes if args.sizes is not None else sweep_cfg["sizes"]
    seeds = args.seeds if args.seeds is not None else sweep_cfg["seeds"]
    jobs = args.jobs if args.jobs is not None else _default_jobs()
    out = _out_dir(args.out)
    base_config = train_config_from(cfg)
    rows = evaluation.data_efficiency_sweep(
        dataset,
        methods,
        classes,
        sizes,
        seeds,
        base_config,
        arch_from(cfg),
        n_validation=sweep_cfg["n_validation"],
        outdir=out / "runs",
        jobs=jobs,
    )
    evaluation.sweep_to_csv(rows, out / "sweep.csv")
    digests = {"data": file_digest(args.data)}
    if args.config:
        digests["config"] = file_digest(args.config)
    write_run_outputs(out, cfg, digests)
    n_fail = sum(1 for r in rows if r["status"] != "ok")
    print(f"sweep complete: {len(rows)} runs ({n_fail} failed) -> {out / 'sweep.csv'}")
    return EXIT_OK


def _read_curves_csv(path: Path):
    with open(path) as f:
        rows = list(csv.DictReader(f))
    return {
        "q25": np.array([float(r["state_q25"]) for r in rows]),
        "q50": np.array([float(r["state_q50"]) for r in rows]),
        "q75": np.array([float(r["state_q75"]) for r in rows]),
    }


def cmd_plot(args) -> int:
    out = _out_dir(args.out)
    missing = []
    curve_specs = []
    for item in args.curves:
        label, _, path = item.partition("=")
        if not path:
            label, path = Path(item).stem, item
        if not Path(path).exists():
            missing.append(path)
        else:
            curve_specs.append((label, Path(path)))
    if args.sweep and not Path(args.sweep).exists():
        missing.append(args.sweep)
    if missing:
        print("error: missing input CSVs: " + ", ".join(missing), file=sys.stderr)
        return EXIT_DATA
    if not curve_specs and not args.sweep:
        print("error: nothing to plot (pass --curves and/or --sweep)", file=sys.stderr)
        return EXIT_USAGE
    wrote = []
    if curve_specs:
        series = []
        for label, path in curve_specs:
            c = _read_curves_csv(path)
            series.append(
                svgplot.BandSeries(name=label, median=c["q50"], q25=c["q25"], q75=c["q75"])
            )
        svg = svgplot.render_band_chart(
            series, "Per-step state deviation (median, IQR)", "step", "deviation"
        )
        (out / "deviation_curves.svg").write_text(svg)
        wrote.append("deviation_curves.svg")
    if args.sweep:
        with open(args.sweep) as f:
            rows = list(csv.DictReader(f))
        sizes = sorted({int(r["size"]) for r in rows})
        combos = []
        for r in rows:
            name = f"{r['method']}/{r['policy_class']}"
            if name not in combos:
                combos.append(name)
        groups = []
        for size in sizes:
            boxes = []
            for name in combos:
                vals = [
                    float(r["median_rmse"])
                    for r in rows
                    if int(r["size"]) == size
                    and f"{r['method']}/{r['policy_class']}" == name
                    and r["status"] == "ok"
                ]
                if not vals:
                    continue
                lo, q25, med, q75, hi = np.percentile(vals, [0, 25, 50, 75, 100])
                boxes.append((name, float(lo), float(q25), float(med), float(q75), float(hi)))
            groups.append(svgplot.BoxGroup(label=str(size), boxes=boxes))
        svg = svgplot.render_box_chart(groups, "Validation RMSE vs training-set size")
        (out / "rmse_box.svg").write_text(svg)
        wrote.append("rmse_box.svg")
    print(f"wrote {', '.join(wrote)} -> {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    try:
        return args.func(args)
    except (DatasetError, CheckpointError, ConfigError, GenerationError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingDiverged, NonFiniteGradient, PowerIterationError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
