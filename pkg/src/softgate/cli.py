"""Command-line surface: validate graphs, run the routing demo, fit and
predict ensemble models on CSV data.

Exit codes are stable for scripting: 0 success, 1 domain failure
(improper graph, shape mismatch, solver degeneracy), 2 usage or parse
failure.  All floating-point output uses 17 significant digits so reruns
can be compared byte for byte.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from dataclasses import replace

import numpy as np

from .engine import InferenceConfig, infer
from .families import DegenerateBeliefError, DomainError, Gamma, Gaussian, MvGaussian, PointMass
from .fixedpoint import SolverConfig
from .graph import FactorGraph, GraphError, validate_proper
from .models import (
    XOR_EXPERTS,
    EnsembleData,
    fit_ensemble,
    metrics,
    predict_ensemble,
    read_ensemble_csvs,
)

MODELS = ("static", "pge", "pge-diag", "noisy", "noisy-diag")

RUN_CONFIG_KEYS = {
    "model", "sweeps", "prediction_sweeps", "solver", "seed",
    "features", "predictions", "targets", "out",
}
SOLVER_KEYS = {
    "initial_step", "max_step_norm", "max_iterations", "tolerance",
    "armijo_shrink", "armijo_slope",
}


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def _load_run_config(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    unknown = set(doc) - RUN_CONFIG_KEYS
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    solver_doc = doc.get("solver", {})
    unknown = set(solver_doc) - SOLVER_KEYS
    if unknown:
        raise ValueError(f"unknown solver keys: {sorted(unknown)}")
    return doc


def _solver_from(doc: dict) -> SolverConfig:
    return SolverConfig(**doc.get("solver", {}))


def _belief_to_json(belief):
    if isinstance(belief, Gaussian):
        m, v = belief.moments
        return {"family": "gaussian", "mean": _fmt(m), "variance": _fmt(v)}
    if isinstance(belief, Gamma):
        return {"family": "gamma", "alpha": _fmt(belief.alpha), "beta": _fmt(belief.beta)}
    if isinstance(belief, MvGaussian):
        return {
            "family": "mvgaussian",
            "xi": [_fmt(x) for x in belief.xi],
            "lam": [[_fmt(x) for x in row] for row in belief.lam],
            "diagonal": belief.diagonal_only,
        }
    if isinstance(belief, PointMass):
        arr = np.atleast_1d(np.asarray(belief.value, dtype=float))
        return {"family": "point", "value": [_fmt(x) for x in arr]}
    return {"family": "flat"}


def _belief_from_json(doc):
    family = doc["family"]
    if family == "gaussian":
        return Gaussian.from_moments(float(doc["mean"]), float(doc["variance"]))
    if family == "gamma":
        return Gamma(float(doc["alpha"]), float(doc["beta"]))
    if family == "mvgaussian":
        return MvGaussian(
            np.array([float(x) for x in doc["xi"]]),
            np.array([[float(x) for x in row] for row in doc["lam"]]),
            diagonal_only=bool(doc.get("diagonal", False)),
        )
    if family == "point":
        values = [float(x) for x in doc["value"]]
        return PointMass(values[0] if len(values) == 1 else tuple(values))
    raise ValueError(f"unknown belief family {family!r}")


def _write_bfe_csv(path, trace):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "total"])
        for k, value in enumerate(trace):
            writer.writerow([k, _fmt(value)])


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_validate(args) -> int:
    try:
        with open(args.graph, encoding="utf-8") as fh:
            text = fh.read()
        graph = FactorGraph.from_json(text)
    except (OSError, json.JSONDecodeError, GraphError) as exc:
        print(f"parse error: {exc}", file=sys.stderr)
        return 2
    report = validate_proper(graph)
    for violation in report.violations:
        print(violation)
    if report.ok:
        print("proper")
        return 0
    return 1


def cmd_xor(args) -> int:
    from .models import build_depth2

    if not args.tau > 0:
        print("tau must be positive", file=sys.stderr)
        return 2
    experts = [
        replace(spec, tau_router=args.tau, tau_expert=args.tau) for spec in XOR_EXPERTS
    ]
    if args.grid_n == 1:
        points = np.array([[0.5, 0.5]])
    else:
        axis = np.linspace(0.0, 1.0, args.grid_n)
        points = np.array([(a, b) for a in axis for b in axis])
    rows = []
    cfg = InferenceConfig(sweeps=args.sweeps, track_bfe=False,
                          solver=SolverConfig())
    for point in points:
        graph = build_depth2(experts, np.array([point]))
        marginals = infer(graph, cfg)
        ygroup = next(g for g in marginals.groups if g.role == "y")
        belief = marginals.group_beliefs[ygroup.id]
        rows.append((point[0], point[1], belief.mean, math.sqrt(belief.variance)))
    out = open(args.out, "w", newline="", encoding="utf-8") if args.out else sys.stdout
    try:
        writer = csv.writer(out)
        writer.writerow(["x1", "x2", "mean", "std"])
        for row in rows:
            writer.writerow([_fmt(v) for v in row])
    finally:
        if args.out:
            out.close()
    return 0


def _posteriors_to_json(posteriors: dict) -> dict:
    return {
        name: [_belief_to_json(b) for b in beliefs]
        for name, beliefs in posteriors.items()
        if beliefs is not None and any(b is not None for b in beliefs)
    }


def _posteriors_from_json(doc: dict) -> dict:
    return {name: [_belief_from_json(b) for b in entries] for name, entries in doc.items()}


def cmd_fit(args) -> int:
    try:
        config = _load_run_config(args.config)
    except (OSError, json.JSONDecodeError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    model = config.get("model", "pge")
    if model not in MODELS:
        print(f"unknown model {model!r}; choose from {MODELS}", file=sys.stderr)
        return 2
    try:
        data = read_ensemble_csvs(
            config["features"], config["predictions"], config.get("targets")
        )
        if data.targets is None:
            raise ValueError("fit requires a targets file with at least one row")
        cfg = InferenceConfig(
            sweeps=int(config.get("sweeps", 5)), solver=_solver_from(config)
        )
        posteriors, marginals = fit_ensemble(model, data, cfg=cfg)
    except (ValueError, GraphError, DomainError, DegenerateBeliefError) as exc:
        print(f"fit failed: {exc}", file=sys.stderr)
        return 1
    out_prefix = config.get("out", args.out or "softgate_fit")
    doc = {
        "model": model,
        "sweeps": cfg.sweeps,
        "posteriors": _posteriors_to_json(posteriors),
        "bfe_trace": [_fmt(x) for x in marginals.bfe_trace],
    }
    with open(f"{out_prefix}.marginals.json", "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
    _write_bfe_csv(f"{out_prefix}.bfe.csv", marginals.bfe_trace)
    print(f"wrote {out_prefix}.marginals.json and {out_prefix}.bfe.csv")
    return 0


def cmd_predict(args) -> int:
    try:
        config = _load_run_config(args.config)
        with open(args.marginals, encoding="utf-8") as fh:
            fitted = json.load(fh)
    except (OSError, json.JSONDecodeError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    model = fitted.get("model", config.get("model", "pge"))
    try:
        posteriors = _posteriors_from_json(fitted["posteriors"])
        data = read_ensemble_csvs(
            config["features"], config["predictions"], config.get("targets")
        )
        cfg = InferenceConfig(
            sweeps=int(config.get("prediction_sweeps", 3)),
            solver=_solver_from(config), track_bfe=False,
        )
        predictive_beliefs, _ = predict_ensemble(model, posteriors, data, cfg=cfg)
    except (KeyError, ValueError, GraphError, DomainError, DegenerateBeliefError) as exc:
        print(f"predict failed: {exc}", file=sys.stderr)
        return 1
    out_prefix = config.get("out", args.out or "softgate_predict")
    doc = {
        "model": model,
        "predictive": [_belief_to_json(b) for b in predictive_beliefs],
    }
    if data.targets is not None:
        doc["metrics"] = {k: _fmt(v) for k, v in metrics(predictive_beliefs, data.targets).items()}
    with open(f"{out_prefix}.predictive.json", "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
    if "metrics" in doc:
        print("mse", doc["metrics"]["mse"])
        print("nll", doc["metrics"]["nll"])
    print(f"wrote {out_prefix}.predictive.json")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="softgate",
        description="Closed-form variational inference for precision-gated ensembles",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_validate = sub.add_parser("validate", help="check a graph document for properness")
    p_validate.add_argument("graph", help="graph JSON file")
    p_validate.set_defaults(func=cmd_validate)

    p_xor = sub.add_parser("xor", help="posterior mean/std grid for the routing demo")
    p_xor.add_argument("--tau", type=float, default=500.0, help="routing precision")
    p_xor.add_argument("--grid-n", type=int, default=21, help="grid resolution per axis")
    p_xor.add_argument("--sweeps", type=int, default=3)
    p_xor.add_argument("--out", default=None, help="output CSV (default: stdout)")
    p_xor.set_defaults(func=cmd_xor)

    p_fit = sub.add_parser("fit", help="train an ensemble model from CSV data")
    p_fit.add_argument("--config", required=True, help="run configuration JSON")
    p_fit.add_argument("--out", default=None, help="output prefix override")
    p_fit.set_defaults(func=cmd_fit)

    p_predict = sub.add_parser("predict", help="predict with a fitted model")
    p_predict.add_argument("--config", required=True, help="run configuration JSON")
    p_predict.add_argument("--marginals", required=True, help="fit output JSON")
    p_predict.add_argument("--out", default=None, help="output prefix override")
    p_predict.set_defaults(func=cmd_predict)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code not in (0, None) else 0
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
