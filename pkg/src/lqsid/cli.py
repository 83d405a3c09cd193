"""Batch command-line front end.

Subcommands: ``prep`` (raw sessions to trial ensembles), ``identify``
(bi-level identification per subject), ``simulate`` (synthetic rollouts or
full sessions), ``compare`` (LQ/LQG/LQS comparison with ANOVA), ``report``
(re-render tables/plots from a stored report).  Every command is
deterministic given inputs, config and seed; all randomness flows through
the single configured seed.  Exit codes: 0 success, 1 numerical/model
failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass, field

import numpy as np

from . import compare as cmp
from .errors import ConfigError, LqsidError
from .isoc import IsocConfig, VafWeights
from .model import DrivingParams, MODEL_KINDS, ParamVectors, build_driving_problem, reduce_problem
from .montecarlo import export_batch, rollout, simulate_session
from .pipeline import (
    TrialEnsemble,
    read_ensemble,
    read_manifest,
    read_session,
    split_train_validation,
    write_ensemble,
    write_session,
)
from .solver import synthesize

__all__ = ["main", "RunConfig", "load_run_config"]


@dataclass
class RunConfig:
    seed: int = 0
    jobs: int = 1
    driving: DrivingParams = field(default_factory=DrivingParams)
    angle_tol: float = 0.05
    smoothing: float | None = None
    isoc: dict = field(default_factory=dict)
    weights: dict = field(default_factory=dict)
    params: ParamVectors | None = None
    repetitions: int = 14
    plateau_steps: int = 100


def load_run_config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    with open(path) as fh:
        data = json.load(fh)
    if data.get("schema_version") != 1:
        raise ConfigError("config must declare schema_version 1")
    cfg = RunConfig()
    cfg.seed = int(data.get("seed", 0))
    cfg.jobs = int(data.get("jobs", 1))
    if "driving" in data:
        cfg.driving = DrivingParams(**data["driving"])
    pipe = data.get("pipeline", {})
    cfg.angle_tol = float(pipe.get("angle_tol", 0.05))
    cfg.smoothing = pipe.get("smoothing")
    cfg.isoc = data.get("isoc", {})
    cfg.weights = data.get("weights", {})
    if "params" in data:
        cfg.params = ParamVectors(s=data["params"]["s"], sigma=data["params"]["sigma"])
    cfg.repetitions = int(data.get("repetitions", 14))
    cfg.plateau_steps = int(data.get("plateau_steps", 100))
    return cfg


def _isoc_config(cfg: RunConfig, kind: str) -> IsocConfig:
    overrides = dict(cfg.isoc.get(kind, cfg.isoc) if isinstance(cfg.isoc, dict) else {})
    overrides.pop("lq", None), overrides.pop("lqg", None), overrides.pop("lqs", None)
    if "parameter_sets" in overrides:
        overrides["parameter_sets"] = tuple(tuple(g) for g in overrides["parameter_sets"])
    if "initial_bounds" in overrides:
        bounds = cmp.default_bounds()
        bounds.update({k: tuple(v) for k, v in overrides["initial_bounds"].items()})
        overrides["initial_bounds"] = bounds
    overrides.setdefault("n_jobs", cfg.jobs)
    return cmp.default_config(kind, **overrides)


def _weights(cfg: RunConfig, kind: str):
    w = cfg.weights.get(kind, cfg.weights)
    cost = w.get("cost", {}) if isinstance(w, dict) else {}
    noise = w.get("noise", {}) if isinstance(w, dict) else {}
    w_cost = (
        VafWeights.from_diagonal(cost["mean"], cost["var"])
        if cost
        else cmp.default_cost_weights(kind)
    )
    w_noise = (
        VafWeights.from_diagonal(noise["mean"], noise["var"])
        if noise
        else cmp.default_noise_weights(kind)
    )
    if kind == "lq" and float(np.sum(w_cost.w_cov)) != 0.0:
        raise ConfigError(
            "the LQ model predicts zero covariance; covariance weights must be zero"
        )
    return w_cost, w_noise


def _ensemble_meta(ensemble: TrialEnsemble, csv_name: str) -> dict:
    return {
        "file": csv_name,
        "N": ensemble.N,
        "target": ensemble.target,
        "retained": ensemble.retained,
        "dropped": ensemble.dropped,
        "subject_id": ensemble.subject_id,
    }


def cmd_prep(args) -> int:
    cfg = load_run_config(args.config)
    subjects = read_manifest(args.manifest)
    if not subjects:
        raise ConfigError("manifest lists no subjects")
    os.makedirs(args.out, exist_ok=True)
    index = {"schema_version": 1, "subjects": []}
    report = {"schema_version": 1, "subjects": {}}
    for subject_id, session_path in subjects:
        session = read_session(session_path, subject_id=subject_id)
        train, valid = split_train_validation(
            [session], angle_tol=cfg.angle_tol, smoothing=cfg.smoothing
        )
        entry = {"id": subject_id}
        for split, ensemble in (("train", train[0]), ("validation", valid[0])):
            csv_name = f"{subject_id}_{split}.csv"
            write_ensemble(os.path.join(args.out, csv_name), ensemble)
            entry[split] = _ensemble_meta(ensemble, csv_name)
        index["subjects"].append(entry)
        report["subjects"][subject_id] = {
            split: {
                "retained": ens.retained,
                "dropped": ens.dropped,
                "duration_steps": ens.N,
                "repetition_durations": list(ens.durations),
                "start_thresholds": list(ens.thresholds),
            }
            for split, ens in (("train", train[0]), ("validation", valid[0]))
        }
    with open(os.path.join(args.out, "ensembles.json"), "w") as fh:
        json.dump(index, fh, indent=2, sort_keys=True)
    with open(os.path.join(args.out, "prep_report.json"), "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
    print(f"prepared {len(subjects)} subject(s) -> {args.out}")
    return 0


def _load_ensembles(index_path):
    with open(index_path) as fh:
        index = json.load(fh)
    base = os.path.dirname(os.path.abspath(index_path))
    out = []
    for entry in index["subjects"]:
        pair = {}
        for split in ("train", "validation"):
            meta = entry[split]
            pair[split] = read_ensemble(os.path.join(base, meta["file"]), meta)
        out.append((entry["id"], pair["train"], pair["validation"]))
    return out


def cmd_identify(args) -> int:
    from functools import partial

    from .isoc import identify

    cfg = load_run_config(args.config)
    if args.jobs is not None:
        cfg.jobs = args.jobs
    subjects = _load_ensembles(args.ensembles)
    icfg = _isoc_config(cfg, args.model)
    w_cost, w_noise = _weights(cfg, args.model)
    os.makedirs(args.out, exist_ok=True)
    for subject_id, train, _ in subjects:
        builder = cmp.DrivingModelBuilder(cfg.driving, args.model)
        result = identify(
            partial(builder.problem_for, ensemble=train),
            cmp.base_parameters(),
            train.m_hat,
            train.omega_hat,
            icfg,
            w_cost,
            w_noise,
        )
        result.save(os.path.join(args.out, f"{subject_id}_{args.model}.json"))
        result.save_trace_csv(os.path.join(args.out, f"{subject_id}_{args.model}_trace.csv"))
        print(f"{subject_id} [{args.model}]: J_ISOC={result.j_isoc:.4f} "
              f"({result.n_evaluations} evaluations)")
    return 0


def cmd_simulate(args) -> int:
    cfg = load_run_config(args.config)
    if cfg.params is None:
        raise ConfigError("simulate needs ground-truth parameters in the config ('params')")
    seed = cfg.seed if args.seed is None else args.seed
    os.makedirs(args.out, exist_ok=True)
    if args.format == "rollout":
        if args.trials < 1:
            raise ConfigError("number of rollouts must be >= 1")
        prob = reduce_problem(build_driving_problem(cfg.driving, cfg.params), args.model)
        gains = synthesize(prob)
        batch = rollout(prob, gains, args.trials, seed)
        export_batch(batch, cfg.driving.dt, args.out, prob=prob)
        print(f"wrote {args.trials} rollout(s) -> {args.out}")
        return 0
    manifest = {"schema_version": 1, "subjects": []}
    for k in range(args.subjects):
        subject_id = f"synthetic{k + 1:02d}"
        session = simulate_session(
            cfg.driving,
            cfg.params,
            kind=args.model,
            repetitions=cfg.repetitions,
            plateau_steps=cfg.plateau_steps,
            seed=seed + k,
            subject_id=subject_id,
        )
        fname = f"{subject_id}.csv"
        write_session(os.path.join(args.out, fname), session)
        manifest["subjects"].append({"id": subject_id, "session": fname})
    with open(os.path.join(args.out, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    print(f"wrote {args.subjects} session(s) -> {args.out}")
    return 0


def cmd_compare(args) -> int:
    cfg = load_run_config(args.config)
    if args.jobs is not None:
        cfg.jobs = args.jobs
    subjects = _load_ensembles(args.ensembles)
    kinds = tuple(args.models.split(","))
    for kind in kinds:
        if kind not in MODEL_KINDS:
            raise ConfigError(f"unknown model kind {kind!r}")
    configs = {kind: _isoc_config(cfg, kind) for kind in kinds}
    weights = {kind: _weights(cfg, kind) for kind in kinds}
    report = cmp.run_comparison(
        subjects, driving=cfg.driving, kinds=kinds, configs=configs, weights=weights
    )
    cmp.write_report(report, args.out)
    cmp.write_prediction_plots(report, subjects, cfg.driving, args.out)
    for ch, res in report.anova.items():
        print(f"ANOVA {ch} mean-VAF across models: F={res.F:.3f} p={res.p:.3g}")
    for kind in kinds:
        avg = report.averages[kind]["validation"]
        print(f"{kind}: validation VAF angle={avg['angle']:.3f} velocity={avg['velocity']:.3f}")
    if report.warnings:
        print(f"{len(report.warnings)} variance-generalization warning(s); see report.json")
    return 0


def cmd_report(args) -> int:
    with open(args.results) as fh:
        data = json.load(fh)
    report = _report_from_dict(data)
    cmp.write_report(report, args.out)
    print(f"re-rendered report -> {args.out}")
    return 0


def _report_from_dict(data) -> "cmp.ComparisonReport":
    rows = []
    for row in data["rows"]:
        vaf_mean = np.array([row["vaf_angle_mean"], row["vaf_velocity_mean"]])
        vaf_cov = np.full((2, 2), np.nan)
        if row.get("vaf_angle_var") is not None:
            vaf_cov[0, 0] = row["vaf_angle_var"]
        rows.append(
            cmp.EvalRecord(
                subject_id=row["subject"],
                kind=row["model"],
                split=row["split"],
                vaf_mean=vaf_mean,
                vaf_cov=vaf_cov,
            )
        )
    anova = {
        ch: cmp.AnovaResult(F=a["F"], p=a["p"], df_between=a["df"][0], df_within=a["df"][1])
        for ch, a in data.get("anova", {}).items()
    }
    s8 = data.get("sigma8")
    sigma8 = None
    if s8 is not None:
        sigma8 = cmp.Sigma8Summary(
            table=tuple(tuple(row) for row in s8["table"]),
            kept=tuple(s8["kept"]),
            median=s8["median"],
            q1=s8["q1"],
            q3=s8["q3"],
            mean_vaf_angle=s8["mean_vaf_angle"],
            mean_vaf_velocity=s8["mean_vaf_velocity"],
        )
    return cmp.ComparisonReport(
        rows=tuple(rows),
        identified={},
        averages=data["averages"],
        anova=anova,
        warnings=tuple(data.get("warnings", ())),
        sigma8=sigma8,
        kinds=tuple(data["kinds"]),
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lqsid",
        description="Stochastic optimal control models of steering movements: "
        "prepare data, identify parameters, simulate, compare.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prep", help="prepare raw sessions into trial ensembles")
    p.add_argument("--manifest", required=True, help="subject manifest JSON")
    p.add_argument("--config", default=None, help="run config JSON")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_prep)

    p = sub.add_parser("identify", help="identify model parameters per subject")
    p.add_argument("--ensembles", required=True, help="ensembles.json from prep")
    p.add_argument("--model", choices=MODEL_KINDS, default="lqs")
    p.add_argument("--config", default=None)
    p.add_argument("--jobs", type=int, default=None, help="parallel grid evaluations")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_identify)

    p = sub.add_parser("simulate", help="generate synthetic rollouts or sessions")
    p.add_argument("--config", required=True, help="run config JSON with 'params'")
    p.add_argument("--model", choices=MODEL_KINDS, default="lqs")
    p.add_argument("--format", choices=("rollout", "session"), default="rollout")
    p.add_argument("--trials", type=int, default=14, help="rollout count (rollout format)")
    p.add_argument("--subjects", type=int, default=1, help="session count (session format)")
    p.add_argument("--seed", type=int, default=None, help="override config seed")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("compare", help="identify all models and compare with ANOVA")
    p.add_argument("--ensembles", required=True)
    p.add_argument("--models", default="lq,lqg,lqs", help="comma-separated model kinds")
    p.add_argument("--config", default=None)
    p.add_argument("--jobs", type=int, default=None, help="parallel grid evaluations")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("report", help="re-render tables and plots from report.json")
    p.add_argument("--results", required=True, help="stored report.json")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError, json.JSONDecodeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except LqsidError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
