"""LQ/LQG/LQS comparison experiment: identify, validate, test significance.

For each subject the three model kinds are identified on the training
ensemble (positive target steps) and evaluated on training and validation
ensembles (negative steps), re-solving each model at the ensemble's own
horizon and initial state.  Per-signal VAF values are compared across
models with a one-way fixed-effects ANOVA (model kind as factor, per-subject
VAFs as observations), and the identified control-dependent noise scalings
are summarized with an outlier-robust box statistic.

Weight conventions for the bi-level steps follow the experiment: cost step
0.9/0.9 on the mean channels plus 0.1 on the angle variance (1/1 and no
variance weight for the deterministic LQ model), noise step 0.1/0.1 on the
means plus 0.9 on the angle variance.  The velocity-variance channel is
never weighted: velocity is numerically derived from the angle, so its
measured variance inherits the angle's estimation problems.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, replace
from functools import partial

import numpy as np
from scipy.special import betainc

from .errors import ConfigError
from .isoc import IsocConfig, VafWeights, identify, vaf_report
from .model import DrivingParams, MODEL_KINDS, ParamVectors, build_driving_problem, reduce_problem
from .moments import observed_moments, propagate, selection_matrix
from .pipeline import TrialEnsemble, initial_state_from_ensemble
from .solver import synthesize

__all__ = [
    "DrivingModelBuilder",
    "EvalRecord",
    "AnovaResult",
    "Sigma8Summary",
    "ComparisonReport",
    "default_cost_weights",
    "default_noise_weights",
    "default_parameter_sets",
    "default_bounds",
    "default_config",
    "base_parameters",
    "evaluate_model",
    "one_way_anova",
    "sigma8_analysis",
    "run_comparison",
    "write_report",
    "write_prediction_plots",
]

MEASURED = selection_matrix([0, 1], 5)
CHANNELS = ("angle", "velocity")


def default_cost_weights(kind: str) -> VafWeights:
    if kind == "lq":
        return VafWeights.from_diagonal([1.0, 1.0], [0.0, 0.0])
    return VafWeights.from_diagonal([0.9, 0.9], [0.1, 0.0])


def default_noise_weights(kind: str):
    if kind == "lq":
        return None
    return VafWeights.from_diagonal([0.1, 0.1], [0.9, 0.0])


def default_parameter_sets(kind: str):
    cost = ("s1", "s2", "s3")
    if kind == "lq":
        return (cost,)
    additive = (("sigma1", "sigma2", "sigma3", "sigma4"), ("sigma5", "sigma6", "sigma7"))
    if kind == "lqg":
        return (cost, *additive)
    return (cost, ("sigma8",), ("sigma9", "sigma10", "sigma11"), *additive)


def default_bounds() -> dict:
    """Search ranges for the steering-task parameters (s4 fixed at 1)."""
    bounds = {"s1": (0.0, 2.0e5), "s2": (0.0, 2.0e4), "s3": (0.0, 1.0e2)}
    for idx in range(1, 5):
        bounds[f"sigma{idx}"] = (0.0, 0.2)
    for idx in range(5, 8):
        bounds[f"sigma{idx}"] = (0.0, 0.5)
    bounds["sigma8"] = (0.0, 1.2)
    for idx in range(9, 12):
        bounds[f"sigma{idx}"] = (0.0, 0.5)
    return bounds


def default_config(kind: str, **overrides) -> IsocConfig:
    settings = dict(
        parameter_sets=default_parameter_sets(kind),
        initial_bounds=default_bounds(),
        grid_points_per_axis=7,
        shrink_factor=0.5,
        outer_iters=3,
        stall_tol=1e-5,
        solver_gain_tol=1e-5,
    )
    settings.update(overrides)
    return IsocConfig(**settings)


def base_parameters() -> ParamVectors:
    """All searched parameters zero, control cost normalized to 1."""
    return ParamVectors(s=[0.0, 0.0, 0.0, 1.0], sigma=np.zeros(11))


@dataclass(frozen=True)
class DrivingModelBuilder:
    """Builds the steering-task problem of one model kind for an ensemble.

    The ensemble supplies horizon, target and initial state, so identified
    parameters can be re-solved on any ensemble (e.g. validation data with
    the opposite target sign).
    """

    driving: DrivingParams
    kind: str = "lqs"

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ConfigError(f"unknown model kind {self.kind!r}")

    def problem_for(self, params: ParamVectors, ensemble: TrialEnsemble):
        p = replace(self.driving, N=ensemble.N, phi_ref=ensemble.target)
        x0_mean, x0_cov = initial_state_from_ensemble(ensemble, p)
        prob = build_driving_problem(p, params, x0_mean=x0_mean, x0_cov=x0_cov)
        return reduce_problem(prob, self.kind)


@dataclass(frozen=True)
class EvalRecord:
    """Per-signal VAF of one identified model on one ensemble."""

    subject_id: str
    kind: str
    split: str
    vaf_mean: np.ndarray
    vaf_cov: np.ndarray

    def vaf(self, channel: str) -> float:
        return float(self.vaf_mean[CHANNELS.index(channel)])

    @property
    def vaf_angle_var(self) -> float:
        return float(self.vaf_cov[0, 0])


def evaluate_model(
    builder: DrivingModelBuilder,
    params: ParamVectors,
    ensemble: TrialEnsemble,
    solver_gain_tol: float = 1e-8,
) -> EvalRecord:
    """Re-solve the model at the ensemble's horizon and score every channel."""
    prob = builder.problem_for(params, ensemble)
    gains = synthesize(prob, gain_tol=solver_gain_tol)
    pred = observed_moments(propagate(prob, gains), MEASURED)
    vaf_mean, vaf_cov = vaf_report(pred, (ensemble.m_hat, ensemble.omega_hat))
    return EvalRecord(
        subject_id=ensemble.subject_id,
        kind=builder.kind,
        split="",
        vaf_mean=vaf_mean,
        vaf_cov=vaf_cov,
    )


@dataclass(frozen=True)
class AnovaResult:
    F: float
    p: float
    df_between: int
    df_within: int


def one_way_anova(groups) -> AnovaResult:
    """One-way fixed-effects ANOVA over ``groups`` (lists of observations).

    The p-value is the upper tail of the F distribution, computed through
    the regularized incomplete beta function.
    """
    groups = [np.asarray(g, dtype=float) for g in groups]
    if len(groups) < 2 or any(g.size < 2 for g in groups):
        raise ValueError("need at least 2 groups with at least 2 values each")
    sizes = np.array([g.size for g in groups])
    total = int(sizes.sum())
    grand = float(np.concatenate(groups).mean())
    ssb = float(sum(g.size * (g.mean() - grand) ** 2 for g in groups))
    ssw = float(sum(((g - g.mean()) ** 2).sum() for g in groups))
    df_b = len(groups) - 1
    df_w = total - len(groups)
    if ssw == 0.0:
        if ssb == 0.0:
            raise ValueError("F statistic undefined: no variance between or within groups")
        return AnovaResult(F=np.inf, p=0.0, df_between=df_b, df_within=df_w)
    F = (ssb / df_b) / (ssw / df_w)
    x = df_w / (df_w + df_b * F)
    p = float(betainc(df_w / 2.0, df_b / 2.0, x))
    return AnovaResult(F=float(F), p=p, df_between=df_b, df_within=df_w)


@dataclass(frozen=True)
class Sigma8Summary:
    """Control-dependent noise scalings with VAFs, after outlier dropping.

    ``table`` rows are (subject, sigma8, VAF angle mean, VAF velocity mean)
    for all subjects; quartiles and averages cover the kept subjects only
    (near-zero scalings and 1.5*IQR outliers dropped).
    """

    table: tuple
    kept: tuple
    median: float
    q1: float
    q3: float
    mean_vaf_angle: float
    mean_vaf_velocity: float


def sigma8_analysis(results, evals, zero_tol: float = 1e-3) -> Sigma8Summary:
    """Summarize identified sigma8 values against validation mean-VAFs.

    ``results`` are per-subject identification results of the LQS model;
    ``evals`` the matching validation evaluation records.
    """
    if len(results) < 3 or len(results) != len(evals):
        raise ValueError("need >= 3 subjects with matching evaluations")
    table = tuple(
        (ev.subject_id, float(res.params.sigma[7]), ev.vaf("angle"), ev.vaf("velocity"))
        for res, ev in zip(results, evals)
    )
    values = np.array([row[1] for row in table])
    nonzero = values >= zero_tol
    candidates = values[nonzero]
    if candidates.size == 0:
        raise ValueError("all identified sigma8 values are near zero")
    q1, q3 = np.percentile(candidates, [25, 75])
    iqr = q3 - q1
    keep = nonzero & (values >= q1 - 1.5 * iqr) & (values <= q3 + 1.5 * iqr)
    kept_vals = values[keep]
    kept_rows = [row for row, k in zip(table, keep) if k]
    return Sigma8Summary(
        table=table,
        kept=tuple(row[0] for row in kept_rows),
        median=float(np.median(kept_vals)),
        q1=float(np.percentile(kept_vals, 25)),
        q3=float(np.percentile(kept_vals, 75)),
        mean_vaf_angle=float(np.mean([row[2] for row in kept_rows])),
        mean_vaf_velocity=float(np.mean([row[3] for row in kept_rows])),
    )


@dataclass(frozen=True)
class ComparisonReport:
    """Full comparison outcome.

    ``rows`` hold per (subject, model, split) evaluation records;
    ``identified`` maps (subject, kind) to the identification result;
    ``averages[kind][split][channel]`` are mean VAFs over subjects;
    ``anova[channel]`` tests the per-subject validation mean-VAFs across
    model kinds.  Validation covariance misfits (negative VAF) are listed
    in ``warnings``: measured trial-to-trial variance generalizes poorly
    and covariance fits must be read as overfitting-prone.
    """

    rows: tuple
    identified: dict
    averages: dict
    anova: dict
    warnings: tuple
    sigma8: Sigma8Summary | None
    kinds: tuple

    def to_dict(self) -> dict:
        return {
            "schema_version": 1,
            "kinds": list(self.kinds),
            "rows": [
                {
                    "subject": r.subject_id,
                    "model": r.kind,
                    "split": r.split,
                    "vaf_angle_mean": r.vaf("angle"),
                    "vaf_velocity_mean": r.vaf("velocity"),
                    "vaf_angle_var": _none_if_nan(r.vaf_angle_var),
                }
                for r in self.rows
            ],
            "identified": {
                f"{subject}/{kind}": {
                    "s_hat": res.s_hat.tolist(),
                    "sigma_hat": res.sigma_hat.tolist(),
                    "j_isoc": res.j_isoc,
                    "n_evaluations": res.n_evaluations,
                }
                for (subject, kind), res in self.identified.items()
            },
            "averages": self.averages,
            "anova": {
                ch: {"F": a.F, "p": a.p, "df": [a.df_between, a.df_within]}
                for ch, a in self.anova.items()
            },
            "warnings": list(self.warnings),
            "sigma8": None
            if self.sigma8 is None
            else {
                "table": [list(row) for row in self.sigma8.table],
                "kept": list(self.sigma8.kept),
                "median": self.sigma8.median,
                "q1": self.sigma8.q1,
                "q3": self.sigma8.q3,
                "mean_vaf_angle": self.sigma8.mean_vaf_angle,
                "mean_vaf_velocity": self.sigma8.mean_vaf_velocity,
            },
        }


def _none_if_nan(value):
    return None if value is None or not np.isfinite(value) else float(value)


def run_comparison(
    subjects,
    driving: DrivingParams = DrivingParams(),
    kinds=MODEL_KINDS,
    configs: dict | None = None,
    weights: dict | None = None,
) -> ComparisonReport:
    """Identify every model kind per subject and compare on validation data.

    ``subjects`` is a sequence of (subject_id, train_ensemble,
    valid_ensemble).  ``configs`` and ``weights`` optionally override the
    per-kind defaults (``weights[kind]`` is a (cost, noise) pair).
    """
    configs = configs or {}
    weights = weights or {}
    rows = []
    identified = {}
    warnings = []
    for subject_id, train, valid in subjects:
        for kind in kinds:
            builder = DrivingModelBuilder(driving, kind)
            cfg = configs.get(kind) or default_config(kind)
            w_cost, w_noise = weights.get(
                kind, (default_cost_weights(kind), default_noise_weights(kind))
            )
            result = identify(
                partial(builder.problem_for, ensemble=train),
                base_parameters(),
                train.m_hat,
                train.omega_hat,
                cfg,
                w_cost,
                w_noise,
            )
            identified[(subject_id, kind)] = result
            for split, ensemble in (("train", train), ("validation", valid)):
                record = replace(
                    evaluate_model(builder, result.params, ensemble),
                    subject_id=subject_id,
                    split=split,
                )
                rows.append(record)
                if split == "validation" and np.isfinite(record.vaf_angle_var):
                    if record.vaf_angle_var < 0 and kind != "lq":
                        warnings.append(
                            f"{subject_id}/{kind}: validation angle-variance VAF "
                            f"{record.vaf_angle_var:.3f} < 0; measured variance does not "
                            "generalize and the covariance fit is overfitting-prone"
                        )

    averages = {
        kind: {
            split: {
                ch: float(
                    np.mean(
                        [r.vaf(ch) for r in rows if r.kind == kind and r.split == split]
                    )
                )
                for ch in CHANNELS
            }
            for split in ("train", "validation")
        }
        for kind in kinds
    }
    anova = {}
    if len(subjects) >= 2 and len(kinds) >= 2:
        for ch in CHANNELS:
            groups = [
                [r.vaf(ch) for r in rows if r.kind == kind and r.split == "validation"]
                for kind in kinds
            ]
            anova[ch] = one_way_anova(groups)

    sigma8 = None
    if "lqs" in kinds and len(subjects) >= 3:
        results = [identified[(sid, "lqs")] for sid, _, _ in subjects]
        evals = [
            next(
                r
                for r in rows
                if r.subject_id == sid and r.kind == "lqs" and r.split == "validation"
            )
            for sid, _, _ in subjects
        ]
        sigma8 = sigma8_analysis(results, evals)

    return ComparisonReport(
        rows=tuple(rows),
        identified=identified,
        averages=averages,
        anova=anova,
        warnings=tuple(warnings),
        sigma8=sigma8,
        kinds=tuple(kinds),
    )


def _vaf_table_csv(report: ComparisonReport, path):
    with open(path, "w") as fh:
        fh.write("subject,model,split,vaf_angle_mean,vaf_velocity_mean,vaf_angle_var\n")
        for r in report.rows:
            var = _none_if_nan(r.vaf_angle_var)
            var_s = "" if var is None else repr(var)
            fh.write(
                f"{r.subject_id},{r.kind},{r.split},{r.vaf('angle')!r},"
                f"{r.vaf('velocity')!r},{var_s}\n"
            )


def _sigma8_csv(summary: Sigma8Summary, path):
    with open(path, "w") as fh:
        fh.write("subject,sigma8,vaf_angle_mean,vaf_velocity_mean,kept\n")
        for subject, sigma8, va, vv in summary.table:
            fh.write(f"{subject},{sigma8!r},{va!r},{vv!r},{int(subject in summary.kept)}\n")


def write_report(report: ComparisonReport, out_dir) -> None:
    """Write report JSON, CSV tables, and static SVG plots."""
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "report.json"), "w") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
    _vaf_table_csv(report, os.path.join(out_dir, "vaf_table.csv"))
    if report.sigma8 is not None:
        _sigma8_csv(report.sigma8, os.path.join(out_dir, "sigma8.csv"))

    import matplotlib

    matplotlib.use("Agg")
    matplotlib.rcParams["svg.hashsalt"] = "lqsid"  # deterministic SVG ids
    import matplotlib.pyplot as plt

    subjects = sorted({r.subject_id for r in report.rows})
    fig, axes = plt.subplots(1, 2, figsize=(10, 4), sharey=True)
    xs = np.arange(len(subjects))
    width = 0.8 / max(len(report.kinds), 1)
    for ax, ch in zip(axes, CHANNELS):
        for k_idx, kind in enumerate(report.kinds):
            vals = [
                next(
                    r.vaf(ch)
                    for r in report.rows
                    if r.subject_id == s and r.kind == kind and r.split == "validation"
                )
                for s in subjects
            ]
            ax.bar(xs + k_idx * width, vals, width, label=kind.upper())
            ax.axhline(report.averages[kind]["validation"][ch], ls="--", lw=0.8)
        ax.set_title(f"validation VAF, {ch} mean")
        ax.set_xticks(xs + 0.4 - width / 2)
        ax.set_xticklabels(subjects, rotation=45, fontsize=7)
        ax.set_ylim(min(0.0, ax.get_ylim()[0]), 1.05)
    axes[0].set_ylabel("VAF")
    axes[0].legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(os.path.join(out_dir, "vaf_validation.svg"), metadata={"Date": None})
    plt.close(fig)

    if report.sigma8 is not None:
        s8 = report.sigma8
        fig, ax = plt.subplots(figsize=(6, 4))
        vals = [row[1] for row in s8.table]
        va = [row[2] for row in s8.table]
        vv = [row[3] for row in s8.table]
        ax.scatter(vals, va, marker="o", label="VAF angle mean")
        ax.scatter(vals, vv, marker="s", label="VAF velocity mean")
        kept_vals = [row[1] for row in s8.table if row[0] in s8.kept]
        box_ax = ax.twinx()
        box_ax.boxplot(
            kept_vals,
            positions=[np.mean([s8.mean_vaf_angle, s8.mean_vaf_velocity])],
            orientation="horizontal",
            widths=0.08,
            manage_ticks=False,
        )
        box_ax.set_yticks([])
        ax.set_xlabel("identified control-dependent noise scaling")
        ax.set_ylabel("validation VAF")
        ax.legend(fontsize=8)
        fig.tight_layout()
        fig.savefig(os.path.join(out_dir, "sigma8.svg"), metadata={"Date": None})
        plt.close(fig)


def write_prediction_plots(report: ComparisonReport, subjects, driving, out_dir) -> None:
    """Per-subject validation mean trajectories: measurement vs every model.

    Emits the plotted curves as CSV next to each SVG.
    """
    os.makedirs(out_dir, exist_ok=True)
    import matplotlib

    matplotlib.use("Agg")
    matplotlib.rcParams["svg.hashsalt"] = "lqsid"
    import matplotlib.pyplot as plt

    for subject_id, _, valid in subjects:
        t = np.arange(valid.N + 1) * driving.dt
        curves = {"measured": valid.m_hat}
        for kind in report.kinds:
            builder = DrivingModelBuilder(driving, kind)
            params = report.identified[(subject_id, kind)].params
            prob = builder.problem_for(params, valid)
            pred_mean, _ = observed_moments(propagate(prob, synthesize(prob)), MEASURED)
            curves[kind] = pred_mean

        table = np.column_stack([t] + [curves[k] for k in curves])
        header = "time_s," + ",".join(f"{k}_angle,{k}_velocity" for k in curves)
        np.savetxt(
            os.path.join(out_dir, f"mean_{subject_id}.csv"),
            table,
            delimiter=",",
            header=header,
            comments="",
        )
        fig, axes = plt.subplots(2, 1, figsize=(6, 6), sharex=True)
        for idx, ch in enumerate(CHANNELS):
            for name, data in curves.items():
                style = dict(lw=2, color="k") if name == "measured" else dict(lw=1)
                axes[idx].plot(t, data[:, idx], label=name, **style)
            axes[idx].set_ylabel(ch)
        axes[1].set_xlabel("time [s]")
        axes[0].legend(fontsize=8)
        fig.tight_layout()
        fig.savefig(os.path.join(out_dir, f"mean_{subject_id}.svg"), metadata={"Date": None})
        plt.close(fig)
