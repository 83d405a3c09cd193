"""Variance-accounted-for objective and bi-level grid-search identification.

The objective scores how well model-predicted observed moments match
measured ones: a weighted average of per-channel VAF values over the mean
channels and the vectorized observed covariance, normalized by the total
weight, so it lives in (-inf, 1] with 1 a perfect fit.

Identification alternates two bi-level optimizations: the cost step
maximizes the objective over cost-parameter sets with the noise parameters
fixed, the noise step vice versa, each using its own weights.  Within a
step, grid searches cycle over the parameter sets until a full cycle stops
improving, then the grid shrinks around the incumbent.  Every objective
evaluation solves the forward problem (gain synthesis, moment propagation,
projection) for the candidate parameters.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass
from functools import partial

import numpy as np

from .errors import ConfigError, LqsidError, SearchError, VafUndefinedError
from .model import ParamVectors
from .moments import observed_moments, propagate, selection_matrix
from .solver import DEFAULT_GAIN_TOL, DEFAULT_MAX_OUTER_ITERS, synthesize

__all__ = [
    "VafWeights",
    "IsocConfig",
    "IsocResult",
    "GridStepResult",
    "vaf_scalar",
    "vaf_report",
    "j_isoc",
    "grid_search_step",
    "identify",
]


@dataclass(frozen=True)
class VafWeights:
    """Weights over mean channels and the vectorized observed covariance.

    ``w_cov`` is indexed row-major over the flattened (nbar x nbar)
    covariance-VAF matrix.  Channels with zero weight are never evaluated.
    """

    w_mean: np.ndarray
    w_cov: np.ndarray

    def __post_init__(self):
        w_mean = np.asarray(self.w_mean, dtype=float)
        w_cov = np.asarray(self.w_cov, dtype=float)
        if w_mean.ndim != 1 or w_cov.ndim != 1:
            raise ValueError("weights must be vectors")
        if w_cov.size != w_mean.size**2:
            raise ValueError("w_cov must cover the vectorized covariance (nbar^2 entries)")
        if np.any(w_mean < 0) or np.any(w_cov < 0):
            raise ValueError("weights must be nonnegative")
        if w_mean.sum() + w_cov.sum() <= 0:
            raise ValueError("at least one weight must be positive")
        object.__setattr__(self, "w_mean", w_mean)
        object.__setattr__(self, "w_cov", w_cov)

    @classmethod
    def from_diagonal(cls, w_mean, w_var) -> "VafWeights":
        """Mean weights plus variance weights on the covariance diagonal."""
        w_mean = np.asarray(w_mean, dtype=float)
        w_var = np.asarray(w_var, dtype=float)
        nbar = w_mean.size
        if w_var.size != nbar:
            raise ValueError("w_var must have one entry per measured channel")
        w_cov = np.zeros((nbar, nbar))
        np.fill_diagonal(w_cov, w_var)
        return cls(w_mean=w_mean, w_cov=w_cov.ravel())

    @property
    def total(self) -> float:
        return float(self.w_mean.sum() + self.w_cov.sum())


def vaf_scalar(predicted, measured) -> float:
    """1 - sum((pred - meas)^2) / sum((meas - mean(meas))^2)."""
    predicted = np.asarray(predicted, dtype=float)
    measured = np.asarray(measured, dtype=float)
    if predicted.shape != measured.shape or predicted.ndim != 1 or predicted.size < 2:
        raise ValueError("predicted and measured must be equal-length sequences (>= 2)")
    residual = float(np.sum((predicted - measured) ** 2))
    denom = float(np.sum((measured - measured.mean()) ** 2))
    if denom == 0.0:
        raise VafUndefinedError("measured sequence is constant; VAF undefined")
    return 1.0 - residual / denom


def j_isoc(pred_moments, meas_moments, weights: VafWeights) -> float:
    """Weighted VAF average over mean and covariance channels.

    ``pred_moments`` and ``meas_moments`` are (mean, cov) pairs with shapes
    (T, nbar) and (T, nbar, nbar), aligned over t = 0..N.
    """
    pred_mean, pred_cov = pred_moments
    meas_mean, meas_cov = meas_moments
    pred_mean = np.asarray(pred_mean, dtype=float)
    meas_mean = np.asarray(meas_mean, dtype=float)
    if pred_mean.shape != meas_mean.shape:
        raise ValueError("predicted and measured mean sequences must align")
    nbar = meas_mean.shape[1]
    if weights.w_mean.size != nbar:
        raise ValueError("weight dimension does not match the measured channels")

    total = 0.0
    for i in np.flatnonzero(weights.w_mean):
        total += weights.w_mean[i] * vaf_scalar(pred_mean[:, i], meas_mean[:, i])
    cov_idx = np.flatnonzero(weights.w_cov)
    if cov_idx.size:
        pred_cov = np.asarray(pred_cov, dtype=float)
        meas_cov = np.asarray(meas_cov, dtype=float)
        if pred_cov.shape != meas_cov.shape:
            raise ValueError("predicted and measured covariance sequences must align")
        for flat in cov_idx:
            i, j = divmod(int(flat), nbar)
            total += weights.w_cov[flat] * vaf_scalar(pred_cov[:, i, j], meas_cov[:, i, j])
    return total / weights.total


def vaf_report(pred_moments, meas_moments):
    """All-channel VAF table; NaN where the measured channel is constant."""
    pred_mean, pred_cov = pred_moments
    meas_mean, meas_cov = meas_moments
    nbar = meas_mean.shape[1]
    vaf_mean = np.full(nbar, np.nan)
    vaf_cov = np.full((nbar, nbar), np.nan)
    for i in range(nbar):
        try:
            vaf_mean[i] = vaf_scalar(pred_mean[:, i], meas_mean[:, i])
        except VafUndefinedError:
            pass
        for j in range(nbar):
            try:
                vaf_cov[i, j] = vaf_scalar(pred_cov[:, i, j], meas_cov[:, i, j])
            except VafUndefinedError:
                pass
    return vaf_mean, vaf_cov


@dataclass(frozen=True)
class GridStepResult:
    point: np.ndarray
    value: float
    n_evaluated: int
    n_failed: int


def _safe_value(evaluate, point):
    try:
        return float(evaluate(point)), False
    except (LqsidError, np.linalg.LinAlgError, FloatingPointError, OverflowError):
        return -np.inf, True


def grid_search_step(evaluate, center, axes, n_jobs: int = 1, evaluate_batch=None) -> GridStepResult:
    """Maximize ``evaluate`` over the Cartesian grid of ``axes`` plus the center.

    Failed evaluations score -inf and are counted; if every candidate
    fails, :class:`~lqsid.errors.SearchError` is raised.  Ties are broken
    by the lexicographically smallest parameter vector, so the result does
    not depend on evaluation order.  ``evaluate_batch``, when given, maps
    the whole candidate list to (values, failed) in one vectorized call and
    takes precedence over per-point evaluation.
    """
    axes = [np.asarray(ax, dtype=float) for ax in axes]
    if any(ax.size < 2 for ax in axes):
        raise ValueError("each grid axis needs at least 2 points")
    center = np.asarray(center, dtype=float)
    points = [np.array(pt) for pt in itertools.product(*axes)]
    seen = {tuple(pt) for pt in points}
    if tuple(center) not in seen:
        points.append(center)

    if evaluate_batch is not None:
        values, failed = evaluate_batch(points)
        values = np.asarray(values, dtype=float)
        n_failed = int(np.count_nonzero(failed))
    else:
        if n_jobs != 1:
            from joblib import Parallel, delayed

            outcomes = Parallel(n_jobs=n_jobs)(
                delayed(_safe_value)(evaluate, pt) for pt in points
            )
        else:
            outcomes = [_safe_value(evaluate, pt) for pt in points]
        values = np.array([v for v, _ in outcomes])
        n_failed = sum(1 for _, failed in outcomes if failed)
    if n_failed == len(points):
        raise SearchError("every grid point failed to evaluate")
    best_value = values.max()
    best_point = min(tuple(pt) for pt, v in zip(points, values) if v == best_value)
    return GridStepResult(
        point=np.array(best_point),
        value=float(best_value),
        n_evaluated=len(points),
        n_failed=n_failed,
    )


@dataclass(frozen=True)
class IsocConfig:
    """Search space and schedule of the bi-level identification.

    ``parameter_sets`` lists the jointly searched parameter groups by name
    (``s1``..``sS``, ``sigma1``..``sigmaS``); a set may not mix cost and
    noise parameters.  ``initial_bounds`` maps every searched name to its
    [lo, hi] range.  Grids shrink by ``shrink_factor`` around the incumbent
    until the width falls below ``min_width_frac`` of the initial width or
    a whole level improves the objective by less than ``stall_tol``.
    """

    parameter_sets: tuple
    initial_bounds: dict
    grid_points_per_axis: int = 7
    shrink_factor: float = 0.5
    outer_iters: int = 3
    stall_tol: float = 1e-5
    min_width_frac: float = 1e-4
    solver_max_iters: int = DEFAULT_MAX_OUTER_ITERS
    solver_gain_tol: float = DEFAULT_GAIN_TOL
    n_jobs: int = 1
    extra_starts: tuple = ()

    def __post_init__(self):
        sets = tuple(tuple(group) for group in self.parameter_sets)
        if not sets or any(not group for group in sets):
            raise ConfigError("parameter_sets must be nonempty groups of names")
        bounds = {name: (float(lo), float(hi)) for name, (lo, hi) in self.initial_bounds.items()}
        for group in sets:
            kinds = {("sigma" if name.startswith("sigma") else "s") for name in group}
            if len(kinds) != 1:
                raise ConfigError(f"parameter set {group} mixes cost and noise parameters")
            for name in group:
                if name not in bounds:
                    raise ConfigError(f"no bounds given for searched parameter {name!r}")
        for name, (lo, hi) in bounds.items():
            if lo < 0 or hi < lo:
                raise ConfigError(f"bounds for {name!r} must satisfy 0 <= lo <= hi")
        if self.grid_points_per_axis < 2:
            raise ConfigError("grid_points_per_axis must be >= 2")
        if not 0.0 < self.shrink_factor < 1.0:
            raise ConfigError("shrink_factor must lie in (0, 1)")
        if self.outer_iters < 1:
            raise ConfigError("outer_iters must be >= 1")
        if self.stall_tol < 0:
            raise ConfigError("stall_tol must be nonnegative")
        object.__setattr__(self, "parameter_sets", sets)
        object.__setattr__(self, "initial_bounds", bounds)
        object.__setattr__(self, "extra_starts", tuple(dict(s) for s in self.extra_starts))

    def cost_sets(self):
        return tuple(g for g in self.parameter_sets if not g[0].startswith("sigma"))

    def noise_sets(self):
        return tuple(g for g in self.parameter_sets if g[0].startswith("sigma"))

    def searched_names(self):
        names = []
        for group in self.parameter_sets:
            names.extend(group)
        return tuple(dict.fromkeys(names))

    def to_dict(self) -> dict:
        return {
            "parameter_sets": [list(g) for g in self.parameter_sets],
            "initial_bounds": {k: list(v) for k, v in self.initial_bounds.items()},
            "grid_points_per_axis": self.grid_points_per_axis,
            "shrink_factor": self.shrink_factor,
            "outer_iters": self.outer_iters,
            "stall_tol": self.stall_tol,
            "min_width_frac": self.min_width_frac,
            "solver_max_iters": self.solver_max_iters,
            "solver_gain_tol": self.solver_gain_tol,
            "n_jobs": self.n_jobs,
            "extra_starts": [dict(s) for s in self.extra_starts],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "IsocConfig":
        return cls(
            parameter_sets=tuple(tuple(g) for g in data["parameter_sets"]),
            initial_bounds={k: tuple(v) for k, v in data["initial_bounds"].items()},
            grid_points_per_axis=int(data.get("grid_points_per_axis", 7)),
            shrink_factor=float(data.get("shrink_factor", 0.5)),
            outer_iters=int(data.get("outer_iters", 3)),
            stall_tol=float(data.get("stall_tol", 1e-5)),
            min_width_frac=float(data.get("min_width_frac", 1e-4)),
            solver_max_iters=int(data.get("solver_max_iters", DEFAULT_MAX_OUTER_ITERS)),
            solver_gain_tol=float(data.get("solver_gain_tol", DEFAULT_GAIN_TOL)),
            n_jobs=int(data.get("n_jobs", 1)),
            extra_starts=tuple(data.get("extra_starts", ())),
        )


@dataclass(frozen=True)
class IsocResult:
    """Identified parameters with the achieved fit.

    ``j_isoc`` is the cost-step-weighted objective at the identified
    parameters on the training moments.  ``trace`` logs
    (iteration, step, objective) for every accepted grid move; the
    objective is monotone within each step (steps use different weights).
    """

    params: ParamVectors
    j_isoc: float
    vaf_mean: np.ndarray
    vaf_cov: np.ndarray
    trace: tuple
    n_evaluations: int
    n_failures: int

    @property
    def s_hat(self) -> np.ndarray:
        return self.params.s

    @property
    def sigma_hat(self) -> np.ndarray:
        return self.params.sigma

    def to_dict(self) -> dict:
        return {
            "s_hat": self.s_hat.tolist(),
            "sigma_hat": self.sigma_hat.tolist(),
            "j_isoc": self.j_isoc,
            "vaf_mean": self.vaf_mean.tolist(),
            "vaf_cov": self.vaf_cov.tolist(),
            "n_evaluations": self.n_evaluations,
            "n_failures": self.n_failures,
            "trace": [[l, step, j] for l, step, j in self.trace],
        }

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    def save_trace_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("iteration,step,j_isoc\n")
            for l, step, j in self.trace:
                fh.write(f"{l},{step},{j!r}\n")


def _predicted_observed(params, build_problem, M, solver_max_iters, solver_gain_tol):
    prob = build_problem(params)
    gains = synthesize(prob, max_outer_iters=solver_max_iters, gain_tol=solver_gain_tol)
    return observed_moments(propagate(prob, gains), M)


def _objective(values, names, incumbent, build_problem, M, meas, weights, solver_max_iters, solver_gain_tol):
    params = incumbent.replace(**dict(zip(names, values)))
    pred = _predicted_observed(params, build_problem, M, solver_max_iters, solver_gain_tol)
    return j_isoc(pred, meas, weights)


def _objective_batch(points, names, incumbent, build_problem, M, meas, weights, solver_max_iters, solver_gain_tol):
    """Vectorized candidate evaluation; falls back to per-point evaluation."""
    from .batch import BatchIncompatible, batch_objective

    probs = [build_problem(incumbent.replace(**dict(zip(names, pt)))) for pt in points]
    try:
        return batch_objective(
            probs, M, meas, weights, max_outer_iters=solver_max_iters, gain_tol=solver_gain_tol
        )
    except BatchIncompatible:
        outcomes = [
            _safe_value(
                partial(
                    _objective,
                    names=names,
                    incumbent=incumbent,
                    build_problem=build_problem,
                    M=M,
                    meas=meas,
                    weights=weights,
                    solver_max_iters=solver_max_iters,
                    solver_gain_tol=solver_gain_tol,
                ),
                pt,
            )
            for pt in points
        ]
        values = np.array([v for v, _ in outcomes])
        failed = np.array([f for _, f in outcomes])
        return values, failed


class _Search:
    """One identification run from a single start point."""

    def __init__(self, build_problem, meas, cfg, M):
        self.build_problem = build_problem
        self.meas = meas
        self.cfg = cfg
        self.M = M
        self.trace = []
        self.n_evaluations = 0
        self.n_failures = 0

    def _evaluate_incumbent(self, params, weights):
        value, failed = _safe_value(
            partial(
                _objective,
                names=(),
                incumbent=params,
                build_problem=self.build_problem,
                M=self.M,
                meas=self.meas,
                weights=weights,
                solver_max_iters=self.cfg.solver_max_iters,
                solver_gain_tol=self.cfg.solver_gain_tol,
            ),
            (),
        )
        self.n_evaluations += 1
        self.n_failures += int(failed)
        return value

    def _axes(self, group, params, width_frac):
        axes = []
        for name in group:
            lo0, hi0 = self.cfg.initial_bounds[name]
            half = 0.5 * (hi0 - lo0) * width_frac
            center = params.value(name)
            lo = max(lo0, center - half)
            hi = min(hi0, center + half)
            axes.append(np.linspace(lo, hi, self.cfg.grid_points_per_axis))
        return axes

    def run_step(self, iteration, step_name, sets, weights, params):
        """Cycle grid searches over ``sets``, shrinking until width floor or stall."""
        cfg = self.cfg
        j_inc = self._evaluate_incumbent(params, weights)
        width_frac = 1.0
        while True:
            level_gain = 0.0
            while True:
                cycle_gain = 0.0
                for group in sets:
                    common = dict(
                        names=group,
                        incumbent=params,
                        build_problem=self.build_problem,
                        M=self.M,
                        meas=self.meas,
                        weights=weights,
                        solver_max_iters=cfg.solver_max_iters,
                        solver_gain_tol=cfg.solver_gain_tol,
                    )
                    center = np.array([params.value(name) for name in group])
                    result = grid_search_step(
                        partial(_objective, **common),
                        center,
                        self._axes(group, params, width_frac),
                        n_jobs=cfg.n_jobs,
                        evaluate_batch=partial(_objective_batch, **common),
                    )
                    self.n_evaluations += result.n_evaluated
                    self.n_failures += result.n_failed
                    if result.value > j_inc and not np.array_equal(result.point, center):
                        gain = result.value - j_inc if np.isfinite(j_inc) else np.inf
                        params = params.replace(**dict(zip(group, result.point)))
                        j_inc = result.value
                        self.trace.append((iteration, step_name, j_inc))
                        cycle_gain += gain
                        level_gain += gain
                if cycle_gain < cfg.stall_tol:
                    break
            width_frac *= cfg.shrink_factor
            if width_frac < cfg.min_width_frac or level_gain < cfg.stall_tol:
                break
        return params, j_inc


def identify(
    build_problem,
    base_params: ParamVectors,
    meas_mean,
    meas_cov,
    cfg: IsocConfig,
    w_cost: VafWeights,
    w_noise: VafWeights | None = None,
    M=None,
) -> IsocResult:
    """Identify cost and noise parameters from measured observed moments.

    ``build_problem`` maps a :class:`~lqsid.model.ParamVectors` to the
    forward problem; ``base_params`` supplies values of parameters outside
    the searched sets.  Searched parameters start at their bound midpoints
    (plus any ``cfg.extra_starts``).  Each outer iteration maximizes over
    the cost-parameter sets with ``w_cost``, then over the noise-parameter
    sets with ``w_noise``; iterations stop early once neither step improves
    its objective by ``cfg.stall_tol``.
    """
    meas_mean = np.asarray(meas_mean, dtype=float)
    meas_cov = np.asarray(meas_cov, dtype=float)
    if meas_mean.ndim != 2 or meas_cov.shape != (*meas_mean.shape, meas_mean.shape[1]):
        raise ValueError("measured moments must be (T, nbar) and (T, nbar, nbar)")
    cost_sets = cfg.cost_sets()
    noise_sets = cfg.noise_sets()
    if noise_sets and w_noise is None:
        raise ConfigError("noise-parameter sets are searched but no noise-step weights given")

    midpoints = {
        name: 0.5 * (lo + hi)
        for name, (lo, hi) in cfg.initial_bounds.items()
        if name in cfg.searched_names()
    }
    starts = [midpoints]
    starts += [{**midpoints, **dict(extra)} for extra in cfg.extra_starts]

    probe = build_problem(base_params.replace(**midpoints))
    if meas_mean.shape[0] != probe.N + 1:
        raise ValueError("measured moments must cover t = 0..N of the built problem")
    if M is None:
        M = selection_matrix(range(meas_mean.shape[1]), probe.n)
    meas = (meas_mean, meas_cov)

    best = None
    for start in starts:
        search = _Search(build_problem, meas, cfg, M)
        params = base_params.replace(**start)
        for iteration in range(1, cfg.outer_iters + 1):
            j_before_cost = search._evaluate_incumbent(params, w_cost)
            improved = 0.0
            if cost_sets:
                params, j_cost = search.run_step(iteration, "cost", cost_sets, w_cost, params)
                if np.isfinite(j_cost) and np.isfinite(j_before_cost):
                    improved = max(improved, j_cost - j_before_cost)
                elif np.isfinite(j_cost):
                    improved = np.inf
            if noise_sets:
                j_before_noise = search._evaluate_incumbent(params, w_noise)
                params, j_noise = search.run_step(iteration, "noise", noise_sets, w_noise, params)
                if np.isfinite(j_noise) and np.isfinite(j_before_noise):
                    improved = max(improved, j_noise - j_before_noise)
                elif np.isfinite(j_noise):
                    improved = np.inf
            if improved < cfg.stall_tol:
                break

        try:
            pred = _predicted_observed(
                params, build_problem, M, cfg.solver_max_iters, cfg.solver_gain_tol
            )
        except LqsidError as exc:
            raise SearchError(f"identified parameters failed final evaluation: {exc}") from exc
        vaf_mean, vaf_cov = vaf_report(pred, meas)
        j_final = j_isoc(pred, meas, w_cost)
        result = IsocResult(
            params=params,
            j_isoc=float(j_final),
            vaf_mean=vaf_mean,
            vaf_cov=vaf_cov,
            trace=tuple(search.trace),
            n_evaluations=search.n_evaluations,
            n_failures=search.n_failures,
        )
        if best is None or result.j_isoc > best.j_isoc:
            best = result
    return best
