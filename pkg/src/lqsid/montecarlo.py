"""Pathwise sampling of the closed-loop system.

Rollouts provide an independent check of the analytic moment recursions and
generate synthetic datasets for identification tests.  Reproducibility
contract: rollouts are simulated in chunks of :data:`CHUNK` trajectories;
chunk ``j`` draws exclusively from ``numpy.random.default_rng((seed, j))``
and is always simulated at full chunk size, so rollout ``k`` depends only on
``(seed, k // CHUNK)`` and batches are bit-identical for a given seed
regardless of the requested count or how chunks are scheduled across
workers.  Within a chunk the draw order per step is: x0 deviations, then
additive process draws, control-dependent scalars, additive observation
draws, state-dependent scalars (observation-side draws are skipped for
fully observable problems).
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass

import numpy as np

from .errors import DivergenceError
from .model import DrivingParams, LqsProblem, ParamVectors, build_driving_problem, problem_to_dict, reduce_problem
from .solver import GainSchedule, synthesize

__all__ = [
    "CHUNK",
    "RolloutBatch",
    "rollout",
    "sample_moments",
    "export_batch",
    "problem_hash",
    "simulate_session",
]

CHUNK = 1024


@dataclass(frozen=True)
class RolloutBatch:
    """Sampled state trajectories: shape (count, N+1, n)."""

    trajectories: np.ndarray
    seed: int
    count: int

    def __post_init__(self):
        traj = np.asarray(self.trajectories, dtype=float)
        if traj.ndim != 3 or traj.shape[0] != self.count:
            raise ValueError("trajectories must have shape (count, N+1, n)")
        if not np.isfinite(traj).all():
            raise ValueError("trajectories must be finite")
        object.__setattr__(self, "trajectories", traj)


def _psd_factor(cov):
    """Factor S = F F' of a PSD matrix, tolerant of zero eigenvalues."""
    w, v = np.linalg.eigh(cov)
    if w.size and w[0] < -1e-9:
        raise ValueError("covariance factor requested for an indefinite matrix")
    return v * np.sqrt(np.clip(w, 0.0, None))


def _simulate_chunk(prob, gains, rng, size):
    n, N = prob.n, prob.N
    A, B, H = prob.A, prob.B, prob.H
    sigma_xi, sigma_omega = prob.sigma_xi, prob.sigma_omega
    C = prob.c_matrices()
    D = prob.d_matrices()
    p = sigma_xi.shape[1]
    q = sigma_omega.shape[1]
    full = prob.full_observation

    out = np.empty((size, N + 1, n))
    x0f = _psd_factor(prob.x0_cov)
    x = prob.x0_mean + rng.standard_normal((size, n)) @ x0f.T
    xh = np.broadcast_to(prob.x0_mean, (size, n)).copy()
    out[:, 0] = x

    for t in range(N):
        u = -(xh @ gains.L[t].T)
        x_next = x @ A.T + u @ B.T
        if p:
            x_next += rng.standard_normal((size, p)) @ sigma_xi.T
        for i, Ci in enumerate(C):
            x_next += rng.standard_normal((size, 1)) * (u @ Ci.T)
        if full:
            xh = x_next
        else:
            y = x @ H.T
            if q:
                y = y + rng.standard_normal((size, q)) @ sigma_omega.T
            for Dj in D:
                y = y + rng.standard_normal((size, 1)) * (x @ Dj.T)
            xh = xh @ A.T + u @ B.T + (y - xh @ H.T) @ gains.K[t].T
        x = x_next
        out[:, t + 1] = x
    return out


def rollout(prob: LqsProblem, gains: GainSchedule, count: int, seed: int) -> RolloutBatch:
    """Sample ``count`` closed-loop trajectories of the true state."""
    if count < 1:
        raise ValueError("count must be >= 1")
    if gains.N != prob.N:
        raise ValueError("gain horizon does not match problem horizon")
    parts = []
    start = 0
    chunk_idx = 0
    while start < count:
        size = min(CHUNK, count - start)
        rng = np.random.default_rng((seed, chunk_idx))
        # always simulate the full chunk so rollout k depends only on
        # (seed, k // CHUNK) and batches are prefix-stable across counts
        parts.append(_simulate_chunk(prob, gains, rng, CHUNK)[:size])
        start += size
        chunk_idx += 1
    traj = np.concatenate(parts, axis=0) if len(parts) > 1 else parts[0]
    if not np.isfinite(traj).all():
        raise DivergenceError("rollout produced non-finite states (diverging closed loop)")
    return RolloutBatch(trajectories=traj, seed=int(seed), count=int(count))


def sample_moments(batch: RolloutBatch, M=None) -> tuple[np.ndarray, np.ndarray]:
    """Unbiased per-step sample mean and covariance of M-projected states."""
    if batch.count < 2:
        raise ValueError("need at least 2 rollouts for a covariance estimate")
    traj = batch.trajectories
    if M is not None:
        traj = traj @ np.asarray(M, dtype=float).T
    mean = traj.mean(axis=0)
    centered = traj - mean
    cov = np.einsum("kti,ktj->tij", centered, centered) / (batch.count - 1)
    return mean, cov


def problem_hash(prob: LqsProblem) -> str:
    payload = json.dumps(problem_to_dict(prob), sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()


def export_batch(batch: RolloutBatch, dt: float, out_dir, prob: LqsProblem | None = None, M=None) -> dict:
    """Write one CSV per rollout plus a manifest JSON; returns the manifest."""
    os.makedirs(out_dir, exist_ok=True)
    traj = batch.trajectories
    if M is not None:
        traj = traj @ np.asarray(M, dtype=float).T
    steps = traj.shape[1]
    time = np.arange(steps) * dt
    names = [f"state_{i + 1}" for i in range(traj.shape[2])]
    files = []
    for k in range(batch.count):
        fname = f"rollout_{k:05d}.csv"
        files.append(fname)
        table = np.column_stack([time, traj[k]])
        np.savetxt(
            os.path.join(out_dir, fname),
            table,
            delimiter=",",
            header=",".join(["time_s", *names]),
            comments="",
        )
    manifest = {
        "schema_version": 1,
        "seed": batch.seed,
        "count": batch.count,
        "dt": dt,
        "problem_sha256": problem_hash(prob) if prob is not None else None,
        "files": files,
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2)
    return manifest


def simulate_session(
    p: DrivingParams,
    params: ParamVectors,
    kind: str = "lqs",
    repetitions: int = 14,
    plateau_steps: int = 100,
    movement_steps: int = 70,
    seed: int = 0,
    subject_id: str = "synthetic",
    sensor_noise: float = 0.0,
):
    """Simulate a full steering session in the raw-session format.

    The reference repeats ``repetitions`` times the piecewise constant
    pattern 0, +phi_ref, 0, -phi_ref, each plateau ``plateau_steps`` long.
    Each plateau is executed as a planned movement over ``movement_steps``
    followed by a hold plan over the remainder (both finite-horizon gain
    schedules of the model ``kind``, synthesized once and reused).  State
    and estimate evolve continuously across the session, with the known
    target written into the fifth state component at each plateau change.
    ``sensor_noise`` adds white measurement noise to the recorded angle
    (the true state is unaffected), which the preparation pipeline's
    smoothing is meant to remove.  Returns a
    :class:`~lqsid.pipeline.RawSession`.
    """
    from .pipeline import RawSession

    if not 1 <= movement_steps <= plateau_steps:
        raise ValueError("movement_steps must lie in [1, plateau_steps]")

    def plan(horizon):
        base = DrivingParams(
            theta=p.theta, c=p.c, d=p.d, tau1=p.tau1, tau2=p.tau2, dt=p.dt,
            phi_ref=p.phi_ref, N=horizon,
        )
        prob = reduce_problem(build_driving_problem(base, params), kind)
        return prob, synthesize(prob)

    prob, gains_move = plan(movement_steps)
    hold_steps = plateau_steps - movement_steps
    gains_hold = plan(hold_steps)[1] if hold_steps else None

    A, B, H = prob.A, prob.B, prob.H
    sigma_xi, sigma_omega = prob.sigma_xi, prob.sigma_omega
    C = prob.c_matrices()
    D = prob.d_matrices()
    p_dim = sigma_xi.shape[1]
    q_dim = sigma_omega.shape[1]
    full = prob.full_observation
    rng = np.random.default_rng(seed)

    pattern = [0.0, p.phi_ref, 0.0, -p.phi_ref] * repetitions
    total = len(pattern) * plateau_steps
    angle = np.empty(total)
    reference = np.empty(total)

    x = np.zeros(prob.n)
    xh = np.zeros(prob.n)
    i = 0
    for target in pattern:
        x[4] = target
        xh[4] = target
        for t in range(plateau_steps):
            angle[i] = x[0]
            reference[i] = target
            i += 1
            if t < movement_steps:
                Lt, Kt = gains_move.L[t], gains_move.K[t]
            else:
                Lt, Kt = gains_hold.L[t - movement_steps], gains_hold.K[t - movement_steps]
            u = -(Lt @ xh)
            x_next = A @ x + B @ u
            if p_dim:
                x_next += sigma_xi @ rng.standard_normal(p_dim)
            for Ci in C:
                x_next += rng.standard_normal() * (Ci @ u)
            if full:
                xh = x_next
            else:
                y = H @ x
                if q_dim:
                    y = y + sigma_omega @ rng.standard_normal(q_dim)
                for Dj in D:
                    y = y + rng.standard_normal() * (Dj @ x)
                xh = A @ xh + B @ u + Kt @ (y - H @ xh)
            x = x_next

    if not np.isfinite(angle).all():
        raise DivergenceError("session simulation diverged")
    if sensor_noise:
        angle = angle + sensor_noise * rng.standard_normal(total)
    time = np.arange(total) * p.dt
    return RawSession(time=time, angle=angle, reference=reference, subject_id=subject_id)
