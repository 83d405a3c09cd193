"""Exact mean and covariance propagation of the closed-loop system.

The joint process (state, estimate) is linear in (state, estimate) with
noise whose covariance depends only on the current first and second
moments, so mean and covariance obey closed recursions.  The
control-dependent noise adds a term driven by the second moment of the
estimate to the state block; the state-dependent observation noise adds a
term driven by the second moment of the state to the estimate block
(through the estimator gain).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import DivergenceError
from .model import LqsProblem
from .solver import GainSchedule

__all__ = ["MomentTrajectory", "propagate", "observed_moments", "selection_matrix"]

SYM_TOL = 1e-10
PSD_TOL = -1e-9


@dataclass(frozen=True)
class MomentTrajectory:
    """Joint moments of (state, estimate) over t = 0..N.

    ``mean[t]`` stacks (E[x_t], E[xhat_t]) as a 2n-vector; ``cov[t]`` is the
    corresponding 2n x 2n joint covariance.
    """

    mean: np.ndarray
    cov: np.ndarray

    @property
    def n(self) -> int:
        return self.mean.shape[1] // 2

    @property
    def N(self) -> int:
        return self.mean.shape[0] - 1

    def state_mean(self) -> np.ndarray:
        """E[x_t], shape (N+1, n)."""
        return self.mean[:, : self.n]

    def state_cov(self) -> np.ndarray:
        """Cov[x_t], shape (N+1, n, n)."""
        return self.cov[:, : self.n, : self.n]

    def validate(self, sym_tol: float = SYM_TOL, psd_tol: float = PSD_TOL) -> None:
        """Raise if any covariance is asymmetric or indefinite beyond tolerance."""
        asym = np.max(np.abs(self.cov - np.swapaxes(self.cov, 1, 2)), initial=0.0)
        if asym > sym_tol:
            raise DivergenceError(f"covariance asymmetry {asym:.2e} exceeds {sym_tol:.0e}")
        for t in range(self.cov.shape[0]):
            w = np.linalg.eigvalsh(self.cov[t])
            if w[0] < psd_tol:
                raise DivergenceError(f"covariance at t={t} has eigenvalue {w[0]:.2e}")

    def to_csv(self, path) -> None:
        """Columns: t, mean entries, upper-triangular covariance entries."""
        dim = self.mean.shape[1]
        iu = np.triu_indices(dim)
        header = ["t"]
        header += [f"mean_{i + 1}" for i in range(dim)]
        header += [f"cov_{i + 1}_{j + 1}" for i, j in zip(*iu)]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for t in range(self.mean.shape[0]):
                row = [t, *self.mean[t], *self.cov[t][iu]]
                writer.writerow([repr(float(v)) if isinstance(v, float) else v for v in row])


def _check_gains(prob: LqsProblem, gains: GainSchedule):
    if gains.N != prob.N:
        raise ValueError(f"gain horizon {gains.N} does not match problem horizon {prob.N}")
    if gains.L.shape[1:] != (prob.m, prob.n) or gains.K.shape[1:] != (prob.n, prob.r):
        raise ValueError("gain dimensions do not match the problem")


def _psd_guard(cov, t):
    if not np.isfinite(cov).all():
        raise DivergenceError(f"moment propagation diverged at t={t}")
    w = np.linalg.eigvalsh(cov)
    if w[0] < PSD_TOL:
        raise DivergenceError(
            f"covariance at t={t} lost positive semi-definiteness (min eig {w[0]:.2e})"
        )


def propagate(prob: LqsProblem, gains: GainSchedule, psd_check: bool = True) -> MomentTrajectory:
    """Propagate joint mean and covariance of (state, estimate) over the horizon.

    Initial condition: the estimate starts at the state mean with zero
    covariance, so only the state block of the joint covariance is nonzero.
    Fully observable problems propagate the state moments directly and
    report estimate blocks identical to the state blocks.
    """
    _check_gains(prob, gains)
    n, N = prob.n, prob.N
    A, B, H = prob.A, prob.B, prob.H
    C = prob.c_matrices()
    D = prob.d_matrices()
    om_xi = prob.omega_xi()

    if prob.full_observation:
        mean_x = np.empty((N + 1, n))
        cov_x = np.empty((N + 1, n, n))
        mean_x[0] = prob.x0_mean
        cov_x[0] = prob.x0_cov
        # overflow in a diverging loop is tolerated; the guard raises on it
        with np.errstate(over="ignore", invalid="ignore"):
            for t in range(N):
                ABL = A - B @ gains.L[t]
                mu, om = mean_x[t], cov_x[t]
                cov_next = ABL @ om @ ABL.T + om_xi
                if C:
                    LmL = gains.L[t] @ (om + np.outer(mu, mu)) @ gains.L[t].T
                    for Ci in C:
                        cov_next = cov_next + Ci @ LmL @ Ci.T
                mean_x[t + 1] = ABL @ mu
                cov_x[t + 1] = 0.5 * (cov_next + cov_next.T)
                if psd_check:
                    _psd_guard(cov_x[t + 1], t + 1)
        mean = np.hstack([mean_x, mean_x])
        cov = np.block([[cov_x, cov_x], [cov_x, cov_x]])
        return MomentTrajectory(mean=mean, cov=cov)

    om_om = prob.omega_omega()
    mean = np.empty((N + 1, 2 * n))
    cov = np.empty((N + 1, 2 * n, 2 * n))
    mean[0] = np.concatenate([prob.x0_mean, prob.x0_mean])
    cov[0] = 0.0
    cov[0, :n, :n] = prob.x0_cov

    joint = np.empty((2 * n, 2 * n))
    with np.errstate(over="ignore", invalid="ignore"):
        for t in range(N):
            Lt, Kt = gains.L[t], gains.K[t]
            BL = B @ Lt
            KH = Kt @ H
            joint[:n, :n] = A
            joint[:n, n:] = -BL
            joint[n:, :n] = KH
            joint[n:, n:] = A - KH - BL

            mean[t + 1] = joint @ mean[t]
            cov_next = joint @ cov[t] @ joint.T
            cov_next[:n, :n] += om_xi
            cov_next[n:, n:] += Kt @ om_om @ Kt.T
            if C:
                mu_hat = mean[t, n:]
                LmL = Lt @ (cov[t, n:, n:] + np.outer(mu_hat, mu_hat)) @ Lt.T
                for Ci in C:
                    cov_next[:n, :n] += Ci @ LmL @ Ci.T
            if D:
                mu_x = mean[t, :n]
                Mx = cov[t, :n, :n] + np.outer(mu_x, mu_x)
                for Dj in D:
                    KD = Kt @ Dj
                    cov_next[n:, n:] += KD @ Mx @ KD.T
            cov[t + 1] = 0.5 * (cov_next + cov_next.T)
            if psd_check:
                _psd_guard(cov[t + 1], t + 1)

    if not np.isfinite(mean).all():
        raise DivergenceError("mean propagation diverged")
    return MomentTrajectory(mean=mean, cov=cov)


def selection_matrix(indices, n) -> np.ndarray:
    """Rows of the n x n identity picking out ``indices``."""
    M = np.zeros((len(indices), n))
    for row, idx in enumerate(indices):
        M[row, idx] = 1.0
    return M


def _check_selection(M, n):
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[1] != n:
        raise ValueError(f"selection matrix must have {n} columns")
    eye = np.eye(n)
    for row in M:
        if not any(np.array_equal(row, e) for e in eye):
            raise ValueError("selection matrix rows must be rows of the identity")
    return M


def observed_moments(mt: MomentTrajectory, M) -> tuple[np.ndarray, np.ndarray]:
    """Project state moments onto the measured channels: (M E[x], M Cov[x] M')."""
    M = _check_selection(M, mt.n)
    means = mt.state_mean() @ M.T
    covs = np.einsum("ij,tjk,lk->til", M, mt.state_cov(), M)
    return means, covs
