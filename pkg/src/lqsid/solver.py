"""Finite-horizon gain synthesis for LQS, LQG and LQ problems.

Control gains ``L_t`` and estimator gains ``K_t`` are coupled through the
signal-dependent noise terms, so they are computed by alternating a backward
control pass (L given K) with a forward estimation pass (K given L) until
the gains stop changing.  The inner cost-to-go and second-moment recursions
follow Todorov (2005), "Stochastic optimal control and estimation methods
adapted to the noise characteristics of the sensorimotor system", Neural
Computation 17(5).  Without signal-dependent noise the passes decouple and
one alternation reproduces the classic time-varying Riccati/Kalman solution.

The alternation starts from ``K_t = 0``, so the first control pass is the
pure signal-dependent-noise LQR solution; this makes results deterministic
and reproducible.  Inner matrix inversions go through a Cholesky test and
failures are surfaced as :class:`~lqsid.errors.SolverError`, never silently
regularized.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import DivergenceError, SolverError
from .model import LqsProblem

__all__ = [
    "GainSchedule",
    "SolverWorkspace",
    "synthesize",
    "synthesize_full",
    "synthesize_lq",
    "DEFAULT_GAIN_TOL",
    "DEFAULT_MAX_OUTER_ITERS",
]

DEFAULT_GAIN_TOL = 1e-8
DEFAULT_MAX_OUTER_ITERS = 100


@dataclass(frozen=True)
class GainSchedule:
    """Time-indexed control gains L[t] (m x n) and estimator gains K[t] (n x r)."""

    L: np.ndarray
    K: np.ndarray
    iterations: int
    converged: bool

    def __post_init__(self):
        L = np.asarray(self.L, dtype=float)
        K = np.asarray(self.K, dtype=float)
        if L.ndim != 3 or K.ndim != 3 or L.shape[0] != K.shape[0]:
            raise ValueError("L and K must be (N, m, n) and (N, n, r) stacks")
        if not (np.isfinite(L).all() and np.isfinite(K).all()):
            raise ValueError("gain schedules must be finite")
        object.__setattr__(self, "L", L)
        object.__setattr__(self, "K", K)

    @property
    def N(self) -> int:
        return self.L.shape[0]

    def to_dict(self) -> dict:
        return {
            "L": self.L.tolist(),
            "K": self.K.tolist(),
            "iterations": self.iterations,
            "converged": self.converged,
        }

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)


@dataclass
class SolverWorkspace:
    """Inner recursion state of the last alternation.

    ``Zx``/``Ze`` are cost-to-go matrices from the backward control pass;
    ``Pe``/``Pxh``/``Pxhe`` are second moments of estimation error,
    estimate, and their cross term from the forward estimation pass
    (``Pexh`` is the transpose of ``Pxhe``).  ``gain_deltas`` records the
    max elementwise gain change per outer iteration.
    """

    Zx: np.ndarray
    Ze: np.ndarray
    Pe: np.ndarray
    Pxh: np.ndarray
    Pxhe: np.ndarray
    gain_deltas: list = field(default_factory=list)

    @property
    def Pexh(self) -> np.ndarray:
        return np.swapaxes(self.Pxhe, -1, -2)


def _spd_solve(S, rhs, context):
    """Solve S x = rhs for symmetric positive definite S.

    Cholesky acts as the definiteness test; failure means the problem is
    ill-posed at this step (e.g. R not positive definite, or a degenerate
    innovation covariance).
    """
    if S.shape == (1, 1):
        v = S[0, 0]
        if not np.isfinite(v) or v <= 0.0:
            raise SolverError(f"{context}: inner matrix not positive definite")
        return rhs / v
    try:
        np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        raise SolverError(f"{context}: inner matrix not positive definite") from None
    return np.linalg.solve(S, rhs)


def _sym(mat):
    return 0.5 * (mat + mat.T)


def _control_pass(prob: LqsProblem, K, with_estimator: bool):
    """Backward pass: L[t] given estimator gains K[t]; returns (L, Zx, Ze).

    Overflow in a diverging recursion is tolerated here and surfaced as
    DivergenceError by the finiteness check at the end of the pass.
    """
    A, B, Q, R = prob.A, prob.B, prob.Q, prob.R
    H = prob.H
    n, m, N = prob.n, prob.m, prob.N
    C = prob.c_matrices()
    D = prob.d_matrices() if with_estimator else []

    L = np.empty((N, m, n))
    Zx = np.empty((N + 1, n, n))
    Ze = np.empty((N + 1, n, n))
    Zx[N] = prob.Q_N
    Ze[N] = 0.0

    At = A.T
    with np.errstate(over="ignore", invalid="ignore"):
        for t in range(N - 1, -1, -1):
            Zx1 = Zx[t + 1]
            Ze1 = Ze[t + 1]
            ZxB = Zx1 @ B
            inner = R + B.T @ ZxB
            if C:
                Zsum = Zx1 + Ze1
                for Ci in C:
                    inner = inner + Ci.T @ Zsum @ Ci
            Lt = _spd_solve(inner, ZxB.T @ A, f"control pass t={t}")
            L[t] = Lt

            Zx_t = Q + At @ Zx1 @ (A - B @ Lt)
            if with_estimator:
                Kt = K[t]
                if D:
                    KZK = Kt.T @ Ze1 @ Kt
                    for Dj in D:
                        Zx_t = Zx_t + Dj.T @ KZK @ Dj
                AKH = A - Kt @ H
                Ze_t = At @ (ZxB @ Lt) + AKH.T @ Ze1 @ AKH
                Ze[t] = _sym(Ze_t)
            else:
                # fully observable: no estimation error, Ze stays zero
                Ze[t] = 0.0
            Zx[t] = _sym(Zx_t)

    if not (np.isfinite(Zx).all() and np.isfinite(Ze).all() and np.isfinite(L).all()):
        raise DivergenceError("control pass produced non-finite values")
    return L, Zx, Ze


def _estimation_pass(prob: LqsProblem, L):
    """Forward pass: K[t] given control gains L[t]; returns (K, Pe, Pxh, Pxhe).

    Propagates the exact second moments of estimation error e = x - xhat,
    estimate xhat, and their cross term, choosing K[t] from the innovation
    covariance at each step.  Estimator internal noise is zero throughout.
    """
    A, B, H = prob.A, prob.B, prob.H
    n, r, N = prob.n, prob.r, prob.N
    C = prob.c_matrices()
    D = prob.d_matrices()
    om_xi = prob.omega_xi()
    om_om = prob.omega_omega()
    Ht = H.T

    K = np.empty((N, n, r))
    Pe = np.empty((N + 1, n, n))
    Pxh = np.empty((N + 1, n, n))
    Pxhe = np.empty((N + 1, n, n))
    Pe[0] = prob.x0_cov
    Pxh[0] = np.outer(prob.x0_mean, prob.x0_mean)
    Pxhe[0] = 0.0

    with np.errstate(over="ignore", invalid="ignore"):
        for t in range(N):
            Pe_t, Pxh_t, Pxhe_t = Pe[t], Pxh[t], Pxhe[t]
            PeHt = Pe_t @ Ht
            HPeHt = H @ PeHt
            # V: innovation covariance apart from the propagated error term
            V = om_om
            if D:
                Px = Pe_t + Pxh_t + Pxhe_t + Pxhe_t.T
                V = om_om + sum(Dj @ Px @ Dj.T for Dj in D)
            Kt = _spd_solve(_sym(HPeHt + V), PeHt.T @ A.T, f"estimation pass t={t}").T
            K[t] = Kt

            Lt = L[t]
            KtH = Kt @ H
            AKH = A - KtH
            ABL = A - B @ Lt
            KVK = Kt @ V @ Kt.T
            Pe_next = AKH @ Pe_t @ AKH.T + om_xi + KVK
            if C:
                LPL = Lt @ Pxh_t @ Lt.T
                for Ci in C:
                    Pe_next = Pe_next + Ci @ LPL @ Ci.T
            KH_Pe = KtH @ Pe_t
            KSK = Kt @ HPeHt @ Kt.T + KVK
            cross = ABL @ Pxhe_t @ KtH.T
            Pxh_next = ABL @ Pxh_t @ ABL.T + cross + cross.T + KSK
            Pxhe_next = ABL @ Pxhe_t @ AKH.T + KH_Pe @ AKH.T - KVK

            Pe[t + 1] = _sym(Pe_next)
            Pxh[t + 1] = _sym(Pxh_next)
            Pxhe[t + 1] = Pxhe_next

    if not (np.isfinite(K).all() and np.isfinite(Pe).all() and np.isfinite(Pxh).all()):
        raise DivergenceError("estimation pass produced non-finite values")
    return K, Pe, Pxh, Pxhe


def synthesize_full(
    prob: LqsProblem,
    max_outer_iters: int = DEFAULT_MAX_OUTER_ITERS,
    gain_tol: float = DEFAULT_GAIN_TOL,
):
    """Alternate control and estimation passes; returns (gains, workspace).

    Convergence is declared when the max elementwise change of both gain
    stacks between consecutive outer iterations drops below ``gain_tol``.
    Fully observable problems need a single backward pass (the estimation
    side is inactive) and report one iteration.
    """
    if max_outer_iters < 1:
        raise ValueError("max_outer_iters must be >= 1")
    if gain_tol <= 0:
        raise ValueError("gain_tol must be positive")
    n, r, N = prob.n, prob.r, prob.N

    if prob.full_observation:
        L, Zx, Ze = _control_pass(prob, None, with_estimator=False)
        gains = GainSchedule(L=L, K=np.zeros((N, n, r)), iterations=1, converged=True)
        zeros = np.zeros((N + 1, n, n))
        ws = SolverWorkspace(Zx=Zx, Ze=Ze, Pe=zeros, Pxh=zeros.copy(), Pxhe=zeros.copy(), gain_deltas=[0.0])
        return gains, ws

    K = np.zeros((N, n, r))
    L_prev = None
    K_prev = None
    deltas = []
    converged = False
    iterations = 0
    for _ in range(max_outer_iters):
        iterations += 1
        L, Zx, Ze = _control_pass(prob, K, with_estimator=True)
        K, Pe, Pxh, Pxhe = _estimation_pass(prob, L)
        if L_prev is not None:
            delta = max(
                float(np.max(np.abs(L - L_prev), initial=0.0)),
                float(np.max(np.abs(K - K_prev), initial=0.0)),
            )
            deltas.append(delta)
            if delta < gain_tol:
                converged = True
                break
        L_prev, K_prev = L, K

    gains = GainSchedule(L=L, K=K, iterations=iterations, converged=converged)
    ws = SolverWorkspace(Zx=Zx, Ze=Ze, Pe=Pe, Pxh=Pxh, Pxhe=Pxhe, gain_deltas=deltas)
    return gains, ws


def synthesize(
    prob: LqsProblem,
    max_outer_iters: int = DEFAULT_MAX_OUTER_ITERS,
    gain_tol: float = DEFAULT_GAIN_TOL,
) -> GainSchedule:
    """Compute the time-varying gain schedule for ``prob``."""
    gains, _ = synthesize_full(prob, max_outer_iters=max_outer_iters, gain_tol=gain_tol)
    return gains


def synthesize_lq(prob: LqsProblem) -> GainSchedule:
    """Single backward Riccati pass for a noise-free problem.

    The estimate passes the state through, so K is an unused zero stack.
    """
    if prob.control_noise or prob.state_noise:
        raise ValueError("synthesize_lq requires a problem without signal-dependent noise")
    if np.any(prob.sigma_xi) or np.any(prob.sigma_omega):
        raise ValueError("synthesize_lq requires a problem without additive noise")
    L, _, _ = _control_pass(prob, None, with_estimator=False)
    return GainSchedule(L=L, K=np.zeros((prob.N, prob.n, prob.r)), iterations=1, converged=True)
