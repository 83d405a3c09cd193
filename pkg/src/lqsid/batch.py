"""Vectorized grid evaluation: many parameter candidates at once.

Grid candidates built by one problem factory share dynamics, output map,
horizon and initial state; only cost matrices and noise scalings differ.
Stacking those per-candidate arrays lets the gain and moment recursions run
as batched matmuls over the whole grid, which is how grid points are
evaluated "in parallel" here.  Failures (indefinite inner matrices,
divergence) are isolated per candidate through a failure mask; failed
slices are overwritten with identity placeholders so the rest of the batch
keeps computing, and their objective values are reported as -inf.

Results agree with the scalar path to floating-point noise; the identified
incumbent is always re-scored through the scalar path (with its full PSD
guard) before being reported.
"""

from __future__ import annotations

import numpy as np

from .errors import LqsidError, VafUndefinedError

__all__ = ["stack_problems", "batch_gains", "batch_observed_moments", "batch_objective"]


class BatchIncompatible(LqsidError):
    """Candidates do not share the structure required for stacking."""


def stack_problems(probs):
    """Stack per-candidate problem data; raises BatchIncompatible otherwise."""
    first = probs[0]
    for prob in probs[1:]:
        if (
            prob.N != first.N
            or prob.full_observation != first.full_observation
            or len(prob.control_noise) != len(first.control_noise)
            or len(prob.state_noise) != len(first.state_noise)
            or not np.array_equal(prob.A, first.A)
            or not np.array_equal(prob.B, first.B)
            or not np.array_equal(prob.H, first.H)
            or not np.array_equal(prob.x0_mean, first.x0_mean)
            or not np.array_equal(prob.x0_cov, first.x0_cov)
        ):
            raise BatchIncompatible("grid candidates do not share problem structure")
    return {
        "A": first.A,
        "B": first.B,
        "H": first.H,
        "N": first.N,
        "full_observation": first.full_observation,
        "x0_mean": first.x0_mean,
        "x0_cov": first.x0_cov,
        "Q_N": np.stack([p.Q_N for p in probs]),
        "Q": np.stack([p.Q for p in probs]),
        "R": np.stack([p.R for p in probs]),
        "om_xi": np.stack([p.omega_xi() for p in probs]),
        "om_om": np.stack([p.omega_omega() for p in probs]),
        "C": [np.stack(mats) for mats in zip(*(p.c_matrices() for p in probs))],
        "D": [np.stack(mats) for mats in zip(*(p.d_matrices() for p in probs))],
    }


def _sym(mat):
    return 0.5 * (mat + np.swapaxes(mat, -1, -2))


def _T(mat):
    return np.swapaxes(mat, -1, -2)


def _not_pd(S):
    """Per-candidate test that a symmetric stack is NOT positive definite."""
    k = S.shape[-1]
    bad = ~np.isfinite(S).all(axis=(-2, -1))
    Sf = np.where(bad[:, None, None], np.eye(k), S)
    if k == 1:
        return bad | (Sf[:, 0, 0] <= 0)
    if k == 2:
        return bad | (Sf[:, 0, 0] <= 0) | (np.linalg.det(Sf) <= 0)
    if k == 3:
        d1 = Sf[:, 0, 0]
        d2 = Sf[:, 0, 0] * Sf[:, 1, 1] - Sf[:, 0, 1] * Sf[:, 1, 0]
        d3 = np.linalg.det(Sf)
        return bad | (d1 <= 0) | (d2 <= 0) | (d3 <= 0)
    w = np.linalg.eigvalsh(Sf)
    return bad | (w[:, 0] <= 0)


def _solve_spd(S, rhs, failed):
    """Batched solve with per-candidate failure isolation."""
    k = S.shape[-1]
    failed |= _not_pd(S)
    if k == 1:
        safe = np.where(failed, 1.0, S[:, 0, 0])
        return rhs / safe[:, None, None]
    S_safe = np.where(failed[:, None, None], np.eye(k), S)
    rhs_safe = np.where(failed[:, None, None], 0.0, rhs)
    return np.linalg.solve(S_safe, rhs_safe)


def _control_pass(data, K, failed):
    A, B, H = data["A"], data["B"], data["H"]
    N = data["N"]
    G = data["Q_N"].shape[0]
    n, m = B.shape
    C, D = data["C"], data["D"]
    with_estimator = not data["full_observation"]

    L = np.empty((G, N, m, n))
    Zx = data["Q_N"].copy()
    Ze = np.zeros((G, n, n))
    At = A.T
    for t in range(N - 1, -1, -1):
        ZxB = Zx @ B
        inner = data["R"] + B.T @ ZxB
        if C:
            Zsum = Zx + Ze
            for Ci in C:
                inner = inner + _T(Ci) @ Zsum @ Ci
        Lt = _solve_spd(inner, _T(ZxB) @ A, failed)
        L[:, t] = Lt

        Zx_next = data["Q"] + At @ Zx @ (A - B @ Lt)
        if with_estimator:
            Kt = K[:, t]
            if D:
                KZK = _T(Kt) @ Ze @ Kt
                for Dj in D:
                    Zx_next = Zx_next + _T(Dj) @ KZK @ Dj
            AKH = A - Kt @ H
            Ze = _sym(At @ (ZxB @ Lt) + _T(AKH) @ Ze @ AKH)
        Zx = _sym(Zx_next)
        bad = ~np.isfinite(Zx).all(axis=(1, 2))
        if bad.any():
            failed |= bad
            L[bad, t] = 0.0
            Zx = np.where(bad[:, None, None], np.eye(n), Zx)
            Ze = np.where(bad[:, None, None], 0.0, Ze)
    failed |= ~np.isfinite(L).all(axis=(1, 2, 3))
    return L, failed


def _estimation_pass(data, L, failed):
    A, B, H = data["A"], data["B"], data["H"]
    N = data["N"]
    G = data["Q_N"].shape[0]
    n = A.shape[0]
    r = H.shape[0]
    C, D = data["C"], data["D"]
    om_xi, om_om = data["om_xi"], data["om_om"]
    Ht = H.T

    K = np.empty((G, N, n, r))
    Pe = np.broadcast_to(data["x0_cov"], (G, n, n)).copy()
    Pxh = np.broadcast_to(np.outer(data["x0_mean"], data["x0_mean"]), (G, n, n)).copy()
    Pxhe = np.zeros((G, n, n))

    for t in range(N):
        PeHt = Pe @ Ht
        HPeHt = H @ PeHt
        V = om_om
        if D:
            Px = Pe + Pxh + Pxhe + _T(Pxhe)
            V = om_om + sum(Dj @ Px @ _T(Dj) for Dj in D)
        Kt = _T(_solve_spd(_sym(HPeHt + V), _T(PeHt) @ A.T, failed))
        K[:, t] = Kt

        Lt = L[:, t]
        KtH = Kt @ H
        AKH = A - KtH
        ABL = A - B @ Lt
        KVK = Kt @ V @ _T(Kt)
        Pe_next = AKH @ Pe @ _T(AKH) + om_xi + KVK
        if C:
            LPL = Lt @ Pxh @ _T(Lt)
            for Ci in C:
                Pe_next = Pe_next + Ci @ LPL @ _T(Ci)
        KH_Pe = KtH @ Pe
        KSK = Kt @ HPeHt @ _T(Kt) + KVK
        cross = ABL @ Pxhe @ _T(KtH)
        Pxh_next = ABL @ Pxh @ _T(ABL) + cross + _T(cross) + KSK
        Pxhe = ABL @ Pxhe @ _T(AKH) + KH_Pe @ _T(AKH) - KVK
        Pe = _sym(Pe_next)
        Pxh = _sym(Pxh_next)

        bad = ~np.isfinite(Pe).all(axis=(1, 2))
        if bad.any():
            failed |= bad
            Pe = np.where(bad[:, None, None], np.eye(n), Pe)
            Pxh = np.where(bad[:, None, None], np.eye(n), Pxh)
            Pxhe = np.where(bad[:, None, None], 0.0, Pxhe)
    failed |= ~np.isfinite(K).all(axis=(1, 2, 3))
    return K, failed


def batch_gains(probs, max_outer_iters=100, gain_tol=1e-8):
    """Batched gain synthesis; returns (L, K, failed) stacks over candidates.

    Matches the scalar alternation (K starts at zero, same recursions);
    candidates that fail or diverge are flagged, not raised.  Overflow in
    failing slices is expected and silenced; the failure mask carries it.
    """
    with np.errstate(over="ignore", invalid="ignore"):
        return _batch_gains(probs, max_outer_iters, gain_tol)


def _batch_gains(probs, max_outer_iters, gain_tol):
    data = stack_problems(probs)
    G = len(probs)
    N = data["N"]
    n = data["A"].shape[0]
    r = data["H"].shape[0]
    failed = np.zeros(G, dtype=bool)

    if data["full_observation"]:
        L, failed = _control_pass(data, None, failed)
        return L, np.zeros((G, N, n, r)), failed

    K = np.zeros((G, N, n, r))
    L_prev = None
    K_prev = None
    for _ in range(max_outer_iters):
        L, failed = _control_pass(data, K, failed)
        K, failed = _estimation_pass(data, L, failed)
        if L_prev is not None:
            delta = np.maximum(
                np.abs(L - L_prev).reshape(G, -1).max(axis=1),
                np.abs(K - K_prev).reshape(G, -1).max(axis=1),
            )
            if np.all(failed | (delta < gain_tol)):
                break
        L_prev, K_prev = L, K
    return L, K, failed


def batch_observed_moments(probs, L, K, M, failed):
    """Batched closed-loop moment propagation projected onto M.

    Divergence is flagged per candidate; the per-step PSD guard of the
    scalar path is deferred to the scalar re-evaluation of the winner.
    """
    with np.errstate(over="ignore", invalid="ignore"):
        return _batch_observed_moments(probs, L, K, M, failed)


def _batch_observed_moments(probs, L, K, M, failed):
    data = stack_problems(probs)
    A, B, H = data["A"], data["B"], data["H"]
    N = data["N"]
    G = len(probs)
    n = A.shape[0]
    C, D = data["C"], data["D"]
    om_xi, om_om = data["om_xi"], data["om_om"]
    M = np.asarray(M, dtype=float)
    nbar = M.shape[0]

    pm = np.empty((G, N + 1, nbar))
    pc = np.empty((G, N + 1, nbar, nbar))

    if data["full_observation"]:
        mean = np.broadcast_to(data["x0_mean"], (G, n)).copy()
        cov = np.broadcast_to(data["x0_cov"], (G, n, n)).copy()
        pm[:, 0] = mean @ M.T
        pc[:, 0] = M @ cov @ M.T
        for t in range(N):
            Lt = L[:, t]
            ABL = A - B @ Lt
            mu2 = cov + mean[:, :, None] * mean[:, None, :]
            cov_next = ABL @ cov @ _T(ABL) + om_xi
            if C:
                LmL = Lt @ mu2 @ _T(Lt)
                for Ci in C:
                    cov_next = cov_next + Ci @ LmL @ _T(Ci)
            mean = (ABL @ mean[:, :, None])[:, :, 0]
            cov = _sym(cov_next)
            bad = ~(np.isfinite(cov).all(axis=(1, 2)) & np.isfinite(mean).all(axis=1))
            if bad.any():
                failed |= bad
                cov = np.where(bad[:, None, None], np.eye(n), cov)
                mean = np.where(bad[:, None], 0.0, mean)
            pm[:, t + 1] = mean @ M.T
            pc[:, t + 1] = M @ cov @ M.T
        return pm, pc, failed

    mean = np.broadcast_to(
        np.concatenate([data["x0_mean"], data["x0_mean"]]), (G, 2 * n)
    ).copy()
    cov = np.zeros((G, 2 * n, 2 * n))
    cov[:, :n, :n] = data["x0_cov"]
    pm[:, 0] = mean[:, :n] @ M.T
    pc[:, 0] = M @ cov[:, :n, :n] @ M.T
    joint = np.empty((G, 2 * n, 2 * n))
    for t in range(N):
        Lt, Kt = L[:, t], K[:, t]
        BL = B @ Lt
        KH = Kt @ H
        joint[:, :n, :n] = A
        joint[:, :n, n:] = -BL
        joint[:, n:, :n] = KH
        joint[:, n:, n:] = A - KH - BL
        cov_next = joint @ cov @ _T(joint)
        cov_next[:, :n, :n] += om_xi
        cov_next[:, n:, n:] += Kt @ om_om @ _T(Kt)
        if C:
            mu = mean[:, n:]
            Mh = cov[:, n:, n:] + mu[:, :, None] * mu[:, None, :]
            LmL = Lt @ Mh @ _T(Lt)
            for Ci in C:
                cov_next[:, :n, :n] += Ci @ LmL @ _T(Ci)
        if D:
            mu = mean[:, :n]
            Mx = cov[:, :n, :n] + mu[:, :, None] * mu[:, None, :]
            for Dj in D:
                KD = Kt @ Dj
                cov_next[:, n:, n:] += KD @ Mx @ _T(KD)
        mean = (joint @ mean[:, :, None])[:, :, 0]
        cov = _sym(cov_next)
        bad = ~(np.isfinite(cov).all(axis=(1, 2)) & np.isfinite(mean).all(axis=1))
        if bad.any():
            failed |= bad
            cov = np.where(bad[:, None, None], np.eye(2 * n), cov)
            mean = np.where(bad[:, None], 0.0, mean)
        pm[:, t + 1] = mean[:, :n] @ M.T
        pc[:, t + 1] = M @ cov[:, :n, :n] @ M.T
    return pm, pc, failed


def batch_objective(probs, M, meas, weights, max_outer_iters=100, gain_tol=1e-8):
    """Objective values for a candidate batch; failed candidates get -inf.

    A VAF-undefined measured channel is a data/config problem, not a
    candidate problem, so it propagates as an exception.
    """
    meas_mean, meas_cov = meas
    L, K, failed = batch_gains(probs, max_outer_iters=max_outer_iters, gain_tol=gain_tol)
    pm, pc, failed = batch_observed_moments(probs, L, K, M, failed)
    nbar = meas_mean.shape[1]
    pm = np.where(failed[:, None, None], 0.0, pm)
    pc = np.where(failed[:, None, None, None], 0.0, pc)
    values = np.zeros(len(probs))
    with np.errstate(over="ignore", invalid="ignore"):
        for i in np.flatnonzero(weights.w_mean):
            denom = float(np.sum((meas_mean[:, i] - meas_mean[:, i].mean()) ** 2))
            if denom == 0.0:
                raise VafUndefinedError("measured mean sequence is constant; VAF undefined")
            resid = np.sum((pm[:, :, i] - meas_mean[None, :, i]) ** 2, axis=1)
            values += weights.w_mean[i] * (1.0 - resid / denom)
        for flat in np.flatnonzero(weights.w_cov):
            i, j = divmod(int(flat), nbar)
            denom = float(np.sum((meas_cov[:, i, j] - meas_cov[:, i, j].mean()) ** 2))
            if denom == 0.0:
                raise VafUndefinedError(
                    "measured covariance sequence is constant; VAF undefined"
                )
            resid = np.sum((pc[:, :, i, j] - meas_cov[None, :, i, j]) ** 2, axis=1)
            values += weights.w_cov[flat] * (1.0 - resid / denom)
        values = values / weights.total
        failed = failed | ~np.isfinite(values)
    values[failed] = -np.inf
    return values, failed
