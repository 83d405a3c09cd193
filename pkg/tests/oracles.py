"""Independent reference implementations used as test oracles.

Deliberately written in textbook form, sharing no code with the package:
finite-horizon Riccati/Kalman recursions, a truncated-series matrix
exponential, and random LQG problem generators.
"""

import numpy as np

from lqsid.model import LqsProblem


def riccati_gains(A, B, Q, Q_N, R, N):
    """Backward discrete Riccati recursion; returns L[t], t = 0..N-1."""
    P = np.array(Q_N, dtype=float)
    m, n = B.shape[1], A.shape[0]
    L = np.empty((N, m, n))
    for t in range(N - 1, -1, -1):
        L[t] = np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)
        P = Q + A.T @ P @ A - A.T @ P @ B @ L[t]
        P = 0.5 * (P + P.T)
    return L


def kalman_gains(A, H, W, V, P0, N):
    """Predictor-form time-varying Kalman gains; returns K[t], t = 0..N-1."""
    P = np.array(P0, dtype=float)
    n, r = A.shape[0], H.shape[0]
    K = np.empty((N, n, r))
    for t in range(N):
        S = H @ P @ H.T + V
        K[t] = A @ P @ H.T @ np.linalg.inv(S)
        P = A @ P @ A.T - K[t] @ S @ K[t].T + W
        P = 0.5 * (P + P.T)
    return K


def expm_series(M, tol=1e-16):
    """Matrix exponential by scaling-and-squaring of a truncated Taylor series."""
    M = np.asarray(M, dtype=float)
    norm = np.max(np.abs(M))
    squarings = max(0, int(np.ceil(np.log2(norm / 0.5))) if norm > 0.5 else 0)
    Ms = M / (2.0**squarings)
    out = np.eye(M.shape[0])
    term = np.eye(M.shape[0])
    for k in range(1, 60):
        term = term @ Ms / k
        out = out + term
        if np.max(np.abs(term)) < tol:
            break
    for _ in range(squarings):
        out = out @ out
    return out


def random_lqg_problem(rng, n_max=6, N_max=200):
    """Random well-posed, well-scaled problem without signal-dependent noise.

    Stable dynamics and unit-scale costs keep gains O(1), so two float
    implementations of the same recursions can be compared at absolute
    tolerances over horizons of hundreds of steps.
    """
    n = int(rng.integers(2, n_max + 1))
    m = int(rng.integers(1, 3))
    r = int(rng.integers(1, n + 1))
    N = int(rng.integers(5, N_max + 1))
    A = rng.normal(size=(n, n))
    A *= rng.uniform(0.5, 0.92) / max(np.abs(np.linalg.eigvals(A)))
    B = rng.normal(size=(n, m)) * 0.4
    H = rng.normal(size=(r, n))
    H /= np.linalg.norm(H, axis=1, keepdims=True)
    q = rng.normal(size=(n, n)) * 0.3
    qn = rng.normal(size=(n, n)) / np.sqrt(n)
    rr = rng.normal(size=(m, m)) * 0.5
    sxi = rng.normal(size=(n, n)) * 0.2
    som = rng.normal(size=(r, r)) * 0.1 + 0.4 * np.eye(r)
    x0c = rng.normal(size=(n, n)) * 0.5
    return LqsProblem(
        A=A,
        B=B,
        H=H,
        sigma_xi=sxi,
        sigma_omega=som,
        control_noise=(),
        state_noise=(),
        Q_N=qn @ qn.T,
        Q=q @ q.T,
        R=rr @ rr.T + np.eye(m),
        N=N,
        x0_mean=rng.normal(size=n),
        x0_cov=x0c @ x0c.T,
    )
