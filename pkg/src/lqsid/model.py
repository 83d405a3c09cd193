"""Problem definitions for linear-quadratic sensorimotor (LQS) control models.

:class:`LqsProblem` bundles discrete-time linear dynamics and output maps,
additive process/observation noise scalings, control-dependent noise in the
state equation, state-dependent noise in the output equation, a quadratic
cost, and the horizon.  LQG and deterministic LQ variants are derived by
stripping noise terms (:func:`reduce_to_lqg`, :func:`reduce_to_lq`).

:func:`build_driving_problem` assembles the steering-task instance used
throughout the package: a spring-damper steering wheel driven through a
second-order muscle filter, with the target angle carried as a constant
fifth state so the cost stays purely quadratic.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass

import numpy as np
from scipy.linalg import expm

__all__ = [
    "LqsProblem",
    "DrivingParams",
    "ParamVectors",
    "MODEL_KINDS",
    "build_driving_problem",
    "reduce_to_lqg",
    "reduce_to_lq",
    "reduce_problem",
    "problem_to_dict",
    "problem_from_dict",
    "save_problem",
    "load_problem",
]

MODEL_KINDS = ("lq", "lqg", "lqs")

# tolerance below which a symmetric matrix counts as PSD (min eigenvalue)
PSD_TOL = -1e-9
SYM_TOL = 1e-9


def _array(value, name, shape=None, dtype=float):
    arr = np.array(value, dtype=dtype)
    if shape is not None and arr.shape != shape:
        raise ValueError(f"{name} must have shape {shape}, got {arr.shape}")
    arr.setflags(write=False)
    return arr


def _check_symmetric(mat, name):
    if mat.shape[0] != mat.shape[1] or np.max(np.abs(mat - mat.T), initial=0.0) > SYM_TOL:
        raise ValueError(f"{name} must be symmetric")


def _check_psd(mat, name):
    _check_symmetric(mat, name)
    if mat.size and np.linalg.eigvalsh(mat)[0] < PSD_TOL:
        raise ValueError(f"{name} must be positive semi-definite")


def _check_pd(mat, name):
    _check_symmetric(mat, name)
    try:
        np.linalg.cholesky(mat)
    except np.linalg.LinAlgError:
        raise ValueError(f"{name} must be positive definite") from None


@dataclass(frozen=True, eq=False)
class LqsProblem:
    """Finite-horizon LQS control problem.

    Dynamics per step::

        x[t+1] = A x[t] + B u[t] + sigma_xi a[t] + sum_i e_i[t] C_i u[t]
        y[t]   = H x[t] + sigma_omega b[t] + sum_j f_j[t] D_j x[t]

    with ``a, b`` standard Gaussian vectors and ``e_i, f_j`` independent
    standard Gaussian scalars.  ``control_noise`` holds pairs ``(scale, F)``
    defining ``C_i = scale * B @ F``; ``state_noise`` holds pairs
    ``(scale, G)`` defining ``D_j = scale * H @ G``.  Cost is
    ``x[N]' Q_N x[N] + sum_t x[t]' Q x[t] + u[t]' R u[t]``.

    With ``full_observation`` the controller acts on the true state
    (estimate identical to state); estimator-side fields are ignored.
    Instances are immutable and safe to share across workers.
    """

    A: np.ndarray
    B: np.ndarray
    H: np.ndarray
    sigma_xi: np.ndarray
    sigma_omega: np.ndarray
    control_noise: tuple
    state_noise: tuple
    Q_N: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    N: int
    x0_mean: np.ndarray
    x0_cov: np.ndarray
    full_observation: bool = False

    def __post_init__(self):
        A = _array(self.A, "A")
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise ValueError("A must be square")
        n = A.shape[0]
        B = _array(self.B, "B")
        if B.ndim != 2 or B.shape[0] != n:
            raise ValueError("B must be n x m")
        m = B.shape[1]
        H = _array(self.H, "H")
        if H.ndim != 2 or H.shape[1] != n:
            raise ValueError("H must be r x n")
        r = H.shape[0]
        sigma_xi = _array(self.sigma_xi, "sigma_xi")
        if sigma_xi.ndim != 2 or sigma_xi.shape[0] != n:
            raise ValueError("sigma_xi must be n x p")
        sigma_omega = _array(self.sigma_omega, "sigma_omega")
        if sigma_omega.ndim != 2 or sigma_omega.shape[0] != r:
            raise ValueError("sigma_omega must be r x q")

        control_noise = tuple(
            (float(s), _array(F, "control_noise F", (m, m))) for s, F in self.control_noise
        )
        state_noise = tuple(
            (float(s), _array(G, "state_noise G", (n, n))) for s, G in self.state_noise
        )
        if any(s < 0 for s, _ in control_noise) or any(s < 0 for s, _ in state_noise):
            raise ValueError("noise scaling parameters must be nonnegative")

        Q_N = _array(self.Q_N, "Q_N", (n, n))
        Q = _array(self.Q, "Q", (n, n))
        R = _array(self.R, "R", (m, m))
        _check_psd(Q_N, "Q_N")
        _check_psd(Q, "Q")
        _check_pd(R, "R")

        if int(self.N) < 1:
            raise ValueError("horizon N must be a positive integer")
        x0_mean = _array(self.x0_mean, "x0_mean", (n,))
        x0_cov = _array(self.x0_cov, "x0_cov", (n, n))
        _check_psd(x0_cov, "x0_cov")

        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "H", H)
        object.__setattr__(self, "sigma_xi", sigma_xi)
        object.__setattr__(self, "sigma_omega", sigma_omega)
        object.__setattr__(self, "control_noise", control_noise)
        object.__setattr__(self, "state_noise", state_noise)
        object.__setattr__(self, "Q_N", Q_N)
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "N", int(self.N))
        object.__setattr__(self, "x0_mean", x0_mean)
        object.__setattr__(self, "x0_cov", x0_cov)
        object.__setattr__(self, "full_observation", bool(self.full_observation))

    def __eq__(self, other):
        if not isinstance(other, LqsProblem):
            return NotImplemented
        for f in dataclasses.fields(self):
            a, b = getattr(self, f.name), getattr(other, f.name)
            if f.name in ("control_noise", "state_noise"):
                if len(a) != len(b) or any(
                    sa != sb or not np.array_equal(Fa, Fb) for (sa, Fa), (sb, Fb) in zip(a, b)
                ):
                    return False
            elif isinstance(a, np.ndarray):
                if not np.array_equal(a, b):
                    return False
            elif a != b:
                return False
        return True

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    @property
    def r(self) -> int:
        return self.H.shape[0]

    def c_matrices(self):
        """Control-dependent noise matrices C_i = scale_i * B @ F_i."""
        return [s * self.B @ F for s, F in self.control_noise]

    def d_matrices(self):
        """State-dependent noise matrices D_j = scale_j * H @ G_j."""
        return [s * self.H @ G for s, G in self.state_noise]

    def omega_xi(self):
        """Additive process-noise covariance sigma_xi @ sigma_xi'."""
        return self.sigma_xi @ self.sigma_xi.T

    def omega_omega(self):
        """Additive observation-noise covariance sigma_omega @ sigma_omega'."""
        return self.sigma_omega @ self.sigma_omega.T


@dataclass(frozen=True)
class DrivingParams:
    """Physical constants and horizon of the steering task.

    Defaults are the experiment values: steering-wheel inertia ``theta``
    (kg m^2), spring constant ``c`` (N m), damping ``d`` (N m s), muscle
    filter time constants ``tau1``/``tau2`` (s), 100 Hz sampling, and a
    +120 degree target.
    """

    theta: float = 0.056
    c: float = 1.146
    d: float = 0.859
    tau1: float = 0.04
    tau2: float = 0.04
    dt: float = 0.01
    phi_ref: float = 2.0 * np.pi / 3.0
    N: int = 100

    def __post_init__(self):
        for name in ("theta", "c", "d", "tau1", "tau2", "dt"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be strictly positive")
        if int(self.N) < 1:
            raise ValueError("horizon N must be a positive integer")
        object.__setattr__(self, "N", int(self.N))


@dataclass(frozen=True)
class ParamVectors:
    """Cost parameters ``s`` and noise scaling parameters ``sigma``.

    For the steering task ``s`` has 4 entries (terminal angle error,
    terminal velocity, terminal torque, control effort) and ``sigma`` has
    11 entries (4 additive process, 3 additive observation, 1
    control-dependent, 3 state-dependent).  All entries are nonnegative and
    the control-effort weight (last entry of ``s``) must be positive.
    """

    s: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        s = _array(self.s, "s")
        sigma = _array(self.sigma, "sigma")
        if s.ndim != 1 or s.size < 1:
            raise ValueError("s must be a nonempty vector")
        if sigma.ndim != 1:
            raise ValueError("sigma must be a vector")
        if np.any(s < 0) or np.any(sigma < 0):
            raise ValueError("parameters must be nonnegative")
        if s[-1] <= 0:
            raise ValueError("control cost parameter (last entry of s) must be positive")
        object.__setattr__(self, "s", s)
        object.__setattr__(self, "sigma", sigma)

    def replace(self, **updates) -> "ParamVectors":
        values = {"s": np.array(self.s), "sigma": np.array(self.sigma)}
        for name, value in updates.items():
            vec, idx = self.locate(name)
            values[vec][idx] = value
        return ParamVectors(values["s"], values["sigma"])

    def locate(self, name: str):
        """Map a parameter name like ``s2`` or ``sigma8`` to (vector, index)."""
        if name.startswith("sigma"):
            idx = int(name[5:]) - 1
            if not 0 <= idx < self.sigma.size:
                raise KeyError(name)
            return "sigma", idx
        if name.startswith("s"):
            idx = int(name[1:]) - 1
            if not 0 <= idx < self.s.size:
                raise KeyError(name)
            return "s", idx
        raise KeyError(name)

    def value(self, name: str) -> float:
        vec, idx = self.locate(name)
        return float(getattr(self, vec)[idx])


def _continuous_driving_matrices(p: DrivingParams):
    # state [phi, phidot, torque, excitation, phi_ref]; phi_ref has constant
    # dynamics and never feeds the plant
    a = np.zeros((5, 5))
    a[0, 1] = 1.0
    a[1, 0] = -p.c / p.theta
    a[1, 1] = -p.d / p.theta
    a[1, 2] = 1.0 / p.theta
    a[2, 2] = -1.0 / p.tau2
    a[2, 3] = 1.0 / p.tau2
    a[3, 3] = -1.0 / p.tau1
    b = np.zeros((5, 1))
    b[3, 0] = 1.0 / p.tau1
    return a, b


def _zoh_discretize(a, b, dt):
    # exact zero-order hold: expm of the stacked [[A, B], [0, 0]] * dt
    n, m = b.shape
    block = np.zeros((n + m, n + m))
    block[:n, :n] = a
    block[:n, n:] = b
    phi = expm(block * dt)
    return phi[:n, :n], phi[:n, n:]


def terminal_cost_matrix(s, n=5) -> np.ndarray:
    """Quadratic form for s1*(x1 - x5)^2 + s2*x2^2 + s3*x3^2."""
    q = np.zeros((n, n))
    q[0, 0] = s[0]
    q[n - 1, n - 1] = s[0]
    q[0, n - 1] = q[n - 1, 0] = -s[0]
    q[1, 1] = s[1]
    q[2, 2] = s[2]
    return q


def build_driving_problem(
    p: DrivingParams,
    params: ParamVectors,
    x0_mean=None,
    x0_cov=None,
) -> LqsProblem:
    """Assemble the discrete-time steering-task LQS problem.

    5 states (angle, velocity, torque, excitation, target), 1 input, 3
    outputs (angle, velocity, torque).  ``params.s`` fills the terminal cost
    and control effort; ``params.sigma`` fills, in order, the four additive
    process scalings, three additive observation scalings, the
    control-dependent scaling, and three state-dependent scalings.  The
    default initial state is rest at angle zero with the target in the
    fifth component and zero covariance.
    """
    if params.s.size != 4 or params.sigma.size != 11:
        raise ValueError("driving problem expects 4 cost and 11 noise parameters")
    a_c, b_c = _continuous_driving_matrices(p)
    A, B = _zoh_discretize(a_c, b_c, p.dt)
    H = np.hstack([np.eye(3), np.zeros((3, 2))])

    sig = params.sigma
    # additive process noise enters the first four states only
    sigma_xi = np.vstack([np.diag(sig[:4]), np.zeros((1, 4))])
    sigma_omega = np.diag(sig[4:7])
    control_noise = ((float(sig[7]), np.eye(1)),)
    state_noise = tuple(
        (float(sig[8 + j]), np.diag(np.eye(5)[j])) for j in range(3)
    )

    Q_N = terminal_cost_matrix(params.s)
    Q = np.zeros((5, 5))
    R = np.array([[params.s[3]]])

    if x0_mean is None:
        x0_mean = np.array([0.0, 0.0, 0.0, 0.0, p.phi_ref])
    if x0_cov is None:
        x0_cov = np.zeros((5, 5))

    return LqsProblem(
        A=A,
        B=B,
        H=H,
        sigma_xi=sigma_xi,
        sigma_omega=sigma_omega,
        control_noise=control_noise,
        state_noise=state_noise,
        Q_N=Q_N,
        Q=Q,
        R=R,
        N=p.N,
        x0_mean=x0_mean,
        x0_cov=x0_cov,
    )


def reduce_to_lqg(prob: LqsProblem) -> LqsProblem:
    """Copy with signal-dependent noise removed; additive noise retained."""
    return dataclasses.replace(prob, control_noise=(), state_noise=())


def reduce_to_lq(prob: LqsProblem) -> LqsProblem:
    """Copy with all noise scalings zeroed and full observation assumed."""
    return dataclasses.replace(
        prob,
        control_noise=(),
        state_noise=(),
        sigma_xi=np.zeros_like(np.asarray(prob.sigma_xi)),
        sigma_omega=np.zeros_like(np.asarray(prob.sigma_omega)),
        full_observation=True,
    )


def reduce_problem(prob: LqsProblem, kind: str) -> LqsProblem:
    if kind == "lqs":
        return prob
    if kind == "lqg":
        return reduce_to_lqg(prob)
    if kind == "lq":
        return reduce_to_lq(prob)
    raise ValueError(f"unknown model kind {kind!r}; expected one of {MODEL_KINDS}")


def problem_to_dict(prob: LqsProblem) -> dict:
    """JSON-ready dict mirroring the field list (matrices row-major)."""
    return {
        "A": prob.A.tolist(),
        "B": prob.B.tolist(),
        "H": prob.H.tolist(),
        "sigma_xi": prob.sigma_xi.tolist(),
        "sigma_omega": prob.sigma_omega.tolist(),
        "control_noise": [{"scale": s, "F": F.tolist()} for s, F in prob.control_noise],
        "state_noise": [{"scale": s, "G": G.tolist()} for s, G in prob.state_noise],
        "Q_N": prob.Q_N.tolist(),
        "Q": prob.Q.tolist(),
        "R": prob.R.tolist(),
        "N": prob.N,
        "x0_mean": prob.x0_mean.tolist(),
        "x0_cov": prob.x0_cov.tolist(),
        "full_observation": prob.full_observation,
    }


def problem_from_dict(data: dict) -> LqsProblem:
    return LqsProblem(
        A=data["A"],
        B=data["B"],
        H=data["H"],
        sigma_xi=data["sigma_xi"],
        sigma_omega=data["sigma_omega"],
        control_noise=tuple((item["scale"], item["F"]) for item in data["control_noise"]),
        state_noise=tuple((item["scale"], item["G"]) for item in data["state_noise"]),
        Q_N=data["Q_N"],
        Q=data["Q"],
        R=data["R"],
        N=data["N"],
        x0_mean=data["x0_mean"],
        x0_cov=data["x0_cov"],
        full_observation=data.get("full_observation", False),
    )


def save_problem(prob: LqsProblem, path) -> None:
    with open(path, "w") as fh:
        json.dump(problem_to_dict(prob), fh, indent=2)


def load_problem(path) -> LqsProblem:
    with open(path) as fh:
        return problem_from_dict(json.load(fh))
