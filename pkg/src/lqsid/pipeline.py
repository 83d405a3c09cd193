"""Preparation of repeated-trial steering measurements.

A raw session is a 100 Hz recording of steering angle plus the piecewise
constant reference it tracked.  Preparation: cubic smoothing-spline fit of
the angle (parameter chosen by generalized cross-validation unless given),
velocity from the analytic spline derivative, per-repetition segmentation
by velocity thresholds, alignment to the averaged movement duration, and
per-step mean/covariance estimates of (angle, velocity).

Movement start: the last sample before motion where the angle is near zero
and the speed is below a threshold that starts at 0.1 rad/s and is relaxed
in 0.01 steps up to 0.4 rad/s; repetitions that never satisfy even the
relaxed condition are dropped.  Movement end: the first settled sample near
the target at speed below 0.1 rad/s; repetitions without an ending are kept
for the moment estimates but excluded from duration averaging.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, replace

import numpy as np
from scipy.interpolate import make_smoothing_spline

from .model import DrivingParams

__all__ = [
    "RawSession",
    "MovementSegment",
    "TrialEnsemble",
    "KinematicFeatures",
    "smooth_and_differentiate",
    "reference_steps",
    "segment_movements",
    "average_duration",
    "ensemble_moments",
    "process_session",
    "split_train_validation",
    "mirrored",
    "kinematic_features",
    "initial_state_from_ensemble",
    "read_session",
    "write_session",
    "read_manifest",
    "write_ensemble",
    "read_ensemble",
]

SAMPLE_PERIOD = 0.01
ANGLE_TOL = 0.05
START_THRESHOLD = 0.1
THRESHOLD_STEP = 0.01
MAX_THRESHOLD = 0.4
END_THRESHOLD = 0.1


@dataclass(frozen=True)
class RawSession:
    """Uniformly sampled steering recording (100 Hz)."""

    time: np.ndarray
    angle: np.ndarray
    reference: np.ndarray
    subject_id: str = ""
    velocity: np.ndarray | None = None

    def __post_init__(self):
        time = np.asarray(self.time, dtype=float)
        angle = np.asarray(self.angle, dtype=float)
        reference = np.asarray(self.reference, dtype=float)
        if not (time.shape == angle.shape == reference.shape) or time.ndim != 1:
            raise ValueError("time, angle and reference must be equal-length 1-D arrays")
        if time.size >= 2 and np.max(np.abs(np.diff(time) - SAMPLE_PERIOD)) > 1e-6:
            raise ValueError("session must be uniformly sampled at 100 Hz")
        object.__setattr__(self, "time", time)
        object.__setattr__(self, "angle", angle)
        object.__setattr__(self, "reference", reference)
        if self.velocity is not None:
            velocity = np.asarray(self.velocity, dtype=float)
            if velocity.shape != angle.shape:
                raise ValueError("velocity must match the angle sequence")
            object.__setattr__(self, "velocity", velocity)

    @property
    def dt(self) -> float:
        return SAMPLE_PERIOD


@dataclass(frozen=True)
class MovementSegment:
    """One aligned repetition: samples from movement start to plateau end."""

    angle: np.ndarray
    velocity: np.ndarray
    start_index: int
    end_index: int | None
    target: float
    threshold: float

    @property
    def duration(self) -> int | None:
        return None if self.end_index is None else self.end_index - self.start_index


@dataclass(frozen=True)
class TrialEnsemble:
    """Aligned repetitions with per-step moment estimates.

    ``m_hat`` is (N+1, 2) over (angle, velocity); ``omega_hat`` is
    (N+1, 2, 2).  ``dropped`` counts repetitions removed by the start rule.
    """

    trials: tuple
    N: int
    m_hat: np.ndarray
    omega_hat: np.ndarray
    dropped: int
    retained: int
    target: float = 0.0
    subject_id: str = ""
    # per-retained-repetition metadata from segmentation
    thresholds: tuple = ()
    durations: tuple = ()

    def __post_init__(self):
        m_hat = np.asarray(self.m_hat, dtype=float)
        omega_hat = np.asarray(self.omega_hat, dtype=float)
        if m_hat.shape != (self.N + 1, 2) or omega_hat.shape != (self.N + 1, 2, 2):
            raise ValueError("moment estimates must cover t = 0..N for (angle, velocity)")
        if np.max(np.abs(omega_hat - np.swapaxes(omega_hat, 1, 2)), initial=0.0) > 1e-12:
            raise ValueError("covariance estimates must be symmetric")
        if self.retained < 2:
            raise ValueError("need at least 2 retained repetitions")
        object.__setattr__(self, "m_hat", m_hat)
        object.__setattr__(self, "omega_hat", omega_hat)


def smooth_and_differentiate(session: RawSession, smoothing: float | None = None) -> RawSession:
    """Replace the angle by a cubic smoothing-spline fit and attach its derivative.

    ``smoothing`` is the spline penalty; None selects it by generalized
    cross-validation.
    """
    if session.time.size < 4:
        raise ValueError("need at least 4 samples to fit a cubic smoothing spline")
    spline = make_smoothing_spline(session.time, session.angle, lam=smoothing)
    angle = spline(session.time)
    velocity = spline.derivative()(session.time)
    return replace(session, angle=angle, velocity=velocity)


def reference_steps(session: RawSession, step_sign: int):
    """Indices and plateau extents of reference steps away from zero.

    Returns a list of (step_index, window_start, plateau_end) where
    ``step_index`` is the first sample of the new plateau, ``window_start``
    the first sample of the preceding plateau, and ``plateau_end`` one past
    the last sample of the target plateau.
    """
    if step_sign not in (-1, 1):
        raise ValueError("step_sign must be +1 or -1")
    ref = session.reference
    changes = list(np.flatnonzero(np.diff(ref) != 0.0) + 1)
    bounds = [0, *changes, ref.size]
    steps = []
    for k, idx in enumerate(changes):
        old, new = ref[idx - 1], ref[idx]
        if abs(old) < 1e-12 and np.sign(new) == step_sign:
            window_start = bounds[k]
            plateau_end = bounds[k + 2]
            steps.append((int(idx), int(window_start), int(plateau_end)))
    return steps


def _find_start(angle, velocity, window, angle_tol):
    lo, hi = window
    near_zero = np.abs(angle[lo:hi]) <= angle_tol
    speed = np.abs(velocity[lo:hi])
    for k in range(int(round((MAX_THRESHOLD - START_THRESHOLD) / THRESHOLD_STEP)) + 1):
        thr = START_THRESHOLD + THRESHOLD_STEP * k
        hits = np.flatnonzero(near_zero & (speed < thr))
        if hits.size:
            return lo + int(hits[-1]), thr
    return None, None


def segment_movements(session: RawSession, step_sign: int, angle_tol: float = ANGLE_TOL):
    """Extract one segment per reference step of the requested sign.

    Requires a session with velocity (run :func:`smooth_and_differentiate`
    first).  Repetitions whose start condition fails even at the maximally
    relaxed threshold are dropped; compare against
    :func:`reference_steps` to count them.
    """
    if session.velocity is None:
        raise ValueError("segment_movements needs a session with velocity")
    steps = reference_steps(session, step_sign)
    if not steps:
        raise ValueError(f"no reference steps of sign {step_sign:+d} in session")
    angle, velocity = session.angle, session.velocity
    segments = []
    for step_idx, window_start, plateau_end in steps:
        start, thr = _find_start(angle, velocity, (window_start, plateau_end), angle_tol)
        if start is None:
            continue
        target = session.reference[step_idx]
        settled = (np.abs(angle[start:plateau_end] - target) <= angle_tol) & (
            np.abs(velocity[start:plateau_end]) < END_THRESHOLD
        )
        hits = np.flatnonzero(settled)
        end = start + int(hits[0]) if hits.size else None
        segments.append(
            MovementSegment(
                angle=angle[start:plateau_end].copy(),
                velocity=velocity[start:plateau_end].copy(),
                start_index=start,
                end_index=end,
                target=float(target),
                threshold=float(thr),
            )
        )
    if not segments:
        raise ValueError("all movement repetitions were dropped by the start rule")
    return segments


def average_duration(segments) -> int:
    """Averaged movement duration (steps) over repetitions with an ending."""
    durations = [seg.duration for seg in segments if seg.duration is not None]
    if not durations:
        raise ValueError("no repetition satisfied the movement-ending condition")
    return int(round(float(np.mean(durations))))


def ensemble_moments(segments, N: int, dropped: int = 0, subject_id: str = "") -> TrialEnsemble:
    """Align segments to N+1 samples and estimate per-step moments.

    Segments shorter than N+1 are extended by holding their last sample;
    longer ones are truncated.  Covariances use the unbiased divisor K-1.
    """
    if len(segments) < 2:
        raise ValueError("need at least 2 segments to estimate moments")
    trials = []
    for seg in segments:
        data = np.column_stack([seg.angle, seg.velocity])
        if data.shape[0] >= N + 1:
            data = data[: N + 1]
        else:
            pad = np.repeat(data[-1:], N + 1 - data.shape[0], axis=0)
            data = np.vstack([data, pad])
        trials.append(data)
    stack = np.stack(trials)
    m_hat = stack.mean(axis=0)
    centered = stack - m_hat
    omega_hat = np.einsum("kti,ktj->tij", centered, centered) / (len(trials) - 1)
    return TrialEnsemble(
        trials=tuple(trials),
        N=int(N),
        m_hat=m_hat,
        omega_hat=omega_hat,
        dropped=int(dropped),
        retained=len(trials),
        target=float(segments[0].target),
        subject_id=subject_id,
        thresholds=tuple(seg.threshold for seg in segments),
        durations=tuple(seg.duration for seg in segments),
    )


def process_session(
    session: RawSession,
    step_sign: int,
    angle_tol: float = ANGLE_TOL,
    smoothing: float | None = None,
) -> TrialEnsemble:
    """Full preparation of one session for one step sign."""
    if session.velocity is None:
        session = smooth_and_differentiate(session, smoothing=smoothing)
    segments = segment_movements(session, step_sign, angle_tol=angle_tol)
    dropped = len(reference_steps(session, step_sign)) - len(segments)
    N = average_duration(segments)
    return ensemble_moments(segments, N, dropped=dropped, subject_id=session.subject_id)


def split_train_validation(sessions, angle_tol: float = ANGLE_TOL, smoothing: float | None = None):
    """Per-subject ensembles: positive steps for training, negative for validation."""
    train, valid = [], []
    for session in sessions:
        prepared = session
        if prepared.velocity is None:
            prepared = smooth_and_differentiate(prepared, smoothing=smoothing)
        for sign, bucket in ((1, train), (-1, valid)):
            if not reference_steps(prepared, sign):
                raise ValueError(
                    f"session {prepared.subject_id!r} has no {sign:+d} reference steps"
                )
            bucket.append(process_session(prepared, sign, angle_tol=angle_tol))
    return train, valid


def mirrored(ensemble: TrialEnsemble) -> TrialEnsemble:
    """Sign-flipped copy (means and trials negated; covariances unchanged)."""
    return replace(
        ensemble,
        trials=tuple(-trial for trial in ensemble.trials),
        m_hat=-ensemble.m_hat,
        target=-ensemble.target,
    )


@dataclass(frozen=True)
class KinematicFeatures:
    peaks: int
    max_to_mean: float
    skewness: float


def kinematic_features(ensemble: TrialEnsemble) -> KinematicFeatures:
    """Shape descriptors of the mean velocity profile.

    The profile is sign-oriented so negative-target movements can be
    compared directly.  Peaks are strict interior local maxima above 10 %
    of the global maximum; the mean in the max-to-mean ratio is the
    trapezoidal time average; skewness treats the (clipped) profile as a
    density over time.
    """
    v = ensemble.m_hat[:, 1].copy()
    if np.trapezoid(v) < 0:
        v = -v
    vmax = float(v.max())
    level = 0.1 * vmax
    interior = (v[1:-1] > v[:-2]) & (v[1:-1] > v[2:]) & (v[1:-1] > level)
    peaks = int(np.count_nonzero(interior))
    mean_v = float(np.trapezoid(v)) / (v.size - 1)
    max_to_mean = vmax / mean_v if mean_v != 0.0 else np.inf
    w = np.clip(v, 0.0, None)
    w = w / w.sum()
    t = np.arange(v.size)
    mu = float(t @ w)
    m2 = float(((t - mu) ** 2) @ w)
    m3 = float(((t - mu) ** 3) @ w)
    skewness = m3 / m2**1.5 if m2 > 0 else 0.0
    return KinematicFeatures(peaks=peaks, max_to_mean=max_to_mean, skewness=skewness)


def initial_state_from_ensemble(ensemble: TrialEnsemble, p: DrivingParams):
    """Model initial condition from the ensemble's first sample.

    Angle and velocity come from the moment estimates; torque and
    excitation assume static equilibrium of the spring-damper/muscle
    chain (torque = c * angle, excitation = torque); the target fills the
    fifth component.  Only the (angle, velocity) block of the covariance
    is nonzero.
    """
    phi0, phidot0 = ensemble.m_hat[0]
    torque = p.c * phi0
    x0_mean = np.array([phi0, phidot0, torque, torque, ensemble.target])
    x0_cov = np.zeros((5, 5))
    x0_cov[:2, :2] = ensemble.omega_hat[0]
    return x0_mean, x0_cov


def write_session(path, session: RawSession) -> None:
    table = np.column_stack([session.time, session.angle, session.reference])
    np.savetxt(path, table, delimiter=",", header="time_s,angle_rad,reference_rad", comments="", fmt="%.17g")


def read_session(path, subject_id: str = "") -> RawSession:
    data = np.genfromtxt(path, delimiter=",", names=True)
    return RawSession(
        time=data["time_s"],
        angle=data["angle_rad"],
        reference=data["reference_rad"],
        subject_id=subject_id or os.path.splitext(os.path.basename(path))[0],
    )


def read_manifest(path):
    """Subject manifest: JSON listing session files relative to the manifest."""
    with open(path) as fh:
        manifest = json.load(fh)
    base = os.path.dirname(os.path.abspath(path))
    subjects = []
    for entry in manifest["subjects"]:
        subjects.append((entry["id"], os.path.join(base, entry["session"])))
    return subjects


def write_ensemble(path, ensemble: TrialEnsemble) -> None:
    header = "time_s,mean_angle,mean_velocity,var_angle,cov_angle_velocity,var_velocity"
    t = np.arange(ensemble.N + 1) * SAMPLE_PERIOD
    table = np.column_stack(
        [
            t,
            ensemble.m_hat[:, 0],
            ensemble.m_hat[:, 1],
            ensemble.omega_hat[:, 0, 0],
            ensemble.omega_hat[:, 0, 1],
            ensemble.omega_hat[:, 1, 1],
        ]
    )
    np.savetxt(path, table, delimiter=",", header=header, comments="", fmt="%.17g")


def read_ensemble(path, meta: dict) -> TrialEnsemble:
    """Rebuild an ensemble from its CSV plus index metadata (no raw trials)."""
    data = np.genfromtxt(path, delimiter=",", names=True)
    m_hat = np.column_stack([data["mean_angle"], data["mean_velocity"]])
    n_steps = m_hat.shape[0]
    omega_hat = np.empty((n_steps, 2, 2))
    omega_hat[:, 0, 0] = data["var_angle"]
    omega_hat[:, 0, 1] = omega_hat[:, 1, 0] = data["cov_angle_velocity"]
    omega_hat[:, 1, 1] = data["var_velocity"]
    return TrialEnsemble(
        trials=(),
        N=n_steps - 1,
        m_hat=m_hat,
        omega_hat=omega_hat,
        dropped=int(meta.get("dropped", 0)),
        retained=int(meta["retained"]),
        target=float(meta["target"]),
        subject_id=str(meta.get("subject_id", "")),
    )
