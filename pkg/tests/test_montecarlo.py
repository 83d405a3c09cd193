import json

import numpy as np
import pytest

from lqsid.model import reduce_to_lq
from lqsid.moments import propagate, selection_matrix
from lqsid.montecarlo import (
    CHUNK,
    RolloutBatch,
    export_batch,
    problem_hash,
    rollout,
    sample_moments,
    simulate_session,
)
from lqsid.solver import synthesize


def test_zero_noise_rollouts_are_deterministic(driving_problem):
    lq = reduce_to_lq(driving_problem)
    gains = synthesize(lq)
    batch = rollout(lq, gains, 5, seed=1)
    mt = propagate(lq, gains)
    for k in range(5):
        assert np.allclose(batch.trajectories[k], mt.state_mean(), atol=1e-12)


def test_same_seed_bit_identical(scalar_lqs_problem):
    gains = synthesize(scalar_lqs_problem)
    a = rollout(scalar_lqs_problem, gains, 3000, seed=42)
    b = rollout(scalar_lqs_problem, gains, 3000, seed=42)
    assert np.array_equal(a.trajectories, b.trajectories)


def test_prefix_stability_across_counts(scalar_lqs_problem):
    gains = synthesize(scalar_lqs_problem)
    small = rollout(scalar_lqs_problem, gains, CHUNK + 7, seed=5)
    large = rollout(scalar_lqs_problem, gains, 3 * CHUNK, seed=5)
    assert np.array_equal(small.trajectories, large.trajectories[: CHUNK + 7])


def test_distinct_seeds_weakly_independent(scalar_lqs_problem):
    gains = synthesize(scalar_lqs_problem)
    a = rollout(scalar_lqs_problem, gains, 20000, seed=1).trajectories[:, -1, 0]
    b = rollout(scalar_lqs_problem, gains, 20000, seed=2).trajectories[:, -1, 0]
    corr = np.corrcoef(a, b)[0, 1]
    assert abs(corr) < 4.0 / np.sqrt(a.size)


def test_sample_moments_hand_case():
    traj = np.array([[[0.0]], [[2.0]]])  # two rollouts, one step, one state
    batch = RolloutBatch(trajectories=traj, seed=0, count=2)
    mean, cov = sample_moments(batch)
    assert mean[0, 0] == 1.0
    assert cov[0, 0, 0] == 2.0  # divisor K-1 = 1


def test_sample_moments_projection_shape(driving_problem):
    gains = synthesize(driving_problem)
    batch = rollout(driving_problem, gains, 64, seed=3)
    M = selection_matrix([0, 1], 5)
    mean, cov = sample_moments(batch, M)
    assert mean.shape == (driving_problem.N + 1, 2)
    assert cov.shape == (driving_problem.N + 1, 2, 2)


def test_sample_moments_identical_trajectories_zero_cov(driving_problem):
    lq = reduce_to_lq(driving_problem)
    gains = synthesize(lq)
    batch = rollout(lq, gains, 4, seed=0)
    _, cov = sample_moments(batch)
    assert np.max(np.abs(cov)) <= 1e-25


def test_rollout_argument_validation(scalar_lqs_problem):
    gains = synthesize(scalar_lqs_problem)
    with pytest.raises(ValueError):
        rollout(scalar_lqs_problem, gains, 0, seed=1)
    with pytest.raises(ValueError):
        sample_moments(rollout(scalar_lqs_problem, gains, 1, seed=1))


def test_mean_within_four_standard_errors(scalar_lqs_problem):
    gains = synthesize(scalar_lqs_problem)
    mt = propagate(scalar_lqs_problem, gains)
    batch = rollout(scalar_lqs_problem, gains, 100_000, seed=7)
    sm, sc = sample_moments(batch)
    se = np.sqrt(sc[:, 0, 0] / batch.count)
    assert np.all(np.abs(sm[:, 0] - mt.state_mean()[:, 0]) <= 4.0 * se + 1e-12)


def test_export_batch(tmp_path, scalar_lqs_problem):
    gains = synthesize(scalar_lqs_problem)
    batch = rollout(scalar_lqs_problem, gains, 3, seed=12)
    manifest = export_batch(batch, dt=0.01, out_dir=tmp_path, prob=scalar_lqs_problem)
    assert manifest["count"] == 3 and manifest["seed"] == 12
    assert manifest["problem_sha256"] == problem_hash(scalar_lqs_problem)
    stored = json.loads((tmp_path / "manifest.json").read_text())
    assert stored == manifest
    data = np.genfromtxt(tmp_path / manifest["files"][0], delimiter=",", names=True)
    assert data["time_s"].shape[0] == scalar_lqs_problem.N + 1
    assert np.allclose(data["state_1"], batch.trajectories[0, :, 0])


def test_simulate_session_shapes(driving, truth_params):
    session = simulate_session(
        driving, truth_params, repetitions=2, plateau_steps=50, movement_steps=30, seed=0
    )
    assert session.angle.size == 2 * 4 * 50
    # reference follows the repeated pattern 0, +ref, 0, -ref
    assert np.array_equal(
        np.unique(session.reference), np.unique([0.0, driving.phi_ref, -driving.phi_ref])
    )
    again = simulate_session(
        driving, truth_params, repetitions=2, plateau_steps=50, movement_steps=30, seed=0
    )
    assert np.array_equal(session.angle, again.angle)
    with pytest.raises(ValueError):
        simulate_session(driving, truth_params, plateau_steps=50, movement_steps=60)


def test_lqg_instance_moments_match(driving, truth_params):
    """Moment matching holds for the LQG reduction as well (additive noise only)."""
    from dataclasses import replace as dc_replace

    from lqsid.model import DrivingParams, build_driving_problem, reduce_to_lqg

    params = truth_params.replace(sigma1=0.02, sigma2=0.05, sigma3=0.02, sigma4=0.05)
    prob = reduce_to_lqg(build_driving_problem(DrivingParams(N=40), params))
    gains = synthesize(prob)
    mt = propagate(prob, gains)
    batch = rollout(prob, gains, 50_000, seed=31)
    sm, sc = sample_moments(batch, selection_matrix([0, 1], 5))
    am = mt.state_mean()[:, :2]
    se = np.sqrt(np.einsum("tii->ti", sc) / batch.count)
    assert np.all(np.abs(sm - am) <= 4.0 * se + 1e-12)
