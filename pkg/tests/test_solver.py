import dataclasses

import numpy as np
import pytest

from lqsid.errors import DivergenceError, SolverError
from lqsid.model import LqsProblem, build_driving_problem, reduce_to_lq
from lqsid.solver import synthesize, synthesize_full, synthesize_lq

from oracles import kalman_gains, random_lqg_problem, riccati_gains


def scalar_lq(N=1):
    return LqsProblem(
        A=[[1.0]], B=[[1.0]], H=[[1.0]], sigma_xi=np.zeros((1, 1)),
        sigma_omega=np.zeros((1, 1)), control_noise=(), state_noise=(),
        Q_N=[[1.0]], Q=[[0.0]], R=[[1.0]], N=N, x0_mean=[1.0],
        x0_cov=[[0.0]], full_observation=True,
    )


def test_scalar_one_step_riccati_by_hand():
    gains = synthesize_lq(scalar_lq())
    # L0 = (R + B' Q_N B)^-1 B' Q_N A = 0.5
    assert gains.L[0, 0, 0] == pytest.approx(0.5, abs=1e-15)


def test_zero_cost_gives_zero_gains():
    prob = dataclasses.replace(scalar_lq(N=7), Q_N=[[0.0]])
    gains = synthesize_lq(prob)
    assert np.max(np.abs(gains.L)) == 0.0


def test_lq_closed_loop_bounded(driving, truth_params):
    prob = reduce_to_lq(build_driving_problem(driving, truth_params))
    gains = synthesize_lq(prob)
    x = np.array([0.5, 0.0, 0.0, 0.0, 2.0])
    for t in range(prob.N):
        x = (prob.A - prob.B @ gains.L[t]) @ x
        assert np.all(np.abs(x) < 1e3)


def test_synthesize_lq_rejects_noise(scalar_lqs_problem):
    with pytest.raises(ValueError):
        synthesize_lq(scalar_lqs_problem)


def test_lqg_limit_matches_textbook_oracle():
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(20):
        prob = random_lqg_problem(rng, n_max=6, N_max=120)
        gains = synthesize(prob)
        assert gains.converged
        L_ref = riccati_gains(prob.A, prob.B, prob.Q, prob.Q_N, prob.R, prob.N)
        K_ref = kalman_gains(
            prob.A, prob.H, prob.omega_xi(), prob.omega_omega(), prob.x0_cov, prob.N
        )
        worst = max(worst, np.max(np.abs(gains.L - L_ref)), np.max(np.abs(gains.K - K_ref)))
    assert worst <= 1e-9


def test_noise_free_full_observation_single_iteration():
    gains = synthesize(scalar_lq(N=5))
    assert gains.iterations == 1 and gains.converged


def test_scale_invariance_of_control_gains(driving, truth_params):
    prob = build_driving_problem(driving, truth_params)
    gains = synthesize(prob)
    scaled = dataclasses.replace(
        prob, Q_N=7.5 * prob.Q_N, Q=7.5 * prob.Q, R=7.5 * prob.R
    )
    gains2 = synthesize(scaled)
    assert np.max(np.abs(gains.L - gains2.L)) <= 1e-10


def test_control_noise_changes_fully_observable_gains(driving, truth_params):
    lq = reduce_to_lq(build_driving_problem(driving, truth_params))
    noisy = dataclasses.replace(lq, control_noise=((0.5, np.eye(1)),))
    g_lq = synthesize(lq)
    g_noisy = synthesize(noisy)
    assert np.max(np.abs(g_lq.L - g_noisy.L)) > 0.0


def test_convergence_record(driving_problem):
    gains, ws = synthesize_full(driving_problem)
    assert gains.converged
    assert ws.gain_deltas[-1] < 1e-8
    # geometric-style decay: tail of the delta sequence is decreasing
    tail = ws.gain_deltas[1:]
    assert all(a > b for a, b in zip(tail, tail[1:]))


def test_workspace_matrices_psd(driving_problem):
    gains, ws = synthesize_full(driving_problem)
    for t in range(0, driving_problem.N + 1, 10):
        for mat in (ws.Zx[t], ws.Ze[t], ws.Pe[t]):
            assert np.max(np.abs(mat - mat.T)) < 1e-9
            assert np.linalg.eigvalsh(mat)[0] > -1e-9
    assert np.array_equal(ws.Pexh[3], ws.Pxhe[3].T)


def test_singular_estimation_surfaces_as_error(driving, truth_params):
    # no observation noise, no initial covariance: innovation matrix singular
    params = truth_params.replace(sigma5=0.0, sigma6=0.0, sigma7=0.0, sigma8=0.0)
    prob = build_driving_problem(driving, params)
    with pytest.raises(SolverError):
        synthesize(prob)


def test_divergence_surfaces_as_error():
    prob = LqsProblem(
        A=[[1e200]], B=[[1.0]], H=[[1.0]], sigma_xi=[[1.0]], sigma_omega=[[1.0]],
        control_noise=(), state_noise=(), Q_N=[[1.0]], Q=[[0.0]], R=[[1.0]],
        N=4, x0_mean=[0.0], x0_cov=[[1.0]],
    )
    with pytest.raises((DivergenceError, SolverError)):
        synthesize(prob)


def test_gain_schedule_serialization(tmp_path, scalar_lqs_problem):
    gains = synthesize(scalar_lqs_problem)
    path = tmp_path / "gains.json"
    gains.save(path)
    import json

    data = json.loads(path.read_text())
    assert np.allclose(np.array(data["L"]), gains.L)
    assert data["converged"] is True


def test_options_validation(scalar_lqs_problem):
    with pytest.raises(ValueError):
        synthesize(scalar_lqs_problem, max_outer_iters=0)
    with pytest.raises(ValueError):
        synthesize(scalar_lqs_problem, gain_tol=0.0)
