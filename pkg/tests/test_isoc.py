import numpy as np
import pytest

from lqsid.errors import ConfigError, SearchError, VafUndefinedError
from lqsid.isoc import (
    IsocConfig,
    VafWeights,
    grid_search_step,
    identify,
    j_isoc,
    vaf_report,
    vaf_scalar,
)
from lqsid.model import DrivingParams, ParamVectors, build_driving_problem, reduce_problem
from lqsid.moments import observed_moments, propagate, selection_matrix
from lqsid.solver import synthesize

M2 = selection_matrix([0, 1], 5)


# --- vaf_scalar -------------------------------------------------------------

def test_vaf_perfect_fit():
    assert vaf_scalar([1.0, 2.0, 3.0], [1.0, 2.0, 3.0]) == pytest.approx(1.0, abs=1e-12)


def test_vaf_mean_prediction_scores_zero():
    assert vaf_scalar([2.0, 2.0, 2.0], [1.0, 2.0, 3.0]) == pytest.approx(0.0, abs=1e-12)


def test_vaf_hand_value():
    assert vaf_scalar([1.0, 2.0, 4.0], [1.0, 2.0, 3.0]) == pytest.approx(0.5, abs=1e-12)


def test_vaf_constant_measured_rejected():
    with pytest.raises(VafUndefinedError):
        vaf_scalar([1.0, 2.0], [3.0, 3.0])
    with pytest.raises(ValueError):
        vaf_scalar([1.0], [1.0])


# --- j_isoc -----------------------------------------------------------------

def _moments_from(mean_rows, var_rows):
    mean = np.asarray(mean_rows, dtype=float)
    cov = np.zeros((mean.shape[0], mean.shape[1], mean.shape[1]))
    for i, row in enumerate(np.asarray(var_rows, dtype=float).T):
        cov[:, i, i] = row
    return mean, cov


def test_j_isoc_perfect_weighted_fit():
    meas = _moments_from([[0, 0], [1, 2], [2, 1]], [[0, 1], [1, 2], [2, 0]])
    w = VafWeights.from_diagonal([0.9, 0.9], [0.1, 0.0])
    assert j_isoc(meas, meas, w) == pytest.approx(1.0, abs=1e-12)


def test_j_isoc_hand_value():
    # means fit perfectly, weighted variance entry scores 0 -> 1.8 / 1.9
    meas_mean = np.array([[0.0, 0.0], [1.0, 2.0], [2.0, 1.0]])
    meas_cov = np.zeros((3, 2, 2))
    meas_cov[:, 0, 0] = [1.0, 2.0, 3.0]
    pred_cov = np.zeros_like(meas_cov)
    pred_cov[:, 0, 0] = 2.0  # the measured mean: VAF exactly 0
    w = VafWeights.from_diagonal([0.9, 0.9], [0.1, 0.0])
    value = j_isoc((meas_mean, pred_cov), (meas_mean, meas_cov), w)
    assert value == pytest.approx(1.8 / 1.9, abs=1e-12)


def test_j_isoc_unbounded_below():
    meas = _moments_from([[0, 0], [1, 0], [2, 0]], [[1, 0], [2, 0], [3, 0]])
    bad_mean = np.array([[100.0, 0.0], [-100.0, 0.0], [100.0, 0.0]])
    w = VafWeights.from_diagonal([1.0, 0.0], [0.0, 0.0])
    assert j_isoc((bad_mean, meas[1]), meas, w) < 0.0


def test_j_isoc_ignores_unweighted_constant_channels():
    meas_mean = np.array([[0.0, 5.0], [1.0, 5.0], [2.0, 5.0]])  # channel 2 constant
    cov = np.zeros((3, 2, 2))
    cov[:, 0, 0] = [1.0, 2.0, 3.0]
    w = VafWeights.from_diagonal([1.0, 0.0], [0.5, 0.0])
    value = j_isoc((meas_mean, cov), (meas_mean, cov), w)
    assert value == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(VafUndefinedError):
        j_isoc((meas_mean, cov), (meas_mean, cov), VafWeights.from_diagonal([1, 1], [0, 0]))


def test_vaf_weights_validation():
    with pytest.raises(ValueError):
        VafWeights.from_diagonal([-1.0, 0.0], [0.0, 0.0])
    with pytest.raises(ValueError):
        VafWeights.from_diagonal([0.0, 0.0], [0.0, 0.0])
    with pytest.raises(ValueError):
        VafWeights(w_mean=[1.0, 1.0], w_cov=[0.0, 0.0])


def test_vaf_report_nan_on_constant_channels():
    meas = _moments_from([[0, 5], [1, 5], [2, 5]], [[1, 0], [2, 0], [3, 0]])
    vaf_mean, vaf_cov = vaf_report(meas, meas)
    assert vaf_mean[0] == pytest.approx(1.0)
    assert np.isnan(vaf_mean[1]) and np.isnan(vaf_cov[1, 1])


# --- grid_search_step ---------------------------------------------------------

def test_grid_picks_exact_maximum():
    res = grid_search_step(lambda p: -((p[0] - 0.3) ** 2), [0.2], [np.array([0.1, 0.2, 0.3, 0.4])])
    assert res.point[0] == pytest.approx(0.3)


def test_grid_tie_break_smallest():
    res = grid_search_step(lambda p: 1.0, [0.2], [np.array([0.1, 0.2, 0.3, 0.4])])
    assert res.point[0] == pytest.approx(0.1)


def test_grid_separable_two_dim():
    axes = [np.array([0.0, 1.0, 2.0]), np.array([-1.0, 0.0, 1.0])]
    res = grid_search_step(
        lambda p: -((p[0] - 2.0) ** 2) - (p[1] + 1.0) ** 2, [0.0, 0.0], axes
    )
    assert tuple(res.point) == (2.0, -1.0)


def test_grid_failures_skipped_and_counted():
    def flaky(p):
        if p[0] < 0.25:
            raise SearchError("boom")
        return -abs(p[0] - 0.3)

    res = grid_search_step(flaky, [0.3], [np.array([0.1, 0.2, 0.3, 0.4])])
    assert res.point[0] == pytest.approx(0.3)
    assert res.n_failed == 2


def test_grid_all_failures_error():
    def broken(p):
        raise SearchError("boom")

    with pytest.raises(SearchError):
        grid_search_step(broken, [0.0], [np.array([0.0, 1.0])])
    with pytest.raises(ValueError):
        grid_search_step(lambda p: 0.0, [0.0], [np.array([1.0])])


def test_grid_batch_interface_used():
    def batch(points):
        values = np.array([-(p[0] - 0.3) ** 2 for p in points])
        return values, np.zeros(len(points), bool)

    res = grid_search_step(None, [0.2], [np.array([0.1, 0.3, 0.5])], evaluate_batch=batch)
    assert res.point[0] == pytest.approx(0.3)


# --- identify ---------------------------------------------------------------

BOUNDS = {
    "s1": (0.0, 2e5), "s2": (0.0, 2e4), "s3": (0.0, 100.0),
    "sigma1": (0.0, 0.2), "sigma2": (0.0, 0.2), "sigma3": (0.0, 0.2), "sigma4": (0.0, 0.2),
    "sigma5": (0.0, 0.5), "sigma6": (0.0, 0.5), "sigma7": (0.0, 0.5),
    "sigma8": (0.0, 1.2),
}


def small_config(sets, **overrides):
    settings = dict(
        parameter_sets=sets,
        initial_bounds=BOUNDS,
        grid_points_per_axis=4,
        shrink_factor=0.5,
        outer_iters=2,
        stall_tol=1e-5,
        min_width_frac=0.2,
        solver_gain_tol=1e-6,
    )
    settings.update(overrides)
    return IsocConfig(**settings)


@pytest.fixture(scope="module")
def small_truth():
    p = DrivingParams(N=40)
    truth = ParamVectors(s=[1e5, 5e3, 1.0, 1.0], sigma=[0, 0, 0, 0, 0.02, 0.1, 0.02, 0.3, 0, 0, 0])
    prob = build_driving_problem(p, truth)
    meas = observed_moments(propagate(prob, synthesize(prob)), M2)
    return p, truth, meas


def build_for(p, kind):
    def build(params):
        return reduce_problem(build_driving_problem(p, params), kind)

    return build


def test_identify_recovers_generating_model(small_truth):
    p, truth, meas = small_truth
    cfg = small_config((("s1", "s2", "s3"), ("sigma8",), ("sigma5", "sigma6", "sigma7")))
    base = ParamVectors(s=[0, 0, 0, 1.0], sigma=np.zeros(11))
    res = identify(
        build_for(p, "lqs"), base, meas[0], meas[1], cfg,
        VafWeights.from_diagonal([0.9, 0.9], [0.1, 0.0]),
        VafWeights.from_diagonal([0.1, 0.1], [0.9, 0.0]),
    )
    assert res.j_isoc >= 0.99
    assert res.params.s[3] == 1.0  # normalization untouched
    # within-step monotonicity of the trace
    for step in ("cost", "noise"):
        for l in (1, 2):
            js = [j for (ll, ss, j) in res.trace if ss == step and ll == l]
            assert all(a <= b + 1e-15 for a, b in zip(js, js[1:]))
    assert res.j_isoc <= 1.0


def test_identify_lq_cost_only(small_truth):
    p, _, _ = small_truth
    lq_truth = ParamVectors(s=[1e5, 5e3, 1.0, 1.0], sigma=np.zeros(11))
    prob = reduce_problem(build_driving_problem(p, lq_truth), "lq")
    meas = observed_moments(propagate(prob, synthesize(prob)), M2)
    cfg = small_config((("s1", "s2", "s3"),))
    base = ParamVectors(s=[0, 0, 0, 1.0], sigma=np.zeros(11))
    res = identify(
        build_for(p, "lq"), base, meas[0], meas[1], cfg,
        VafWeights.from_diagonal([1.0, 1.0], [0.0, 0.0]),
    )
    assert 0.5 * (res.vaf_mean[0] + res.vaf_mean[1]) >= 0.999
    assert not np.any(res.sigma_hat)


def test_identify_determinism(small_truth):
    p, _, meas = small_truth
    cfg = small_config((("s1", "s2", "s3"), ("sigma8",)), outer_iters=1)
    base = ParamVectors(s=[0, 0, 0, 1.0], sigma=[0, 0, 0, 0, 0.02, 0.1, 0.02, 0, 0, 0, 0])
    w_c = VafWeights.from_diagonal([0.9, 0.9], [0.1, 0.0])
    w_n = VafWeights.from_diagonal([0.1, 0.1], [0.9, 0.0])
    a = identify(build_for(p, "lqs"), base, meas[0], meas[1], cfg, w_c, w_n)
    b = identify(build_for(p, "lqs"), base, meas[0], meas[1], cfg, w_c, w_n)
    assert np.array_equal(a.params.s, b.params.s)
    assert np.array_equal(a.params.sigma, b.params.sigma)
    assert a.trace == b.trace and a.j_isoc == b.j_isoc


def test_identify_reduction_consistency(small_truth):
    """LQG identification equals LQS identification with signal noise pinned to zero."""
    p, _, _ = small_truth
    # process noise keeps the closed loop stochastic (with sigma1..4 = 0 and zero
    # initial covariance the filter has nothing to estimate and variance is zero)
    lqg_truth = ParamVectors(
        s=[1e5, 5e3, 1.0, 1.0], sigma=[0.01, 0.05, 0.01, 0.05, 0.02, 0.1, 0.02, 0, 0, 0, 0]
    )
    prob = reduce_problem(build_driving_problem(p, lqg_truth), "lqg")
    meas = observed_moments(propagate(prob, synthesize(prob)), M2)
    cfg = small_config(
        (("s1", "s2", "s3"), ("sigma1", "sigma2", "sigma3", "sigma4")), outer_iters=1
    )
    # observation noise is fixed (not searched) and must stay nonzero for a
    # well-posed estimation problem
    base = ParamVectors(s=[0, 0, 0, 1.0], sigma=[0, 0, 0, 0, 0.02, 0.1, 0.02, 0, 0, 0, 0])
    w_c = VafWeights.from_diagonal([0.9, 0.9], [0.1, 0.0])
    w_n = VafWeights.from_diagonal([0.1, 0.1], [0.9, 0.0])
    res_lqg = identify(build_for(p, "lqg"), base, meas[0], meas[1], cfg, w_c, w_n)
    res_lqs0 = identify(build_for(p, "lqs"), base, meas[0], meas[1], cfg, w_c, w_n)
    assert abs(res_lqg.j_isoc - res_lqs0.j_isoc) <= 1e-3


def test_identify_extra_starts(small_truth):
    p, _, meas = small_truth
    cfg = small_config(
        (("s1", "s2", "s3"),), outer_iters=1, extra_starts=({"s1": 1.0e5},)
    )
    base = ParamVectors(s=[0, 0, 0, 1.0], sigma=[0, 0, 0, 0, 0.02, 0.1, 0.02, 0.3, 0, 0, 0])
    res = identify(
        build_for(p, "lqs"), base, meas[0], meas[1], cfg,
        VafWeights.from_diagonal([1.0, 1.0], [0.0, 0.0]),
    )
    assert res.j_isoc <= 1.0


def test_config_validation():
    with pytest.raises(ConfigError):
        IsocConfig(parameter_sets=(("s1", "sigma8"),), initial_bounds=BOUNDS)
    with pytest.raises(ConfigError):
        IsocConfig(parameter_sets=(("s1",),), initial_bounds={})
    with pytest.raises(ConfigError):
        IsocConfig(parameter_sets=(("s1",),), initial_bounds={"s1": (-1.0, 1.0)})
    with pytest.raises(ConfigError):
        IsocConfig(parameter_sets=(("s1",),), initial_bounds=BOUNDS, shrink_factor=1.0)
    with pytest.raises(ConfigError):
        IsocConfig(parameter_sets=(("s1",),), initial_bounds=BOUNDS, grid_points_per_axis=1)
    cfg = IsocConfig(parameter_sets=(("s1",), ("sigma8",)), initial_bounds=BOUNDS)
    clone = IsocConfig.from_dict(cfg.to_dict())
    assert clone.parameter_sets == cfg.parameter_sets
    assert clone.initial_bounds == cfg.initial_bounds
    with pytest.raises(ConfigError):
        identify(
            lambda p: None, ParamVectors(s=[0, 0, 0, 1], sigma=np.zeros(11)),
            np.zeros((3, 2)), np.zeros((3, 2, 2)), cfg,
            VafWeights.from_diagonal([1, 1], [0, 0]), w_noise=None,
        )


def test_result_serialization(tmp_path, small_truth):
    p, _, meas = small_truth
    cfg = small_config((("s1", "s2", "s3"),), outer_iters=1)
    base = ParamVectors(s=[0, 0, 0, 1.0], sigma=[0, 0, 0, 0, 0.02, 0.1, 0.02, 0.3, 0, 0, 0])
    res = identify(
        build_for(p, "lqs"), base, meas[0], meas[1], cfg,
        VafWeights.from_diagonal([1.0, 1.0], [0.0, 0.0]),
    )
    res.save(tmp_path / "result.json")
    res.save_trace_csv(tmp_path / "trace.csv")
    import json

    data = json.loads((tmp_path / "result.json").read_text())
    assert data["s_hat"] == list(res.s_hat)
    lines = (tmp_path / "trace.csv").read_text().splitlines()
    assert lines[0] == "iteration,step,j_isoc"
    assert len(lines) == len(res.trace) + 1


def _quartic(p):
    return -((p[0] - 0.3) ** 2) - (p[1] - 0.7) ** 4


def test_grid_parallel_matches_serial():
    axes = [np.linspace(0.0, 1.0, 5), np.linspace(0.0, 1.0, 5)]
    serial = grid_search_step(_quartic, [0.5, 0.5], axes, n_jobs=1)
    parallel = grid_search_step(_quartic, [0.5, 0.5], axes, n_jobs=2)
    assert np.array_equal(serial.point, parallel.point)
    assert serial.value == parallel.value
