import pytest

from lqsid.model import DrivingParams, LqsProblem, ParamVectors
from lqsid.montecarlo import simulate_session
from lqsid.pipeline import split_train_validation

# ground truth of the synthetic steering subject used across the suite
TRUTH_S = (1.0e5, 5.0e3, 1.0, 1.0)
TRUTH_SIGMA = (0, 0, 0, 0, 0.01, 0.05, 0.01, 0.3, 0, 0, 0)


@pytest.fixture(scope="session")
def driving():
    return DrivingParams()


@pytest.fixture(scope="session")
def truth_params():
    return ParamVectors(s=TRUTH_S, sigma=TRUTH_SIGMA)


@pytest.fixture(scope="session")
def synthetic_session(driving, truth_params):
    return simulate_session(
        driving,
        truth_params,
        kind="lqs",
        repetitions=14,
        plateau_steps=100,
        movement_steps=60,
        seed=11,
        sensor_noise=1e-3,
        subject_id="synthA",
    )


@pytest.fixture(scope="session")
def prepared_ensembles(synthetic_session):
    train, valid = split_train_validation([synthetic_session])
    return train[0], valid[0]


@pytest.fixture(scope="session")
def scalar_lqs_problem():
    """Scalar instance with all four noise types active."""
    return LqsProblem(
        A=[[0.95]],
        B=[[0.4]],
        H=[[1.0]],
        sigma_xi=[[0.15]],
        sigma_omega=[[0.2]],
        control_noise=((0.5, [[1.0]]),),
        state_noise=((0.4, [[1.0]]),),
        Q_N=[[3.0]],
        Q=[[0.05]],
        R=[[0.1]],
        N=10,
        x0_mean=[1.5],
        x0_cov=[[0.4]],
    )


@pytest.fixture(scope="session")
def driving_problem(driving, truth_params):
    from lqsid.model import build_driving_problem

    return build_driving_problem(driving, truth_params)
