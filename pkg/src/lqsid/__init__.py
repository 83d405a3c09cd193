"""Stochastic optimal control models of goal-directed movements.

Forward synthesis of LQS/LQG/LQ gain schedules, exact closed-loop moment
propagation, Monte-Carlo sampling, VAF-based bi-level inverse
identification, measurement preparation, and model comparison.
"""

from .errors import (
    ConfigError,
    DivergenceError,
    LqsidError,
    SearchError,
    SolverError,
    VafUndefinedError,
)
from .model import (
    DrivingParams,
    LqsProblem,
    MODEL_KINDS,
    ParamVectors,
    build_driving_problem,
    load_problem,
    reduce_problem,
    reduce_to_lq,
    reduce_to_lqg,
    save_problem,
)
from .solver import GainSchedule, SolverWorkspace, synthesize, synthesize_full, synthesize_lq
from .moments import MomentTrajectory, observed_moments, propagate, selection_matrix
from .montecarlo import RolloutBatch, rollout, sample_moments, simulate_session
from .isoc import (
    IsocConfig,
    IsocResult,
    VafWeights,
    grid_search_step,
    identify,
    j_isoc,
    vaf_scalar,
)
from .pipeline import (
    RawSession,
    TrialEnsemble,
    ensemble_moments,
    kinematic_features,
    process_session,
    segment_movements,
    smooth_and_differentiate,
    split_train_validation,
)
from .compare import (
    ComparisonReport,
    DrivingModelBuilder,
    evaluate_model,
    one_way_anova,
    run_comparison,
    sigma8_analysis,
)

__version__ = "0.1.0"
