"""Laboratory for one-pass vs multi-pass SGD excess-risk scaling on
synthetic least-squares problems with analytically known population risk."""

__version__ = "0.1.0"

from . import experiments, gradgap, kernels, problems, sgd
from .experiments import (
    Arm,
    ExperimentConfig,
    RateReport,
    fit_loglog_slope,
    run_arm,
    run_experiment,
)
from .gradgap import (
    BallRegion,
    GapReport,
    RegionRecipe,
    ResidualRegion,
    effective_sparsity,
    gap_at,
    gap_scaling_experiment,
    max_gap_over_ball,
    max_gap_over_residual_region,
    measure_nu,
)
from .problems import (
    Dataset,
    Family,
    ProblemConstants,
    ProblemInstance,
    ProblemSpec,
    empirical_risk_and_gradient,
    excess_risk,
    generate_dataset,
    generate_problem,
    population_gradient,
    population_risk,
    verify_pl,
)
from .sgd import (
    SamplingMode,
    Schedule,
    ScheduleSource,
    Trajectory,
    lr_theorem1,
    lr_theorem3,
    lr_theorem4,
    run_sgd,
    stop_theorem3,
    stop_theorem6,
)
