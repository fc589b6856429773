"""qvmart: pathwise quadratic variation, simple portfolio proportions,
stochastic exponentials, growth-optimal drift inference, and an insider
jump-model stress suite, all seeded and Monte-Carlo verifiable."""

__version__ = "0.1.0"

from .errors import ConfigurationError, ContractViolation
from .path_core import (
    Ensemble,
    QVPath,
    SamplePath,
    TimeGrid,
    quadratic_variation,
    qv_matrix,
    refine_and_compare_qv,
    truncation_time,
)
from .simulate import (
    BrownianModel,
    DriftedDiffusion,
    ModelSpec,
    PathBundle,
    SeedStream,
    gen_brownian,
    gen_bundles,
    gen_counterexample,
    gen_ensemble,
    gen_M,
    gen_poisson_pair,
    insider_drift,
    m_variance,
    make_insider_grid,
    sigma_profile,
)
from .strategy import (
    BandStrategy,
    EvalContext,
    GridRuleStrategy,
    HitRule,
    Leg,
    SimpleStrategy,
    band_check,
    evaluate,
    h2_norm,
    shares_from_proportion,
    proportion_from_shares,
)
from .wealth import (
    UtilityReport,
    WealthPath,
    dd_residual,
    log_utility,
    simple_integral,
    stoch_exp_continuous,
    stoch_exp_jumps,
)
from .inference import (
    BinSpec,
    DriftEstimate,
    decompose,
    estimate_alpha,
    estimate_lambda,
    growth_optimal_value,
    martingale_residual,
    optimality_gap,
)
