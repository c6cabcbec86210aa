"""D-optimal block designs for generalized linear mixed models with a
random intercept: information-matrix approximations (outcome enumeration,
Monte Carlo, marginal quasi-likelihood, GEE, asymptotic, Kriging
surrogate) and a multistart design search built on them."""

from .model import (
    ATTENUATION_C,
    Block,
    Design,
    ModelSpec,
    ParameterPoint,
    PriorSpec,
    attenuate,
    blocks_equivalent,
    canonicalize,
    invert_attenuation,
    linear_predictors,
    model_matrix,
    regressor_tensor,
    simulate_responses,
)
from .quadrature import (
    QuadratureRule,
    adaptive_order,
    default_rule,
    expect_normal,
    gauss_hermite,
    integrate_line,
)
from .enumeration import (
    InfoMatrix,
    info_design,
    info_mc,
    info_naive_binary,
    likelihood_grad_eta,
    marginal_likelihood,
    outcome_matrix,
    q_matrix,
    q_matrix_multi,
)
from .closed_form import (
    WorkingCorrelation,
    info_adj_gee,
    info_adj_mql,
    info_gee,
    info_mql,
    info_quasi_poisson,
    poisson_marginal_moments,
)
from .asymptotic import (
    CConstantTable,
    Partition,
    approx_derivative,
    approx_likelihood,
    c_constants,
    info_asymptotic,
    partition_for_derivative,
    q_matrix_asymptotic,
)
from .surrogate import (
    GridBundle,
    KrigingBundle,
    TrainingSet,
    build_training_set,
    fit,
    grid_interp_2d,
    info_interp,
    lhs_sample,
    load_bundle,
    predict_q,
    save_bundle,
)
from .design_search import (
    DesignSearchResult,
    MethodSpec,
    OptimizerConfig,
    draw_prior_sample,
    efficiency_bayes,
    efficiency_local,
    equivalence_diagnostic,
    logdet_psd,
    objective_bayes,
    objective_local,
    optimize_design,
    relative_estimation_error,
    rho_tuning_sweep,
)

__version__ = "0.1.0"
