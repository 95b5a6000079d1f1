"""balancekit: balancing weights for observational studies.

Estimate treatment-arm means and effects by solving convex weight problems
that trade covariate imbalance against weight dispersion, verify the
primal-dual structure of those problems at runtime, and report balance
diagnostics with Wald confidence intervals.
"""

__version__ = "0.1.0"

from .dataset import (
    BasisSpec,
    FeatureMatrix,
    ObservationTable,
    destandardize,
    evaluate_features,
    expand_basis,
    load_csv,
    standardize,
)
from .duals import (
    DispersionSpec,
    DualSolution,
    PenaltySpec,
    SolverOptions,
    bregman,
    link_eval,
    primal_objective,
    solve_dual,
    solve_minimax_l2,
    solve_primal_direct,
    verify_duality,
)
from .errors import BalancekitError, ConfigError, DataError, SingularSystemError
from .estimators import (
    EffectEstimate,
    EstimandSpec,
    OutcomeModel,
    aipw_estimate,
    build_balance_target,
    error_decomposition,
    estimate_effect,
    fit_crossfit_ridge,
    hajek_normalize,
    ipw_estimate,
    normal_quantile,
    wald_ci,
)
from .imbalance import (
    BalanceTarget,
    ImbalanceReport,
    WeightVector,
    effective_sample_size,
    feature_imbalance,
    full_sample_target,
    imbalance_l2ball,
    imbalance_report,
    kernel_imbalance,
    ks_statistics,
    make_weights,
    max_imbalance_l1ball,
)
from .kernels import (
    KernelSpec,
    KernelWeightProblem,
    gram,
    median_pairwise_distance,
    pilot_noise_variance,
    solve_kernel_minimax,
    sweep_sigma2,
)
from .simlab import (
    DGPSpec,
    SimResult,
    brute_force_weights,
    convergence_experiment,
    coverage_experiment,
    generate,
    kernel_objective,
    minimax_objective,
    oracle_weights,
    random_duality_instance,
)

__all__ = [name for name in dir() if not name.startswith("_")]
