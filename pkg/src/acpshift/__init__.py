"""Doubly robust, efficient estimation with automated computational
phenotypes (ACPs) under covariate shift."""

__version__ = "0.1.0"

from .data import (
    Dataset,
    FoldPlan,
    Observation,
    Scenario,
    ScoreKind,
    ScoreModel,
    make_folds,
    read_csv,
    score_eval,
    validate_dataset,
    write_csv,
)
from .estimator import (
    EstimateResult,
    EstimatorConfig,
    SolverConfig,
    Variant,
    eif_terms,
    eif_theta,
    eif_with_acp,
    eif_without_acp,
    estimate,
    estimate_theta,
    estimating_equation,
    solve_beta,
)
from .exceptions import ACPError, SolverError, ValidationError
from .inference import (
    BootstrapConfig,
    confidence_interval,
    estimate_omega,
    perturbation_bootstrap,
    sandwich_variance,
)
from .nuisance import (
    LearnerConfig,
    NuisanceSet,
    crossfit_nuisances,
    fit_mu,
    fit_mu_tilde,
    fit_propensity,
)
from .oracle import DgpSpec, analytic_nuisances, oracle_bounds, oracle_bounds_theta, true_beta, true_theta
from .simulation import SimConfig, SimSummary, gen_dataset, run_replications, sweep

__all__ = [name for name in dir() if not name.startswith("_")]
