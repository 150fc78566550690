"""Sandwich variance, Wald intervals and the perturbation bootstrap."""

from __future__ import annotations

from dataclasses import dataclass
from types import SimpleNamespace

import numpy as np
from scipy.stats import norm

from .data import Dataset, FoldPlan, ScoreModel, make_folds
from .estimator import (
    EstimateResult,
    EstimatorConfig,
    SolverConfig,
    Variant,
    _fold_weights,
    _newton,
    _problem,
    _Problem,
    resolve_variant,
)
from .exceptions import NegativeVariance, SingularMatrix, SolverError, ValidationError
from .nuisance import crossfit_nuisances, evaluate_nuisances, infer_family, refit_nuisances


@dataclass(frozen=True, eq=False)
class VarianceEstimate:
    omega_hat: np.ndarray
    v_hat: np.ndarray
    sandwich: np.ndarray


def _inverse(A: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(A)) or np.linalg.cond(A) > 1e12:
        raise SingularMatrix(f"{what} is singular")
    return np.linalg.inv(A)


def _omega(data: Dataset, beta, model: ScoreModel, theta: bool) -> np.ndarray:
    J = model.jacobian(data.x, beta)
    if theta:
        return _inverse(J.mean(axis=0), "mean score Jacobian")
    wq = (1 - data.r) / (1 - data.pi)
    return _inverse(np.tensordot(wq, J, axes=1) / data.M, "target-population score Jacobian")


def estimate_omega(data: Dataset, plan: FoldPlan | None, nuisances, beta_hat,
                   model: ScoreModel, variant: Variant = Variant.WITH_ACP) -> np.ndarray:
    """Inverse of the estimated expected score Jacobian.

    For beta the expectation is over the unlabeled population, reached by
    weighting every unit with ``(1 - r)/(1 - pi)``; for theta it is the plain
    sample mean. ``plan`` and ``nuisances`` are accepted for a uniform call
    signature; the Jacobian depends on x only.
    """
    return _omega(data, beta_hat, model, Variant(variant).is_theta)


def _variance(prob: _Problem, beta) -> VarianceEstimate:
    phi = prob.contributions(beta)
    V = (phi * prob.weights[:, None]).T @ phi
    V = 0.5 * (V + V.T)
    omega = _omega(prob.data, beta, prob.model, prob.variant.is_theta)
    S = omega @ V @ omega
    return VarianceEstimate(omega, V, 0.5 * (S + S.T))


def sandwich_variance(data: Dataset, plan: FoldPlan, nuisances, beta_hat,
                      model: ScoreModel, variant: Variant = Variant.WITH_ACP) -> VarianceEstimate:
    """``Omega V Omega`` with ``V`` the cross-fitted second moment of the
    influence-function contributions at ``beta_hat``."""
    return _variance(_problem(data, plan, nuisances, model, variant), np.asarray(beta_hat, float))


def normal_multiplier(alpha: float) -> float:
    if not 0 < alpha <= 1:
        raise ValidationError(f"alpha must lie in (0, 1], got {alpha}")
    return float(norm.ppf(1 - alpha / 2))


def confidence_interval(result, v, alpha: float = 0.05) -> tuple[float, float]:
    """Wald interval for ``v'beta`` from an object carrying ``beta``,
    ``sandwich`` and ``M``."""
    v = np.asarray(v, dtype=float)
    beta = np.asarray(result.beta, dtype=float)
    S = np.asarray(result.sandwich, dtype=float)
    if v.shape != beta.shape:
        raise ValidationError("v must have the same length as beta")
    var = float(v @ S @ v)
    if var < -1e-10 * max(1.0, float(np.abs(S).max())):
        raise NegativeVariance(f"v'Sv = {var:.3g} < 0")
    half = normal_multiplier(alpha) * np.sqrt(max(var, 0.0) / result.M)
    centre = float(v @ beta)
    return centre - half, centre + half


def build_result(prob: _Problem, beta, alpha: float, diagnostics: dict) -> EstimateResult:
    ve = _variance(prob, beta)
    M = prob.data.M
    d = prob.model.d

    part = SimpleNamespace(beta=beta, sandwich=ve.sandwich, M=M)
    eye = np.eye(d)
    ci = [confidence_interval(part, eye[j], alpha) for j in range(d)]
    diagnostics = dict(diagnostics)
    diagnostics["ci_multiplier"] = normal_multiplier(alpha)
    diagnostics["max_abs_equation"] = float(np.max(np.abs(prob.equation(beta))))
    return EstimateResult(
        beta=beta, covariance=ve.sandwich / M, ci=ci, variant=prob.variant,
        diagnostics=diagnostics, sandwich=ve.sandwich, M=M, alpha=alpha,
        coord_names=prob.model.coord_names(),
    )


# --------------------------------------------------------------------------
# perturbation bootstrap


@dataclass(frozen=True)
class BootstrapConfig:
    B: int = 500
    seed: int = 0
    distribution: str = "exponential"
    quantiles: tuple[float, float] = (0.025, 0.975)

    def __post_init__(self):
        if self.B < 2:
            raise ValidationError("bootstrap needs at least 2 repetitions")
        if self.distribution not in ("exponential", "ones"):
            raise ValidationError(f"unknown weight distribution {self.distribution!r}")
        lo, hi = self.quantiles
        if not 0 <= lo < hi <= 1:
            raise ValidationError("quantile levels must satisfy 0 <= lo < hi <= 1")


@dataclass(frozen=True, eq=False)
class BootstrapResult:
    beta: np.ndarray
    draws: np.ndarray
    ci: list
    failures: int
    flagged: bool


def perturbation_bootstrap(data: Dataset, model: ScoreModel, config: EstimatorConfig | None = None,
                           boot: BootstrapConfig | None = None,
                           variant: Variant = Variant.WITH_ACP, plan: FoldPlan | None = None,
                           nuisances=None) -> BootstrapResult:
    """Quantile intervals from re-solving with i.i.d. unit-mean exponential weights.

    Each replicate refits the base learners with the weights, keeping folds
    and stacking weights fixed, and solves the weighted estimating equation.
    """
    config = config or EstimatorConfig()
    boot = boot or BootstrapConfig()
    variant, _ = resolve_variant(data, variant)
    family = config.family or infer_family(data.y)
    if nuisances is None:
        plan = make_folds(data, config.K, config.seed)
        nuisances = crossfit_nuisances(data, plan, config.learner, family)
    base = _problem(data, plan, nuisances, model, variant)
    beta_hat = _newton(base, config.solver).beta
    warm = SolverConfig(config.solver.max_iter, config.solver.damping,
                        config.solver.max_halvings, config.solver.tol, tuple(beta_hat))

    streams = np.random.SeedSequence(boot.seed).spawn(boot.B)
    draws = np.full((boot.B, model.d), np.nan)
    failures = 0
    for b, ss in enumerate(streams):
        if boot.distribution == "ones":
            omega = np.ones(data.M)
        else:
            omega = np.random.default_rng(ss).exponential(1.0, data.M)
        try:
            refit = refit_nuisances(data, plan, nuisances, omega)
            values = evaluate_nuisances(data, plan, refit)
            prob = _Problem(data, model, variant, values, _fold_weights(plan, omega))
            draws[b] = _newton(prob, warm).beta
        except (SolverError, np.linalg.LinAlgError, ValidationError):
            failures += 1
    ok = draws[np.all(np.isfinite(draws), axis=1)]
    lo_q, hi_q = boot.quantiles
    if ok.shape[0]:
        lo = np.quantile(ok, lo_q, axis=0)
        hi = np.quantile(ok, hi_q, axis=0)
        ci = list(zip(lo.tolist(), hi.tolist()))
    else:
        ci = [(np.nan, np.nan)] * model.d
    return BootstrapResult(beta_hat, draws, ci, failures, failures > 0.05 * boot.B)
