"""Influence functions, the cross-fitted estimating equation and its solver.

For the unlabeled-population parameter ``beta`` the contribution of a unit is

    (r/pi) w(x) {s - m~(x, yhat)}                      labeled residual
  + w(x) / (pi + (1 - pi) w(x)) {m~(x, yhat) - m(x)}   shrinkage
  + (1 - r)/(1 - pi) m(x)                              unlabeled projection

with ``m = (mu - g) a(x)`` and ``m~ = (mu~ - g) a(x)``. Dropping the ACP sets
``m~ = m``. The combined-population parameter ``theta`` uses
``(r/pi(x)) {u - h~} + h~`` instead.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import Dataset, FoldPlan, Observation, Scenario, ScoreModel, make_folds
from .exceptions import (
    DimensionMismatch,
    MissingACP,
    NoConvergence,
    ScenarioMismatch,
    SingularJacobian,
    ValidationError,
)
from .nuisance import (
    LearnerConfig,
    NuisanceSet,
    NuisanceValues,
    crossfit_nuisances,
    evaluate_nuisances,
    infer_family,
)

SCHEMA_VERSION = 1


class Variant(str, enum.Enum):
    WITH_ACP = "with-acp"
    WITHOUT_ACP = "without-acp"
    THETA_WITH_ACP = "theta-with"
    THETA_WITHOUT_ACP = "theta-without"

    @property
    def uses_acp(self) -> bool:
        return self in (Variant.WITH_ACP, Variant.THETA_WITH_ACP)

    @property
    def is_theta(self) -> bool:
        return self in (Variant.THETA_WITH_ACP, Variant.THETA_WITHOUT_ACP)

    def without(self) -> "Variant":
        return Variant.THETA_WITHOUT_ACP if self.is_theta else Variant.WITHOUT_ACP


@dataclass(frozen=True)
class SolverConfig:
    max_iter: int = 100
    damping: float = 0.5
    max_halvings: int = 30
    tol: float = 1e-10
    beta0: tuple | None = None

    def __post_init__(self):
        if self.tol <= 0:
            raise ValidationError("solver tolerance must be positive")
        if not 0 < self.damping < 1:
            raise ValidationError("damping factor must lie in (0, 1)")


@dataclass(frozen=True, eq=False)
class EifTerms:
    """Per-unit influence-function pieces, each of shape (m, d)."""

    labeled: np.ndarray
    shrinkage: np.ndarray
    projection: np.ndarray

    @property
    def total(self) -> np.ndarray:
        return self.labeled + self.shrinkage + self.projection


def eif_terms(model: ScoreModel, beta, pi: float, r, y, x, w, mu, mu_tilde=None,
              variant: Variant = Variant.WITH_ACP, pi_x=None) -> EifTerms:
    """Vectorised influence-function terms.

    ``w`` is the density ratio at each unit; ``pi_x`` the propensity
    (only used by the theta variants). ``mu_tilde`` is required when the
    variant uses the ACP.
    """
    variant = Variant(variant)
    r = np.asarray(r, dtype=float)
    a = model.design(x)
    g = model.link(a @ model._beta(beta))
    yy = np.where(r == 1, np.nan_to_num(np.asarray(y, dtype=float)), 0.0)
    mu = np.asarray(mu, dtype=float)
    s = (yy - g)[:, None] * a
    m = (mu - g)[:, None] * a
    if variant.uses_acp:
        if mu_tilde is None or not np.all(np.isfinite(mu_tilde)):
            raise MissingACP("ACP-based regression is unavailable for some units")
        mt = (np.asarray(mu_tilde, dtype=float) - g)[:, None] * a
    else:
        mt = m
    if variant.is_theta:
        if pi_x is None:
            raise ValidationError("theta variants need the propensity at each unit")
        lab = (r / np.asarray(pi_x, dtype=float))[:, None] * (s - mt)
        return EifTerms(lab, mt - m, m)
    w = np.asarray(w, dtype=float)
    lab = (r / pi * w)[:, None] * (s - mt)
    shrink = (w / (pi + (1 - pi) * w))[:, None] * (mt - m)
    proj = ((1 - r) / (1 - pi))[:, None] * m
    return EifTerms(lab, shrink, proj)


def _single(obs: Observation | Dataset):
    if isinstance(obs, Dataset):
        return obs.r, obs.y, obs.x, obs.yhat, False
    y = np.nan if obs.y is None else obs.y
    yh = np.nan if obs.yhat is None else obs.yhat
    if obs.r == 1 and obs.y is None:
        raise ValidationError("labeled observation needs an outcome")
    return (np.array([obs.r]), np.array([y], float), np.array([obs.x], float).reshape(1, -1),
            np.array([yh], float), True)


def _eval_ns(ns: NuisanceSet, x, yhat, need_acp: bool):
    w = np.asarray(ns.w_hat(x), dtype=float)
    mu = np.asarray(ns.mu_hat(x), dtype=float)
    mt = None
    if need_acp:
        if not np.all(np.isfinite(yhat)):
            raise MissingACP("observation has no ACP value")
        if ns.mu_tilde_hat is None:
            raise MissingACP("nuisance set has no ACP-based regression")
        mt = np.asarray(ns.mu_tilde_hat(x, yhat), dtype=float)
    return w, mu, mt


def eif_with_acp(obs: Observation | Dataset, ns: NuisanceSet, beta, pi: float,
                 model: ScoreModel) -> np.ndarray:
    r, y, x, yhat, single = _single(obs)
    w, mu, mt = _eval_ns(ns, x, yhat, True)
    out = eif_terms(model, beta, pi, r, y, x, w, mu, mt, Variant.WITH_ACP).total
    return out[0] if single else out


def eif_without_acp(obs: Observation | Dataset, ns: NuisanceSet, beta, pi: float,
                    model: ScoreModel) -> np.ndarray:
    r, y, x, yhat, single = _single(obs)
    w, mu, _ = _eval_ns(ns, x, yhat, False)
    out = eif_terms(model, beta, pi, r, y, x, w, mu, None, Variant.WITHOUT_ACP).total
    return out[0] if single else out


def eif_theta(obs: Observation | Dataset, ns: NuisanceSet, theta, model: ScoreModel,
              with_acp: bool = True) -> np.ndarray:
    """Combined-population contribution ``(r/pi(x)) {u - h~} + h~``."""
    r, y, x, yhat, single = _single(obs)
    w, mu, mt = _eval_ns(ns, x, yhat, with_acp)
    variant = Variant.THETA_WITH_ACP if with_acp else Variant.THETA_WITHOUT_ACP
    out = eif_terms(model, theta, ns.pi, r, y, x, w, mu, mt, variant,
                    pi_x=ns.propensity(x)).total
    return out[0] if single else out


# --------------------------------------------------------------------------
# estimating equation


@dataclass(frozen=True, eq=False)
class _Problem:
    data: Dataset
    model: ScoreModel
    variant: Variant
    values: NuisanceValues
    weights: np.ndarray  # per-unit weight; sums to 1

    def terms(self, beta) -> EifTerms:
        d, v = self.data, self.values
        return eif_terms(self.model, beta, d.pi, d.r, d.y, d.x, v.w, v.mu,
                         v.mu_tilde if self.variant.uses_acp else None,
                         self.variant, pi_x=v.pi_hat)

    def contributions(self, beta) -> np.ndarray:
        return self.terms(beta).total

    def equation(self, beta) -> np.ndarray:
        return self.weights @ self.contributions(beta)

    def jacobian(self, beta) -> np.ndarray:
        a = self.model.design(self.data.x)
        gp = self.model.dlink(a @ self.model._beta(beta))
        coef = self.weights * gp
        if not self.variant.is_theta:
            coef = coef * (1 - self.data.r) / (1 - self.data.pi)
        return -(a * coef[:, None]).T @ a


def _fold_weights(plan: FoldPlan, unit_weights=None) -> np.ndarray:
    if unit_weights is None:
        return plan.fold_weights()
    w = np.asarray(unit_weights, dtype=float)
    totals = np.bincount(plan.assignment, weights=w, minlength=plan.K)
    return w / (plan.K * totals[plan.assignment])


def _as_values(data, plan, nuisances) -> NuisanceValues:
    if isinstance(nuisances, NuisanceValues):
        return nuisances
    return evaluate_nuisances(data, plan, nuisances)


def _problem(data, plan, nuisances, model, variant, unit_weights=None) -> _Problem:
    variant = Variant(variant)
    values = _as_values(data, plan, nuisances)
    if model.d != model.design(data.x[:1]).shape[1]:
        raise DimensionMismatch("model and data disagree on dimension")
    return _Problem(data, model, variant, values, _fold_weights(plan, unit_weights))


def estimating_equation(data: Dataset, plan: FoldPlan,
                        nuisances: Sequence[NuisanceSet] | NuisanceValues, beta,
                        model: ScoreModel, variant: Variant = Variant.WITH_ACP,
                        unit_weights=None) -> np.ndarray:
    """Average of the K fold means of the influence-function contributions."""
    return _problem(data, plan, nuisances, model, variant, unit_weights).equation(beta)


@dataclass(frozen=True)
class SolveInfo:
    beta: np.ndarray
    iterations: int
    residual: float
    fallback_steps: int = 0


def _newton(prob: _Problem, solver: SolverConfig) -> SolveInfo:
    d = prob.model.d
    beta = np.zeros(d) if solver.beta0 is None else np.asarray(solver.beta0, float).copy()
    if beta.shape != (d,):
        raise DimensionMismatch(f"initial beta must have length {d}")
    F = prob.equation(beta)
    norm = np.max(np.abs(F))
    it = fallback = 0
    while norm > solver.tol:
        if it >= solver.max_iter:
            raise NoConvergence(f"no convergence after {it} iterations (|N|={norm:.3g})")
        J = prob.jacobian(beta)
        singular = not np.all(np.isfinite(J)) or np.linalg.cond(J) > 1e14
        if singular:
            step = F.copy()  # damped fixed point: N is decreasing in beta
            fallback += 1
        else:
            step = np.linalg.solve(J, -F)
        t = 1.0
        for _ in range(solver.max_halvings + 1):
            cand = beta + t * step
            Fc = prob.equation(cand)
            nc = np.max(np.abs(Fc))
            if np.isfinite(nc) and nc < norm:
                break
            t *= solver.damping
        else:
            if singular:
                raise SingularJacobian("Jacobian is singular and fixed-point steps stall")
            raise NoConvergence(f"line search failed at |N|={norm:.3g}")
        beta, F, norm = cand, Fc, nc
        it += 1
    return SolveInfo(beta, it, float(norm), fallback)


def solve_beta(data: Dataset, plan: FoldPlan, nuisances, model: ScoreModel,
               variant: Variant = Variant.WITH_ACP, solver: SolverConfig | None = None,
               unit_weights=None, return_info: bool = False):
    """Root of the cross-fitted estimating equation by damped Newton."""
    prob = _problem(data, plan, nuisances, model, variant, unit_weights)
    info = _newton(prob, solver or SolverConfig())
    return info if return_info else info.beta


# --------------------------------------------------------------------------
# end-to-end estimation


@dataclass(frozen=True)
class EstimatorConfig:
    K: int = 5
    seed: int = 0
    learner: LearnerConfig = field(default_factory=LearnerConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    alpha: float = 0.05
    family: str | None = None


@dataclass(frozen=True, eq=False)
class EstimateResult:
    beta: np.ndarray
    covariance: np.ndarray
    ci: list
    variant: Variant
    diagnostics: dict
    sandwich: np.ndarray
    M: int
    alpha: float
    coord_names: list

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.diag(self.covariance))

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "beta": [float(b) for b in self.beta],
            "cov": [[float(c) for c in row] for row in self.covariance],
            "ci": [{"coord": name, "lo": float(lo), "hi": float(hi)}
                   for name, (lo, hi) in zip(self.coord_names, self.ci)],
            "variant": self.variant.value,
            "diagnostics": _jsonable(self.diagnostics),
        }

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, **kw)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        f = float(obj)
        return f if math.isfinite(f) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, enum.Enum):
        return obj.value
    return obj


def resolve_variant(data: Dataset, variant: Variant) -> tuple[Variant, list[str]]:
    """Check scenario compatibility; scenario III silently drops the ACP."""
    variant = Variant(variant)
    notes: list[str] = []
    if variant.uses_acp:
        if data.scenario is Scenario.I:
            raise ScenarioMismatch("ACP column required for variant " + variant.value)
        if data.scenario is Scenario.III:
            notes.append("ACP present on labeled units only: no efficiency gain is "
                         "possible, estimating without ACP")
            variant = variant.without()
    return variant, notes


def fit_crossfit(data: Dataset, config: EstimatorConfig, with_acp: bool | None = None):
    """Fold plan and cross-fitted nuisances for ``data``."""
    plan = make_folds(data, config.K, config.seed)
    family = config.family or infer_family(data.y)
    nuisances = crossfit_nuisances(data, plan, config.learner, family, with_acp)
    return plan, nuisances


def estimate(data: Dataset, model: ScoreModel, config: EstimatorConfig | None = None,
             variant: Variant = Variant.WITH_ACP, plan: FoldPlan | None = None,
             nuisances: Sequence[NuisanceSet] | None = None) -> EstimateResult:
    """Cross-fit nuisances, solve the estimating equation and attach inference.

    Pre-computed ``plan``/``nuisances`` may be passed to share them between
    variants.
    """
    from .inference import build_result  # circular at import time

    config = config or EstimatorConfig()
    variant, notes = resolve_variant(data, variant)
    if nuisances is None:
        plan, nuisances = fit_crossfit(data, config)
    elif plan is None:
        raise ValidationError("nuisances given without their fold plan")
    values = evaluate_nuisances(data, plan, nuisances)
    prob = _Problem(data, model, variant, values, _fold_weights(plan))
    info = _newton(prob, config.solver)
    diagnostics = {
        "iterations": info.iterations,
        "residual": info.residual,
        "fallback_steps": info.fallback_steps,
        "scenario": data.scenario.value,
        "n": data.n,
        "N": data.N,
        "K": plan.K,
        "notes": notes,
        "cv_losses": [ns.cv_losses() for ns in nuisances],
    }
    return build_result(prob, info.beta, config.alpha, diagnostics)


def estimate_theta(data: Dataset, model: ScoreModel, config: EstimatorConfig | None = None,
                   variant: Variant = Variant.THETA_WITH_ACP, **kw) -> EstimateResult:
    """Combined-population parameter; ``variant`` may be given as beta-style and
    is mapped to its theta counterpart."""
    variant = Variant(variant)
    if not variant.is_theta:
        variant = Variant.THETA_WITH_ACP if variant.uses_acp else Variant.THETA_WITHOUT_ACP
    return estimate(data, model, config, variant, **kw)
