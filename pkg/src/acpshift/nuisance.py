"""Cross-fitted nuisance functions.

Every regression is a small stacked ensemble ("super learner"): out-of-fold
predictions from each base learner are combined with simplex weights that
minimise squared error (continuous targets) or log loss (binary targets).
Base learners are a ridge-stabilised GLM, a k-nearest-neighbour smoother and
a depth-limited regression tree; ``fast_mode`` keeps the GLM only.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import expit
from sklearn.tree import DecisionTreeRegressor

from .data import Dataset, FoldPlan
from .exceptions import (
    DegenerateLabels,
    MissingACP,
    SingularDesign,
    TooFewSamples,
    ValidationError,
)

LEARNERS = ("glm", "knn", "tree")


@dataclass(frozen=True)
class LearnerConfig:
    learners: tuple[str, ...] = LEARNERS
    cv_folds: int = 5
    knn_k: int = 10
    tree_depth: int = 4
    eps: float = 0.01
    fast_mode: bool = False
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.eps <= 0.1:
            raise ValidationError(f"clip eps must lie in (0, 0.1], got {self.eps}")
        learners = tuple(self.learners)
        if not learners:
            raise ValidationError("at least one base learner must be enabled")
        unknown = set(learners) - set(LEARNERS)
        if unknown:
            raise ValidationError(f"unknown learners: {sorted(unknown)}")
        if self.cv_folds < 2:
            raise ValidationError("cv_folds must be >= 2")
        object.__setattr__(self, "learners", learners)

    @property
    def active(self) -> tuple[str, ...]:
        return ("glm",) if self.fast_mode else self.learners


# --------------------------------------------------------------------------
# base learners


def _ridge_penalty(Z, w):
    p = Z.shape[1]
    lam = 1e-6 * float(np.einsum("ij,i,ij->", Z, w, Z)) / p
    pen = np.full(p, lam)
    pen[0] = 0.0  # intercept unpenalised
    return pen


@dataclass(frozen=True)
class _GLM:
    coef: np.ndarray
    binary: bool
    eps: float

    @staticmethod
    def fit(X, y, w, binary, eps, ridge_scale=1.0):
        Z = np.column_stack([np.ones(X.shape[0]), X])
        pen = _ridge_penalty(Z, w) * ridge_scale
        try:
            coef = _fit_logistic(Z, y, w, pen) if binary else _fit_linear(Z, y, w, pen)
        except np.linalg.LinAlgError:
            coef = None
        if coef is None or not np.all(np.isfinite(coef)):
            if ridge_scale >= 1e6:
                raise SingularDesign("GLM fit failed even with strong ridge penalty")
            return _GLM.fit(X, y, w, binary, eps, ridge_scale * 1e3 if ridge_scale > 1 else 1e3)
        return _GLM(coef, binary, eps)

    def predict(self, X):
        eta = self.coef[0] + X @ self.coef[1:]
        if self.binary:
            return np.clip(expit(eta), self.eps, 1 - self.eps)
        return eta


def _fit_linear(Z, y, w, pen):
    A = Z.T @ (w[:, None] * Z) + np.diag(pen)
    return np.linalg.solve(A, Z.T @ (w * y))


def _fit_logistic(Z, y, w, pen, max_iter=100, tol=1e-10):
    coef = np.zeros(Z.shape[1])
    ybar = np.clip(np.average(y, weights=w), 1e-6, 1 - 1e-6)
    coef[0] = np.log(ybar / (1 - ybar))
    for _ in range(max_iter):
        mu = expit(Z @ coef)
        grad = Z.T @ (w * (y - mu)) - pen * coef
        H = Z.T @ ((w * mu * (1 - mu))[:, None] * Z) + np.diag(pen)
        step = np.linalg.solve(H, grad)
        coef = coef + step
        if np.max(np.abs(step)) < tol:
            break
    return coef


@dataclass(frozen=True)
class _KNN:
    tree: cKDTree
    center: np.ndarray
    scale: np.ndarray
    y: np.ndarray
    w: np.ndarray
    k: int
    binary: bool
    eps: float

    @staticmethod
    def fit(X, y, w, binary, eps, k):
        center = X.mean(axis=0)
        scale = X.std(axis=0)
        scale[scale == 0] = 1.0
        Xs = (X - center) / scale
        return _KNN(cKDTree(Xs), center, scale, y.copy(), w.copy(),
                    min(k, X.shape[0]), binary, eps)

    def predict(self, X):
        _, idx = self.tree.query((X - self.center) / self.scale, k=self.k)
        idx = idx.reshape(X.shape[0], self.k)
        ww = self.w[idx]
        pred = (ww * self.y[idx]).sum(axis=1) / ww.sum(axis=1)
        return np.clip(pred, self.eps, 1 - self.eps) if self.binary else pred


@dataclass(frozen=True)
class _Tree:
    model: DecisionTreeRegressor
    binary: bool
    eps: float

    @staticmethod
    def fit(X, y, w, binary, eps, depth):
        t = DecisionTreeRegressor(max_depth=depth, min_samples_leaf=5, random_state=0)
        t.fit(X, y, sample_weight=w)
        return _Tree(t, binary, eps)

    def predict(self, X):
        pred = self.model.predict(X)
        return np.clip(pred, self.eps, 1 - self.eps) if self.binary else pred


def _fit_base(name, X, y, w, binary, cfg):
    if name == "glm":
        return _GLM.fit(X, y, w, binary, cfg.eps)
    if name == "knn":
        return _KNN.fit(X, y, w, binary, cfg.eps, cfg.knn_k)
    return _Tree.fit(X, y, w, binary, cfg.eps, cfg.tree_depth)


# --------------------------------------------------------------------------
# stacking


def project_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection onto the probability simplex."""
    v = np.asarray(v, dtype=float)
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    ind = np.arange(1, v.size + 1)
    rho = np.nonzero(u - css / ind > 0)[0][-1]
    theta = css[rho] / (rho + 1.0)
    return np.maximum(v - theta, 0.0)


def _loss(pred, y, w, binary):
    if binary:
        ll = y * np.log(pred) + (1 - y) * np.log1p(-pred)
        return float(-np.average(ll, weights=w))
    return float(np.average((y - pred) ** 2, weights=w))


def stack_weights(Z: np.ndarray, y: np.ndarray, w: np.ndarray, binary: bool,
                  max_iter: int = 5000, tol: float = 1e-12) -> np.ndarray:
    """Simplex weights combining the columns of ``Z``.

    Squared loss is minimised by accelerated projected gradient with a fixed
    Lipschitz step; log loss by projected gradient with backtracking.
    """
    L = Z.shape[1]
    if L == 1:
        return np.ones(1)
    w = w / w.sum()
    theta = np.full(L, 1.0 / L)
    if not binary:
        G = Z.T @ (w[:, None] * Z)
        b = Z.T @ (w * y)
        lip = 2.0 * max(np.linalg.eigvalsh(G)[-1], 1e-300)
        z, t = theta.copy(), 1.0
        for _ in range(max_iter):
            new = project_simplex(z - (2.0 * (G @ z - b)) / lip)
            t_new = 0.5 * (1 + np.sqrt(1 + 4 * t * t))
            z = new + ((t - 1) / t_new) * (new - theta)
            done = np.max(np.abs(new - theta)) < tol
            theta, t = new, t_new
            if done:
                break
    else:
        def f(th):
            q = Z @ th
            return -np.sum(w * (y * np.log(q) + (1 - y) * np.log1p(-q)))

        step = 1.0
        fval = f(theta)
        for _ in range(max_iter):
            q = Z @ theta
            grad = -Z.T @ (w * (y / q - (1 - y) / (1 - q)))
            while True:
                cand = project_simplex(theta - step * grad)
                fc = f(cand)
                if fc <= fval - 1e-4 * grad @ (theta - cand) or step < 1e-12:
                    break
                step *= 0.5
            moved = np.max(np.abs(cand - theta))
            theta, fval = cand, fc
            step = min(step * 2.0, 1e3)
            if moved < tol:
                break
    theta = np.maximum(theta, 0.0)
    return theta / theta.sum()


def _cv_split(y, V, binary, seed):
    rng = np.random.default_rng(seed)
    folds = np.empty(y.shape[0], dtype=np.int64)
    groups = [np.flatnonzero(y == 0), np.flatnonzero(y == 1)] if binary \
        else [np.arange(y.shape[0])]
    offset = 0
    for g in groups:
        folds[rng.permutation(g)] = (offset + np.arange(g.size)) % V
        offset += g.size
    return folds


@dataclass(frozen=True, eq=False)
class FittedRegressor:
    """Stacked ensemble over feature vectors.

    Calling the object returns ensemble predictions; for binary targets they
    are clipped to ``[eps, 1 - eps]``.
    """

    learners: tuple[str, ...]
    models: tuple
    weights: np.ndarray
    cv_loss: dict
    ensemble_cv_loss: float
    binary: bool
    config: LearnerConfig

    def predict(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        pred = sum(wt * m.predict(X) for wt, m in zip(self.weights, self.models))
        if self.binary:
            return np.clip(pred, self.config.eps, 1 - self.config.eps)
        return np.asarray(pred, dtype=float)

    __call__ = predict

    def refit(self, X, y, sample_weight=None) -> "FittedRegressor":
        """Refit the base learners on weighted data, keeping the stacking weights."""
        X = np.asarray(X, dtype=float)
        y = np.asarray(y, dtype=float)
        w = np.ones(y.shape[0]) if sample_weight is None else np.asarray(sample_weight, float)
        models = tuple(_fit_base(name, X, y, w, self.binary, self.config)
                       for name in self.learners)
        return replace(self, models=models)


def fit_stacked(X, y, cfg: LearnerConfig, binary: bool, sample_weight=None,
                seed: int = 0) -> FittedRegressor:
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    w = np.ones(y.shape[0]) if sample_weight is None else np.asarray(sample_weight, float)
    learners = cfg.active
    V = cfg.cv_folds
    folds = _cv_split(y, V, binary, seed)
    oof = np.empty((y.shape[0], len(learners)))
    for v in range(V):
        test = folds == v
        train = ~test
        if not test.any():
            continue
        for j, name in enumerate(learners):
            oof[test, j] = _fit_base(name, X[train], y[train], w[train], binary, cfg).predict(X[test])
    cv_loss = {name: _loss(oof[:, j], y, w, binary) for j, name in enumerate(learners)}
    weights = stack_weights(oof, y, w, binary)
    ens = oof @ weights
    models = tuple(_fit_base(name, X, y, w, binary, cfg) for name in learners)
    return FittedRegressor(learners, models, weights, cv_loss, _loss(ens, y, w, binary),
                           binary, cfg)


def infer_family(y) -> str:
    y = np.asarray(y, dtype=float)
    y = y[np.isfinite(y)]
    return "binary" if y.size and np.all((y == 0) | (y == 1)) else "continuous"


# --------------------------------------------------------------------------
# public fitters


def fit_propensity(x, r, cfg: LearnerConfig, sample_weight=None, seed: int = 0) -> FittedRegressor:
    """Stacked classifier for ``pr(R = 1 | x)``, clipped to ``[eps, 1 - eps]``."""
    r = np.asarray(r, dtype=float)
    if r.min() == r.max():
        raise DegenerateLabels("propensity training slice contains a single class")
    return fit_stacked(x, r, cfg, True, sample_weight, seed)


def propensity_to_density_ratio(pi_hat: Callable, pi: float) -> Callable:
    """``w(x) = pi/(1-pi) * (1 - pi_hat(x)) / pi_hat(x)``."""
    if not 0 < pi < 1:
        raise ValidationError(f"pi must lie in (0, 1), got {pi}")
    odds = pi / (1 - pi)

    def w_hat(x):
        p = np.asarray(pi_hat(x), dtype=float)
        return odds * (1 - p) / p

    return w_hat


def _min_samples(cfg):
    return max(2 * cfg.cv_folds, 20)


def fit_mu(x, y, cfg: LearnerConfig, family: str = "continuous", sample_weight=None,
           seed: int = 0) -> FittedRegressor:
    """Stacked regression of the outcome on x (labeled units only)."""
    y = np.asarray(y, dtype=float)
    if y.shape[0] < _min_samples(cfg):
        raise TooFewSamples(f"{y.shape[0]} labeled units; need at least {_min_samples(cfg)}")
    if not np.all(np.isfinite(y)):
        raise ValidationError("fit_mu requires observed outcomes")
    return fit_stacked(x, y, cfg, family == "binary", sample_weight, seed)


def fit_mu_tilde(x, yhat, y, cfg: LearnerConfig, family: str = "continuous",
                 sample_weight=None, seed: int = 0) -> FittedRegressor:
    """Stacked regression of the outcome on (x, yhat)."""
    yhat = np.asarray(yhat, dtype=float)
    if not np.all(np.isfinite(yhat)):
        raise MissingACP("every training unit needs an ACP value")
    feats = np.column_stack([np.asarray(x, dtype=float), yhat])
    return fit_mu(feats, y, cfg, family, sample_weight, seed)


# --------------------------------------------------------------------------
# per-fold nuisance bundles


@dataclass(frozen=True, eq=False)
class NuisanceSet:
    """Nuisance functions used on one fold.

    ``w_hat`` must be strictly positive. ``pi_hat`` may be ``None`` when the
    density ratio was supplied directly; it is then recovered from the
    ``pi`` identity when needed.
    """

    w_hat: Callable
    mu_hat: Callable
    mu_tilde_hat: Callable | None
    pi: float
    pi_hat: Callable | None = None
    fold: int | None = None
    fits: dict = field(default_factory=dict)

    @classmethod
    def from_propensity(cls, pi_hat: Callable, pi: float, mu_hat: Callable,
                        mu_tilde_hat: Callable | None = None, fold: int | None = None,
                        eps: float | None = None, fits: dict | None = None) -> "NuisanceSet":
        if eps is not None:
            raw = pi_hat

            def pi_hat(x, _raw=raw):
                return np.clip(np.asarray(_raw(x), dtype=float), eps, 1 - eps)

        return cls(propensity_to_density_ratio(pi_hat, pi), mu_hat, mu_tilde_hat, pi,
                   pi_hat, fold, dict(fits or {}))

    def propensity(self, x) -> np.ndarray:
        if self.pi_hat is not None:
            return np.asarray(self.pi_hat(x), dtype=float)
        w = np.asarray(self.w_hat(x), dtype=float)
        # invert the w <-> pi(x) identity
        odds = self.pi / (1 - self.pi)
        return odds / (odds + w)

    def cv_losses(self) -> dict:
        return {k: f.ensemble_cv_loss for k, f in self.fits.items()}


@dataclass(frozen=True, eq=False)
class NuisanceValues:
    """Nuisances evaluated at each unit with its own fold's fits."""

    pi_hat: np.ndarray
    w: np.ndarray
    mu: np.ndarray
    mu_tilde: np.ndarray

    @property
    def has_acp(self) -> bool:
        return bool(np.all(np.isfinite(self.mu_tilde)))


def evaluate_nuisances(data: Dataset, plan: FoldPlan,
                       nuisances: Sequence[NuisanceSet]) -> NuisanceValues:
    if len(nuisances) != plan.K:
        raise ValidationError(f"{len(nuisances)} nuisance sets for {plan.K} folds")
    M = data.M
    pi_hat, w, mu = np.empty(M), np.empty(M), np.empty(M)
    mu_t = np.full(M, np.nan)
    for k, ns in enumerate(nuisances):
        idx = plan.fold(k)
        if idx.size == 0:
            continue
        xk = data.x[idx]
        pi_hat[idx] = ns.propensity(xk)
        w[idx] = ns.w_hat(xk)
        mu[idx] = ns.mu_hat(xk)
        if ns.mu_tilde_hat is not None:
            yh = data.yhat[idx]
            ok = np.isfinite(yh)
            if ok.all():
                mu_t[idx] = ns.mu_tilde_hat(xk, yh)
    if not np.all(w > 0):
        raise ValidationError("density ratio must be strictly positive")
    return NuisanceValues(pi_hat, w, mu, mu_t)


def _fold_seed(cfg: LearnerConfig, plan: FoldPlan, held_out: np.ndarray) -> int:
    # keyed by the held-out index set, so relabelling folds changes nothing
    key = [cfg.seed, 0 if plan.seed is None else int(plan.seed),
           int(held_out.min()) if held_out.size else 0]
    return int(np.random.SeedSequence(key).generate_state(1)[0])


def fit_fold(data: Dataset, plan: FoldPlan, k: int, cfg: LearnerConfig,
             family: str | None = None, with_acp: bool | None = None,
             sample_weight=None) -> NuisanceSet:
    """Fit the nuisance bundle for fold ``k`` on the complement ``D_k^c``."""
    held = plan.fold(k)
    train = plan.complement(k)
    seed = _fold_seed(cfg, plan, held)
    w = np.ones(data.M) if sample_weight is None else np.asarray(sample_weight, float)
    family = family or infer_family(data.y)
    if with_acp is None:
        with_acp = data.scenario.value == "II"

    x_tr, r_tr, w_tr = data.x[train], data.r[train], w[train]
    prop = fit_propensity(x_tr, r_tr, cfg, w_tr, seed)
    lab = train[data.r[train] == 1]
    mu = fit_mu(data.x[lab], data.y[lab], cfg, family, w[lab], seed + 1)
    fits = {"propensity": prop, "mu": mu}
    mu_tilde = None
    if with_acp:
        mt = fit_mu_tilde(data.x[lab], data.yhat[lab], data.y[lab], cfg, family, w[lab], seed + 2)
        fits["mu_tilde"] = mt
        mu_tilde = _feature_join(mt)
    return NuisanceSet.from_propensity(prop, data.pi, mu, mu_tilde, fold=k, fits=fits)


def _feature_join(reg: FittedRegressor) -> Callable:
    def mu_tilde_hat(x, yhat):
        return reg.predict(np.column_stack([np.asarray(x, float), np.asarray(yhat, float)]))
    return mu_tilde_hat


def crossfit_nuisances(data: Dataset, plan: FoldPlan, cfg: LearnerConfig,
                       family: str | None = None, with_acp: bool | None = None,
                       sample_weight=None) -> list[NuisanceSet]:
    """One :class:`NuisanceSet` per fold, each trained without that fold."""
    family = family or infer_family(data.y)
    return [fit_fold(data, plan, k, cfg, family, with_acp, sample_weight)
            for k in range(plan.K)]


def refit_nuisances(data: Dataset, plan: FoldPlan, nuisances: Sequence[NuisanceSet],
                    sample_weight) -> list[NuisanceSet]:
    """Refit every fold's base learners with per-unit weights.

    Fold assignment and stacking weights are inherited from ``nuisances``.
    """
    w = np.asarray(sample_weight, dtype=float)
    out = []
    for k, ns in enumerate(nuisances):
        train = plan.complement(k)
        lab = train[data.r[train] == 1]
        fits = dict(ns.fits)
        fits["propensity"] = ns.fits["propensity"].refit(data.x[train], data.r[train], w[train])
        fits["mu"] = ns.fits["mu"].refit(data.x[lab], data.y[lab], w[lab])
        mu_tilde = None
        if "mu_tilde" in ns.fits:
            feats = np.column_stack([data.x[lab], data.yhat[lab]])
            fits["mu_tilde"] = ns.fits["mu_tilde"].refit(feats, data.y[lab], w[lab])
            mu_tilde = _feature_join(fits["mu_tilde"])
        out.append(NuisanceSet.from_propensity(fits["propensity"], ns.pi, fits["mu"],
                                               mu_tilde, fold=k, fits=fits))
    return out
