"""Ground truth for the Gaussian-covariate simulation design.

Covariates ``X ~ N(0, I_p)`` and an extra variable ``Z`` with
``corr(Z, X_1) = zeta`` (``Z = X_1`` when ``zeta = 1``); ``Z`` is the ACP.
Outcomes follow ``1 + xi'X + alpha Z`` plus Gaussian noise (linear family) or
through the logistic link (logistic family). Labeling follows
``pr(R = 1 | x) = expit(eta'x)``.

All bounds are Monte Carlo averages evaluated with the analytic nuisance
functions; per-unit contributions are streamed in chunks so ``mc_n = 10**6``
stays within a modest memory budget.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from scipy import integrate
from scipy.special import expit, logit

from .data import ScoreKind, ScoreModel
from .exceptions import InvalidSpec
from .nuisance import NuisanceSet

CACHE_VERSION = 1
_CHUNK = 200_000
_GH_NODES, _GH_WEIGHTS = hermegauss(64)
_GH_WEIGHTS = _GH_WEIGHTS / math.sqrt(2 * math.pi)


@dataclass(frozen=True)
class DgpSpec:
    alpha_signal: float = 5.0
    zeta: float = 0.0
    family: str = "linear"
    p: int = 5
    xi: tuple = (1.0, 0.5, 0.5, 0.5, 0.5)
    eta: tuple = (1.0, 1.0, 1.0, 1.0, 1.0)

    def __post_init__(self):
        if self.family not in ("linear", "logistic"):
            raise InvalidSpec(f"family must be 'linear' or 'logistic', got {self.family!r}")
        if not 0.0 <= self.zeta <= 1.0:
            raise InvalidSpec(f"zeta must lie in [0, 1], got {self.zeta}")
        if len(self.xi) != self.p or len(self.eta) != self.p:
            raise InvalidSpec("xi and eta must have length p")
        object.__setattr__(self, "xi", tuple(float(v) for v in self.xi))
        object.__setattr__(self, "eta", tuple(float(v) for v in self.eta))

    @property
    def xi_arr(self) -> np.ndarray:
        return np.asarray(self.xi)

    @property
    def eta_arr(self) -> np.ndarray:
        return np.asarray(self.eta)

    @property
    def covariance(self) -> np.ndarray:
        S = np.eye(self.p + 1)
        S[0, self.p] = S[self.p, 0] = self.zeta
        return S

    def key(self) -> dict:
        return asdict(self)


def draw_xz(spec: DgpSpec, size: int, rng: np.random.Generator):
    x = rng.standard_normal((size, spec.p))
    if spec.zeta == 1.0:
        z = x[:, 0].copy()
    else:
        z = spec.zeta * x[:, 0] + math.sqrt(1 - spec.zeta ** 2) * rng.standard_normal(size)
    return x, z


def linear_index(spec: DgpSpec, x, z) -> np.ndarray:
    return 1.0 + x @ spec.xi_arr + spec.alpha_signal * z


def draw_y(spec: DgpSpec, x, z, rng: np.random.Generator) -> np.ndarray:
    lin = linear_index(spec, x, z)
    if spec.family == "linear":
        return lin + rng.standard_normal(lin.shape[0])
    return (rng.random(lin.shape[0]) < expit(lin)).astype(float)


def marginal_label_rate(spec: DgpSpec) -> float:
    """``E expit(eta'X)``; ``eta'X`` is ``N(0, |eta|^2)``."""
    sd = float(np.linalg.norm(spec.eta_arr))
    if sd == 0:
        return 0.5
    f = lambda t: expit(t) * math.exp(-0.5 * (t / sd) ** 2) / (sd * math.sqrt(2 * math.pi))
    val, _ = integrate.quad(f, -40 * sd, 40 * sd, epsabs=1e-14, epsrel=1e-12, limit=200)
    return float(val)


@dataclass(frozen=True)
class AnalyticNuisances:
    """True nuisance functions.

    ``pi`` is the labeled fraction the functions are calibrated to. When it
    differs from the marginal rate (fixed ``n``, ``N`` quotas), the propensity
    is shifted on the logit scale; the density ratio does not change.
    """

    spec: DgpSpec
    pi: float
    marginal_pi: float

    def propensity(self, x) -> np.ndarray:
        shift = logit(self.pi) - logit(self.marginal_pi)
        return expit(np.asarray(x, float) @ self.spec.eta_arr + shift)

    def density_ratio(self, x) -> np.ndarray:
        p0 = expit(np.asarray(x, float) @ self.spec.eta_arr)
        m = self.marginal_pi
        return m / (1 - m) * (1 - p0) / p0

    def mu_tilde(self, x, z) -> np.ndarray:
        lin = linear_index(self.spec, np.asarray(x, float), np.asarray(z, float))
        return lin if self.spec.family == "linear" else expit(lin)

    def mu(self, x) -> np.ndarray:
        x = np.asarray(x, float)
        s = self.spec
        if s.zeta == 1.0 or s.alpha_signal == 0.0:
            # Z is a function of X, or irrelevant: degenerate limit
            return self.mu_tilde(x, x[:, 0])
        cond_mean = s.zeta * x[:, 0]
        if s.family == "linear":
            return 1.0 + x @ s.xi_arr + s.alpha_signal * cond_mean
        sd = math.sqrt(1 - s.zeta ** 2)
        base = 1.0 + x @ s.xi_arr + s.alpha_signal * cond_mean
        vals = expit(base[:, None] + s.alpha_signal * sd * _GH_NODES[None, :])
        return vals @ _GH_WEIGHTS

    def as_nuisance_set(self, eps: float | None = None) -> NuisanceSet:
        return NuisanceSet.from_propensity(self.propensity, self.pi, self.mu,
                                           self.mu_tilde, eps=eps)


def analytic_nuisances(spec: DgpSpec, label_fraction: float | None = None) -> AnalyticNuisances:
    m = marginal_label_rate(spec)
    return AnalyticNuisances(spec, m if label_fraction is None else float(label_fraction), m)


# --------------------------------------------------------------------------
# true parameters


def _streams(seed: int, tag: int):
    return np.random.SeedSequence([int(seed), tag])


def _sample_population(spec: DgpSpec, size: int, seed: int, tag: int, keep: str = "all"):
    """``size`` draws of (x, z) from the full population or one stratum."""
    rng = np.random.default_rng(_streams(seed, tag))
    eta = spec.eta_arr
    xs, zs, have = [], [], 0
    while have < size:
        batch = max(_CHUNK, 2 * (size - have)) if keep != "all" else size - have
        x, z = draw_xz(spec, batch, rng)
        if keep != "all":
            r = rng.random(batch) < expit(x @ eta)
            sel = ~r if keep == "unlabeled" else r
            x, z = x[sel], z[sel]
        take = min(size - have, x.shape[0])
        xs.append(x[:take])
        zs.append(z[:take])
        have += take
    return np.concatenate(xs), np.concatenate(zs)


def _solve_population(model: ScoreModel, a: np.ndarray, target: np.ndarray,
                      tol: float = 1e-13, max_iter: int = 100) -> np.ndarray:
    """Root of mean((target - g(a'b)) a) = 0 by Newton."""
    b = np.zeros(a.shape[1])
    for _ in range(max_iter):
        eta = a @ b
        F = ((target - model.link(eta))[:, None] * a).mean(axis=0)
        J = -(a * model.dlink(eta)[:, None]).T @ a / a.shape[0]
        step = np.linalg.solve(J, -F)
        b = b + step
        if np.max(np.abs(step)) < tol * (1 + np.max(np.abs(b))):
            break
    return b


def _check_model(spec: DgpSpec, model: ScoreModel):
    if model.kind is not ScoreKind.MEAN and model.p != spec.p:
        raise InvalidSpec(f"model has p={model.p}, design has p={spec.p}")


def true_beta(spec: DgpSpec, model: ScoreModel, mc_n: int = 1_000_000, seed: int = 0):
    """Unlabeled-population parameter and its Monte Carlo standard errors.

    Units are drawn from the unlabeled stratum by rejection; the outcome is
    integrated out analytically through ``E(Y | x, z)``.
    """
    return _true_param(spec, model, mc_n, seed, "unlabeled")


def true_theta(spec: DgpSpec, model: ScoreModel, mc_n: int = 1_000_000, seed: int = 0):
    """Combined-population parameter and its Monte Carlo standard errors."""
    return _true_param(spec, model, mc_n, seed, "all")


def _true_param(spec, model, mc_n, seed, keep):
    _check_model(spec, model)
    nu = analytic_nuisances(spec)
    x, z = _sample_population(spec, mc_n, seed, 1 if keep == "unlabeled" else 2, keep)
    a = model.design(x)
    target = nu.mu_tilde(x, z)
    b = _solve_population(model, a, target)
    psi = (target - model.link(a @ b))[:, None] * a
    J = -(a * model.dlink(a @ b)[:, None]).T @ a / a.shape[0]
    Jinv = np.linalg.inv(J)
    cov = Jinv @ np.cov(psi, rowvar=False).reshape(model.d, model.d) @ Jinv / mc_n
    return b, np.sqrt(np.diag(cov))


# --------------------------------------------------------------------------
# efficiency bounds


@dataclass(frozen=True, eq=False)
class OracleBounds:
    """Efficiency-bound ingredients.

    ``V_w``/``V_wo`` are the middle matrices (with and without ACP) and
    ``omega`` the inverse expected score Jacobian (``Gamma`` for theta), so the
    bounds are ``omega @ V @ omega``. ``gain`` is the closed-form
    ``omega (V_wo - V_w) omega``; ``diff`` is the Monte Carlo difference of the
    two bounds minus ``gain``, with entrywise standard errors ``diff_se``.
    """

    target: str
    beta0: np.ndarray
    beta0_se: np.ndarray
    V_w: np.ndarray
    V_wo: np.ndarray
    omega: np.ndarray
    gain: np.ndarray
    gain_se: np.ndarray
    diff: np.ndarray
    diff_se: np.ndarray
    pi: float
    mc_samples: int
    mc_se: float
    key: dict = field(default_factory=dict)

    @property
    def bound_w(self) -> np.ndarray:
        return self.omega @ self.V_w @ self.omega

    @property
    def bound_wo(self) -> np.ndarray:
        return self.omega @ self.V_wo @ self.omega

    @property
    def bound_scenario_iii(self) -> np.ndarray:
        # labeled-only ACPs carry no information
        return self.bound_wo

    def consistent(self, k: float = 4.0) -> bool:
        """Two routes to the gain agree entrywise within ``k`` standard errors."""
        tol = k * self.diff_se + 1e-12 * (1.0 + np.abs(self.gain))
        return bool(np.all(np.abs(self.diff) <= tol))

    def gain_psd(self, k: float = 4.0) -> bool:
        return bool(np.linalg.eigvalsh(self.gain)[0] >= -k * self.mc_se - 1e-12)

    def to_dict(self) -> dict:
        out = {"cache_version": CACHE_VERSION, "key": self.key, "target": self.target,
               "pi": self.pi, "mc_samples": self.mc_samples, "mc_se": self.mc_se}
        for name in ("beta0", "beta0_se", "V_w", "V_wo", "omega", "gain", "gain_se",
                     "diff", "diff_se"):
            out[name] = np.asarray(getattr(self, name)).tolist()
        out["bound_w"] = self.bound_w.tolist()
        out["bound_wo"] = self.bound_wo.tolist()
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "OracleBounds":
        arr = {k: np.asarray(d[k], dtype=float) for k in
               ("beta0", "beta0_se", "V_w", "V_wo", "omega", "gain", "gain_se", "diff", "diff_se")}
        return cls(target=d["target"], pi=float(d["pi"]), mc_samples=int(d["mc_samples"]),
                   mc_se=float(d["mc_se"]), key=d.get("key", {}), **arr)


class _Moments:
    """Streaming mean and entrywise standard error of (d, d) matrices."""

    def __init__(self, d):
        self.s = np.zeros((d, d))
        self.ss = np.zeros((d, d))
        self.n = 0

    def add(self, X):
        self.s += X.sum(axis=0)
        self.ss += (X ** 2).sum(axis=0)
        self.n += X.shape[0]

    @property
    def mean(self):
        return self.s / self.n

    @property
    def se(self):
        var = np.maximum(self.ss / self.n - self.mean ** 2, 0.0) * self.n / (self.n - 1)
        return np.sqrt(var / self.n)


def _outer(c, u):
    return c[:, None, None] * u[:, :, None] * u[:, None, :]


def oracle_bounds(spec: DgpSpec, model: ScoreModel, mc_n: int = 1_000_000,
                  seed: int = 0) -> OracleBounds:
    """Bounds for the unlabeled-population parameter."""
    return _bounds(spec, model, mc_n, seed, theta=False)


def oracle_bounds_theta(spec: DgpSpec, model: ScoreModel, mc_n: int = 1_000_000,
                        seed: int = 0) -> OracleBounds:
    """Bounds for the combined-population parameter."""
    return _bounds(spec, model, mc_n, seed, theta=True)


def _bounds(spec, model, mc_n, seed, theta):
    _check_model(spec, model)
    nu = analytic_nuisances(spec)
    pi = nu.marginal_pi
    b0, b0_se = (true_theta if theta else true_beta)(spec, model, mc_n, seed)

    # inverse expected Jacobian over the target population
    xq, _ = _sample_population(spec, mc_n, seed, 2 if theta else 1,
                               "all" if theta else "unlabeled")
    aq = model.design(xq)
    J = -(aq * model.dlink(aq @ b0)[:, None]).T @ aq / aq.shape[0]
    omega = np.linalg.inv(J)
    omega = 0.5 * (omega + omega.T)
    del xq, aq

    d = model.d
    Vw, Vwo, G = (np.zeros((d, d)) for _ in range(3))
    gain_m, diff_m = _Moments(d), _Moments(d)
    rng = np.random.default_rng(_streams(seed, 3))
    done = 0
    while done < mc_n:
        size = min(_CHUNK, mc_n - done)
        x, z = draw_xz(spec, size, rng)
        p0 = expit(x @ spec.eta_arr)
        y = draw_y(spec, x, z, rng)
        a = model.design(x)
        g = model.link(a @ b0)
        s = (y - g)[:, None] * a
        m = (nu.mu(x) - g)[:, None] * a
        mt = (nu.mu_tilde(x, z) - g)[:, None] * a
        # the labeling indicator is integrated out (r -> pi0): the raw
        # indicator-weighted terms have infinite fourth moments here
        if theta:
            c_res = 1 / p0
            c_mid_w = np.ones(size)
            c_mid_wo = c_res
            c_last = np.ones(size)
            c_gain = (1 - p0) / p0
        else:
            w = nu.density_ratio(x)
            c_res = p0 * w ** 2 / pi ** 2
            c_mid_w = (1 - p0) ** 2 / (1 - pi) ** 2
            c_mid_wo = None
            c_last = (1 - p0) / (1 - pi) ** 2
            c_gain = (1 - p0) ** 3 / p0 / (1 - pi) ** 2
        res_t, res_o, mid = s - mt, s - m, mt - m
        vw = _outer(c_res, res_t) + _outer(c_mid_w, mid) + _outer(c_last, m)
        if theta:
            vwo = _outer(c_res, res_t) + _outer(c_mid_wo, mid) + _outer(c_last, m)
        else:
            vwo = _outer(c_res, res_o) + _outer(c_last, m)
        gi = _outer(c_gain, mid)
        Vw += vw.sum(axis=0)
        Vwo += vwo.sum(axis=0)
        G += gi.sum(axis=0)
        sand = lambda A: np.einsum("ij,njk,kl->nil", omega, A, omega, optimize=True)
        gain_m.add(sand(gi))
        diff_m.add(sand(vwo - vw - gi))
        done += size
    Vw, Vwo, G = Vw / mc_n, Vwo / mc_n, G / mc_n
    gain = omega @ G @ omega
    diff = omega @ (Vwo - Vw) @ omega - gain
    return OracleBounds(
        target="theta" if theta else "beta", beta0=b0, beta0_se=b0_se,
        V_w=0.5 * (Vw + Vw.T), V_wo=0.5 * (Vwo + Vwo.T), omega=omega,
        gain=0.5 * (gain + gain.T), gain_se=gain_m.se, diff=diff, diff_se=diff_m.se,
        pi=pi, mc_samples=mc_n, mc_se=float(gain_m.se.max()),
        key=_cache_key(spec, model, mc_n, seed, "theta" if theta else "beta"),
    )


# --------------------------------------------------------------------------
# cache


def cache_dir() -> Path:
    env = os.environ.get("ACP_CACHE_DIR")
    return Path(env) if env else Path.home() / ".cache" / "acpshift"


def _cache_key(spec, model, mc_n, seed, kind) -> dict:
    key = {"version": CACHE_VERSION, "kind": kind, "spec": spec.key(),
            "model": {"kind": model.kind.value, "p": model.p}, "mc_n": int(mc_n),
            "seed": int(seed)}
    return json.loads(json.dumps(key))  # tuples -> lists, as stored


def _cache_path(key: dict, directory: Path | None) -> Path:
    blob = json.dumps(key, sort_keys=True).encode()
    name = f"{key['kind']}-{hashlib.sha256(blob).hexdigest()[:20]}.json"
    return (directory or cache_dir()) / name


def _dump(path: Path, payload: dict):
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    tmp.replace(path)


def cached_bounds(spec: DgpSpec, model: ScoreModel, mc_n: int = 1_000_000, seed: int = 0,
                  target: str = "beta", directory: Path | None = None):
    """``(OracleBounds, path, hit)``, computing and storing on a miss."""
    key = _cache_key(spec, model, mc_n, seed, target)
    path = _cache_path(key, directory)
    if path.exists():
        try:
            payload = json.loads(path.read_text(encoding="utf-8"))
            if payload.get("key") == key:
                return OracleBounds.from_dict(payload), path, True
        except (json.JSONDecodeError, KeyError):
            pass
    fn = oracle_bounds_theta if target == "theta" else oracle_bounds
    ob = fn(spec, model, mc_n, seed)
    _dump(path, ob.to_dict())
    return ob, path, False


def cached_true_param(spec: DgpSpec, model: ScoreModel, mc_n: int = 1_000_000, seed: int = 0,
                      target: str = "beta", directory: Path | None = None):
    """Cached :func:`true_beta` / :func:`true_theta`."""
    key = _cache_key(spec, model, mc_n, seed, f"param-{target}")
    path = _cache_path(key, directory)
    if path.exists():
        try:
            payload = json.loads(path.read_text(encoding="utf-8"))
            if payload.get("key") == key:
                return np.asarray(payload["value"]), np.asarray(payload["se"])
        except (json.JSONDecodeError, KeyError):
            pass
    fn = true_theta if target == "theta" else true_beta
    value, se = fn(spec, model, mc_n, seed)
    try:
        _dump(path, {"key": key, "value": value.tolist(), "se": se.tolist()})
    except OSError:
        pass
    return value, se
