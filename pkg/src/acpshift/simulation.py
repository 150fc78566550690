"""Replication studies on the Gaussian-covariate design.

Each replication draws a dataset with exact stratum sizes, fits the nuisances
once and solves both the with-ACP and without-ACP estimating equations on the
same folds, so MSE ratios are paired.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.special import expit

from .data import Dataset, ScoreModel, make_folds
from .estimator import EstimatorConfig, Variant, estimate, fit_crossfit
from .exceptions import ACPError, InvalidSpec
from .nuisance import LearnerConfig
from .oracle import DgpSpec, analytic_nuisances, cached_true_param, draw_xz, draw_y

log = logging.getLogger(__name__)

INVALID_FAILURE_RATE = 0.02
LOW_REPLICATION = 100


def gen_dataset(spec: DgpSpec, n: int, N: int, seed=0, return_truth: bool = False):
    """Draw units until exactly ``n`` labeled and ``N`` unlabeled are kept.

    The ACP is ``Z`` itself. Units keep their draw order. With
    ``return_truth`` the hidden outcomes and ``Z`` are returned too.
    """
    if n < 1 or N < 1:
        raise InvalidSpec("n and N must be positive")
    rng = np.random.default_rng(seed)
    eta = spec.eta_arr
    parts, have_l, have_u = [], 0, 0
    while have_l < n or have_u < N:
        batch = max(256, 2 * (n - have_l + N - have_u))
        x, z = draw_xz(spec, batch, rng)
        y = draw_y(spec, x, z, rng)
        r = rng.random(batch) < expit(x @ eta)
        lab = np.flatnonzero(r)[: n - have_l]
        unl = np.flatnonzero(~r)[: N - have_u]
        keep = np.sort(np.concatenate([lab, unl]))
        parts.append((r[keep], x[keep], y[keep], z[keep]))
        have_l += lab.size
        have_u += unl.size
    r, x, y, z = (np.concatenate(c) for c in zip(*parts))
    r = r.astype(int)
    data = Dataset.from_arrays(r, x, np.where(r == 1, y, np.nan), z)
    if return_truth:
        return data, y, z
    return data


@dataclass(frozen=True)
class SimConfig:
    spec: DgpSpec = field(default_factory=DgpSpec)
    n: int = 300
    N: int = 300
    model: str = "mean"
    replications: int = 500
    K: int = 5
    learner: LearnerConfig = field(default_factory=LearnerConfig)
    seed: int = 0
    fast_mode: bool = True
    alpha: float = 0.05
    target: str = "beta"
    nuisance: str = "crossfit"
    mc_n: int = 1_000_000
    n_jobs: int = 1

    def __post_init__(self):
        if self.n < 50 or self.N < 50:
            raise InvalidSpec("n and N must be at least 50")
        if self.replications < 2:
            raise InvalidSpec("replications must be at least 2")
        if self.target not in ("beta", "theta"):
            raise InvalidSpec(f"target must be 'beta' or 'theta', got {self.target!r}")
        if self.nuisance not in ("crossfit", "oracle"):
            raise InvalidSpec(f"nuisance must be 'crossfit' or 'oracle', got {self.nuisance!r}")
        ScoreModel.from_name(self.model, self.spec.p)

    @property
    def score_model(self) -> ScoreModel:
        return ScoreModel.from_name(self.model, self.spec.p)

    @property
    def variants(self) -> tuple[Variant, Variant]:
        if self.target == "theta":
            return Variant.THETA_WITH_ACP, Variant.THETA_WITHOUT_ACP
        return Variant.WITH_ACP, Variant.WITHOUT_ACP

    def estimator_config(self, seed: int) -> EstimatorConfig:
        learner = replace(self.learner, fast_mode=self.fast_mode, seed=seed)
        family = "binary" if self.spec.family == "logistic" else "continuous"
        return EstimatorConfig(K=self.K, seed=seed, learner=learner, alpha=self.alpha,
                               family=family)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["learner"]["learners"] = list(d["learner"]["learners"])
        return d


@dataclass(frozen=True, eq=False)
class SimSummary:
    coord_names: list
    beta0: np.ndarray
    mse_with: np.ndarray
    mse_without: np.ndarray
    bias_with: np.ndarray
    bias_without: np.ndarray
    coverage_with: np.ndarray
    coverage_without: np.ndarray
    width_with: np.ndarray
    width_without: np.ndarray
    mean_var_with: np.ndarray
    mean_var_without: np.ndarray
    emp_var_with: np.ndarray
    emp_var_without: np.ndarray
    replications: int
    failures: int
    records: list = field(repr=False, default_factory=list)
    config: dict = field(repr=False, default_factory=dict)

    @property
    def are(self) -> np.ndarray:
        return self.mse_without / self.mse_with

    @property
    def completed(self) -> int:
        return self.replications - self.failures

    @property
    def valid(self) -> bool:
        return self.failures <= INVALID_FAILURE_RATE * self.replications

    @property
    def low_replication(self) -> bool:
        return self.replications < LOW_REPLICATION

    def rows(self, **extra) -> list[dict]:
        out = []
        for j, name in enumerate(self.coord_names):
            row = dict(extra)
            row.update(
                coord=name, beta0=self.beta0[j],
                mse_with=self.mse_with[j], mse_without=self.mse_without[j], are=self.are[j],
                coverage_with=self.coverage_with[j], coverage_without=self.coverage_without[j],
                width_with=self.width_with[j], width_without=self.width_without[j],
                width_ratio=self.width_without[j] / self.width_with[j],
                replications=self.replications, failures=self.failures,
                valid=self.valid, low_replication=self.low_replication,
            )
            out.append(row)
        return out

    def to_dict(self) -> dict:
        arrays = ("beta0", "mse_with", "mse_without", "bias_with", "bias_without",
                  "coverage_with", "coverage_without", "width_with", "width_without",
                  "mean_var_with", "mean_var_without", "emp_var_with", "emp_var_without")
        d = {k: np.asarray(getattr(self, k)).tolist() for k in arrays}
        d.update(coord_names=list(self.coord_names), are=self.are.tolist(),
                 replications=self.replications, failures=self.failures,
                 valid=self.valid, low_replication=self.low_replication,
                 config=self.config)
        return d


def replication_seeds(master: int, rep: int) -> tuple[np.random.SeedSequence, int]:
    """Data stream and fold/learner seed for replication ``rep``."""
    data_ss = np.random.SeedSequence([int(master), int(rep)])
    fold_seed = int(np.random.SeedSequence([int(master), int(rep), 1]).generate_state(1)[0])
    return data_ss, fold_seed


def run_one(cfg: SimConfig, rep: int) -> dict:
    """One replication; never raises on estimator failure."""
    data_ss, fold_seed = replication_seeds(cfg.seed, rep)
    rec = {"rep": rep, "ok": False}
    try:
        data = gen_dataset(cfg.spec, cfg.n, cfg.N, data_ss)
        ecfg = cfg.estimator_config(fold_seed)
        if cfg.nuisance == "oracle":
            plan = make_folds(data, cfg.K, fold_seed)
            ns = analytic_nuisances(cfg.spec, data.pi).as_nuisance_set()
            nuisances = [ns] * cfg.K
        else:
            plan, nuisances = fit_crossfit(data, ecfg)
        model = cfg.score_model
        for tag, variant in zip(("with", "without"), cfg.variants):
            res = estimate(data, model, ecfg, variant, plan, nuisances)
            rec[f"beta_{tag}"] = res.beta.tolist()
            rec[f"var_{tag}"] = np.diag(res.covariance).tolist()
            rec[f"ci_{tag}"] = [list(c) for c in res.ci]
        rec["ok"] = True
    except (ACPError, np.linalg.LinAlgError, FloatingPointError) as exc:
        rec["error"] = f"{type(exc).__name__}: {exc}"
        log.info("replication %d failed: %s", rep, rec["error"])
    return rec


def _run_chunk(args):
    cfg, reps = args
    return [run_one(cfg, r) for r in reps]


def summarize(cfg: SimConfig, records: list[dict], beta0) -> SimSummary:
    records = sorted(records, key=lambda r: r["rep"])
    ok = [r for r in records if r["ok"]]
    beta0 = np.asarray(beta0, dtype=float)
    d = beta0.size
    stats = {}
    for tag in ("with", "without"):
        if ok:
            est = np.array([r[f"beta_{tag}"] for r in ok])
            var = np.array([r[f"var_{tag}"] for r in ok])
            ci = np.array([r[f"ci_{tag}"] for r in ok])
            err = est - beta0
            stats[tag] = dict(
                mse=np.mean(err ** 2, axis=0), bias=err.mean(axis=0),
                coverage=np.mean((ci[:, :, 0] <= beta0) & (beta0 <= ci[:, :, 1]), axis=0),
                width=np.mean(ci[:, :, 1] - ci[:, :, 0], axis=0),
                mean_var=var.mean(axis=0),
                emp_var=est.var(axis=0, ddof=1) if len(ok) > 1 else np.full(d, np.nan),
            )
        else:
            stats[tag] = {k: np.full(d, np.nan) for k in
                          ("mse", "bias", "coverage", "width", "mean_var", "emp_var")}
    return SimSummary(
        coord_names=cfg.score_model.coord_names(), beta0=beta0,
        **{f"{k}_{tag}": stats[tag][k] for tag in ("with", "without")
           for k in ("mse", "bias", "coverage", "width", "mean_var", "emp_var")},
        replications=len(records), failures=len(records) - len(ok),
        records=records, config=cfg.to_dict(),
    )


def true_parameter(cfg: SimConfig, mc_seed: int = 0):
    value, _ = cached_true_param(cfg.spec, cfg.score_model, cfg.mc_n, mc_seed, cfg.target)
    return value


def run_replications(cfg: SimConfig, beta0=None) -> SimSummary:
    """Run ``cfg.replications`` paired replications and summarize them.

    ``beta0`` defaults to the cached Monte Carlo truth for ``cfg``.
    """
    if beta0 is None:
        beta0 = true_parameter(cfg)
    reps = list(range(cfg.replications))
    if cfg.n_jobs > 1:
        chunks = [(cfg, reps[i::cfg.n_jobs]) for i in range(cfg.n_jobs)]
        with ProcessPoolExecutor(cfg.n_jobs) as pool:
            records = [rec for part in pool.map(_run_chunk, chunks) for rec in part]
    else:
        records = _run_chunk((cfg, reps))
    summary = summarize(cfg, records, beta0)
    if not summary.valid:
        log.warning("%d of %d replications failed", summary.failures, summary.replications)
    return summary


# --------------------------------------------------------------------------
# grids


@dataclass(frozen=True)
class GridPoint:
    panel: str = "all"
    n: int = 300
    N: int = 300
    alpha_signal: float = 5.0
    zeta: float = 0.0
    family: str = "linear"
    model: str = "mean"

    def config(self, base: SimConfig) -> SimConfig:
        spec = replace(base.spec, alpha_signal=self.alpha_signal, zeta=self.zeta,
                       family=self.family)
        return replace(base, spec=spec, n=self.n, N=self.N, model=self.model)


SWEEP_FIELDS = ["panel", "n", "N", "alpha_signal", "zeta", "family", "model", "coord",
                "beta0", "mse_with", "mse_without", "are", "coverage_with",
                "coverage_without", "width_with", "width_without", "width_ratio",
                "replications", "failures", "valid", "low_replication", "error"]


def sweep(points, base: SimConfig, out_csv: str | Path | None = None):
    """Run every grid point; returns ``(rows, summaries)``.

    A grid point that cannot be run contributes one annotated row instead of
    aborting the sweep.
    """
    rows, summaries = [], []
    for gp in points:
        keys = dataclasses.asdict(gp)
        try:
            summary = run_replications(gp.config(base))
        except ACPError as exc:
            rows.append({**keys, "error": f"{type(exc).__name__}: {exc}", "valid": False})
            summaries.append(None)
            continue
        summaries.append(summary)
        rows.extend(summary.rows(**keys, error=""))
    if out_csv is not None:
        write_rows(rows, out_csv)
    return rows, summaries


def write_rows(rows, path: str | Path, fields=SWEEP_FIELDS) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        wr = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore")
        wr.writeheader()
        for row in rows:
            wr.writerow({k: _fmt(row.get(k, "")) for k in fields})


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    return v


def dump_records(summary: SimSummary, path: str | Path) -> None:
    """Per-replication audit file (JSON lines)."""
    with Path(path).open("w", encoding="utf-8") as fh:
        for rec in summary.records:
            fh.write(json.dumps(rec) + "\n")
