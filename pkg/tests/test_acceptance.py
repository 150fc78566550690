"""End-to-end acceptance checks.

Every check prints one PASS/FAIL line (collected again in the terminal
summary). Replication studies use master seed 0 and are shared between
checks through an in-process cache.
"""

import functools
import time
from dataclasses import replace

import numpy as np
import pytest
from scipy.stats import norm

from acpshift import (
    DgpSpec,
    EstimatorConfig,
    NuisanceSet,
    Observation,
    ScoreModel,
    Variant,
    confidence_interval,
    eif_with_acp,
    eif_without_acp,
    estimate,
    gen_dataset,
    make_folds,
    solve_beta,
)
from acpshift.data import Dataset, FoldPlan
from acpshift.nuisance import propensity_to_density_ratio
from acpshift.oracle import analytic_nuisances, cached_bounds, cached_true_param
from acpshift.simulation import SimConfig, replication_seeds, run_replications

MASTER_SEED = 0
REPS = 500
MC_N = 1_000_000

pytestmark = pytest.mark.slow


@functools.lru_cache(maxsize=None)
def sim(n=300, N=300, alpha_signal=5.0, zeta=0.0, family="linear", model="mean",
        reps=REPS, target="beta", eta=None):
    spec = DgpSpec(alpha_signal=alpha_signal, zeta=zeta, family=family)
    if eta is not None:
        spec = replace(spec, eta=eta)
    cfg = SimConfig(spec=spec, n=n, N=N, model=model, replications=reps, seed=MASTER_SEED,
                    fast_mode=True, target=target, mc_n=MC_N)
    t0 = time.perf_counter()
    summary = run_replications(cfg)
    return summary, time.perf_counter() - t0


def _coord(summary, name):
    return summary.coord_names.index(name)


def test_criterion_01_no_information_null(report_criterion):
    s, secs = sim(alpha_signal=0.0)
    are = float(s.are[0])
    ok = 0.85 <= are <= 1.15 and secs < 600 and s.valid
    report_criterion(1, ok, f"alpha=0 zeta=0 mean ARE={are:.3f} in [0.85, 1.15], "
                            f"{s.completed}/{s.replications} reps in {secs:.0f}s")
    assert ok


def test_criterion_02_redundant_acp_null(report_criterion):
    s, _ = sim(zeta=1.0)
    are = float(s.are[0])
    ok = 0.85 <= are <= 1.15 and s.valid
    report_criterion(2, ok, f"alpha=5 zeta=1 mean ARE={are:.3f} in [0.85, 1.15]")
    assert ok


def test_criterion_03_headline_gain(report_criterion):
    s, _ = sim()
    sl, _ = sim(model="linear")
    are_mean = float(s.are[0])
    are_x1 = float(sl.are[_coord(sl, "x1")])
    ok = 6 <= are_mean <= 16 and 5 <= are_x1 <= 14 and s.valid and sl.valid
    report_criterion(3, ok, f"mean ARE={are_mean:.2f} in [6, 16]; "
                            f"linear x1 ARE={are_x1:.2f} in [5, 14]")
    assert ok


def test_criterion_04_unlabeled_size_trend(report_criterion):
    small, _ = sim(N=300)
    large, _ = sim(N=1500)
    factor = float(small.mse_without[0] / large.mse_without[0])
    w_small, w_large = float(small.mse_with[0]), float(large.mse_with[0])
    ok = (2.5 <= factor <= 6 and 0.03 <= w_small <= 0.12 and 0.03 <= w_large <= 0.12)
    report_criterion(4, ok, f"without-ACP MSE {small.mse_without[0]:.3f} -> "
                            f"{large.mse_without[0]:.3f} (factor {factor:.2f} in [2.5, 6]); "
                            f"with-ACP MSE {w_small:.3f}, {w_large:.3f} in [0.03, 0.12]")
    assert ok


def test_criterion_05_monotone_in_signal(report_criterion):
    ares = [float(sim(alpha_signal=float(a))[0].are[0]) for a in range(6)]
    ok = all(b >= 0.85 * a for a, b in zip(ares, ares[1:]))
    report_criterion(5, ok, "ARE by alpha=0..5: " + ", ".join(f"{a:.2f}" for a in ares)
                     + " (nondecreasing up to 15%)")
    assert ok


def test_criterion_06_logistic_gain(report_criterion):
    s, _ = sim(family="logistic", model="logistic")
    j = _coord(s, "x1")
    ratio = float(s.are[j])
    ok = 1.4 <= ratio <= 3.0 and s.valid
    report_criterion(6, ok, f"logistic x1 MSE {s.mse_without[j]:.3f}/{s.mse_with[j]:.3f} "
                            f"= {ratio:.2f} in [1.4, 3.0]")
    assert ok


def test_criterion_07_coverage(report_criterion):
    s, _ = sim(n=900, N=900)
    cw, cwo = float(s.coverage_with[0]), float(s.coverage_without[0])
    ok = (0.92 <= cw <= 0.975 and 0.92 <= cwo <= 0.975
          and s.width_with[0] <= s.width_without[0])
    report_criterion(7, ok, f"n=N=900 coverage with={cw:.3f} without={cwo:.3f} in "
                            f"[0.92, 0.975]; width {s.width_with[0]:.3f} <= "
                            f"{s.width_without[0]:.3f}")
    assert ok


def test_criterion_08_oracle_consistency(report_criterion):
    t0 = time.perf_counter()
    bad = []
    for a in (0.0, 5.0):
        for z in (0.0, 0.6, 1.0):
            spec = DgpSpec(alpha_signal=a, zeta=z)
            for model in (ScoreModel.mean(), ScoreModel.linear(5)):
                ob, _, _ = cached_bounds(spec, model, MC_N, MASTER_SEED)
                if not (ob.consistent(4.0) and ob.gain_psd(4.0)
                        and np.allclose(ob.gain, ob.gain.T)):
                    bad.append((a, z, model.kind.value))
    secs = time.perf_counter() - t0
    ok = not bad and secs < 300
    report_criterion(8, ok, f"12 oracle grid cells, two routes agree within 4 MC SE and "
                            f"gain PSD; failures={bad}; {secs:.0f}s")
    assert ok


def test_criterion_09_double_robustness(report_criterion):
    spec = DgpSpec(alpha_signal=5.0, zeta=0.0)
    model = ScoreModel.mean()
    ob, _, _ = cached_bounds(spec, model, MC_N, MASTER_SEED)
    data_seed, fold_seed = replication_seeds(MASTER_SEED, 0)
    data = gen_dataset(spec, 4000, 4000, data_seed)
    se = float(np.sqrt(ob.bound_w[0, 0] / data.M))
    nu = analytic_nuisances(spec, data.pi)
    plan = make_folds(data, 5, fold_seed)

    def zero(x, *_):
        return np.zeros(len(x))

    def one(x):
        return np.ones(len(x))

    sets = {
        "right w, wrong m": NuisanceSet.from_propensity(nu.propensity, data.pi, zero, zero,
                                                        eps=0.01),
        "wrong w, right m": NuisanceSet(one, nu.mu, nu.mu_tilde, data.pi),
        "both wrong": NuisanceSet(one, zero, zero, data.pi),
    }
    z = {}
    for name, ns in sets.items():
        res = estimate(data, model, EstimatorConfig(K=5, seed=fold_seed), Variant.WITH_ACP,
                       plan, [ns] * 5)
        z[name] = abs(float(res.beta[0] - ob.beta0[0])) / se
    ok = z["right w, wrong m"] < 5 and z["wrong w, right m"] < 5 and z["both wrong"] > 10
    report_criterion(9, ok, "|error|/oracle SE: " + ", ".join(f"{k}={v:.2f}" for k, v in z.items())
                     + " (first two < 5, last > 10)")
    assert ok


def test_criterion_10_formula_values(report_criterion):
    mean = ScoreModel.mean()
    ns = NuisanceSet(lambda x: np.full(len(x), 2.0), lambda x: np.full(len(x), 0.5),
                     lambda x, yh: np.full(len(x), 1.0), 0.5)
    got = [
        float(eif_with_acp(Observation(1, (0.0,), 3.0, 0.0), ns, [0.0], 0.5, mean)[0]),
        float(eif_with_acp(Observation(0, (0.0,), None, 0.0), ns, [0.0], 0.5, mean)[0]),
        float(eif_without_acp(Observation(1, (0.0,), 3.0), ns, [0.0], 0.5, mean)[0]),
        float(eif_without_acp(Observation(0, (0.0,), None), ns, [0.0], 0.5, mean)[0]),
    ]
    want = [26 / 3, 5 / 3, 10.0, 1.0]

    # two labeled (y=2, 0) and two unlabeled units; nuisances keyed on the unit id
    data = Dataset.from_arrays([1, 1, 0, 0], [[0.0], [1.0], [2.0], [3.0]],
                               [2.0, 0.0, np.nan, np.nan], [0.0, 0.0, 0.0, 0.0])
    mu_tab, mt_tab = np.array([1.0, 0.0, 2.0, 2.0]), np.array([1.0, 0.0, 1.0, 2.0])
    ns4 = NuisanceSet(lambda x: np.ones(len(x)),
                      lambda x: mu_tab[np.asarray(x)[:, 0].astype(int)],
                      lambda x, yh: mt_tab[np.asarray(x)[:, 0].astype(int)], 0.5)
    plan = FoldPlan(2, np.array([0, 1, 0, 1]), 0)
    beta4 = float(solve_beta(data, plan, [ns4, ns4], mean)[0])

    xs = np.random.default_rng(MASTER_SEED).standard_normal((1000, 3))
    pi_hat = lambda x: 0.05 + 0.9 / (1 + np.exp(-x @ np.array([1.0, -0.5, 0.2])))
    w = propensity_to_density_ratio(pi_hat, 0.3)(xs)
    lhs = (1 - pi_hat(xs)) / (1 - 0.3)
    rhs = w / (0.3 + 0.7 * w)
    ident = float(np.max(np.abs(lhs / rhs - 1)))

    class _R:
        beta, sandwich, M = np.array([0.0]), np.array([[1.0]]), 1

    lo, hi = confidence_interval(_R, [1.0], 0.05)
    mult = (hi - lo) / 2

    errs = [abs(g - w_) for g, w_ in zip(got, want)] + [abs(beta4 - 2.25),
                                                      abs(mult - 1.959963984540054)]
    ok = max(errs) < 1e-9 and ident < 1e-12
    report_criterion(10, ok, f"EIF {[round(g, 4) for g in got]}, 4-unit beta={beta4:.4f}, "
                             f"CI multiplier {mult:.6f}, w identity rel err {ident:.1e}")
    assert ok
    assert norm.ppf(0.975) == pytest.approx(1.959964, abs=1e-6)


def test_criterion_11_theta_sanity(report_criterion):
    no_shift = (0.0,) * 5
    s, _ = sim(target="theta", eta=no_shift, reps=200)
    theta0 = float(s.beta0[0])
    est = np.array([r["beta_with"][0] for r in s.records if r["ok"]])
    mc_se = est.std(ddof=1) / np.sqrt(est.size)
    gap = abs(est.mean() - theta0)

    ob, _, _ = cached_bounds(DgpSpec(alpha_signal=5.0, zeta=1.0), ScoreModel.mean(), MC_N,
                             MASTER_SEED, target="theta")
    gain_ok = bool(np.all(np.abs(ob.gain) <= 4 * ob.gain_se + 1e-12))
    ok = gap <= 3 * mc_se and gain_ok
    report_criterion(11, ok, f"no-shift theta mean {est.mean():.4f} vs pooled oracle "
                             f"{theta0:.4f} (|gap| {gap:.4f} <= 3 MC SE {3 * mc_se:.4f}); "
                             f"zeta=1 theta gain max |entry| {np.abs(ob.gain).max():.2e}")
    assert ok
