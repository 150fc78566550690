import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from acpshift import DgpSpec, Scenario, gen_dataset
from acpshift.exceptions import InvalidSpec
from acpshift.simulation import (
    GridPoint,
    SimConfig,
    replication_seeds,
    run_one,
    run_replications,
    summarize,
    sweep,
)


class TestGenDataset:
    @settings(max_examples=20, deadline=None)
    @given(n=st.integers(1, 120), N=st.integers(1, 120), seed=st.integers(0, 10**6))
    def test_quota_counts(self, n, N, seed):
        d = gen_dataset(DgpSpec(), n, N, seed)
        assert (d.n, d.N) == (n, N)
        assert d.scenario is Scenario.II
        assert np.all(np.isnan(d.y[d.r == 0])) and not np.any(np.isnan(d.y[d.r == 1]))

    @pytest.mark.parametrize("zeta", [0.0, 0.6])
    def test_acp_correlation(self, zeta):
        d = gen_dataset(DgpSpec(zeta=zeta), 20000, 20000, 1)
        assert np.corrcoef(d.x[:, 0], d.yhat)[0, 1] == pytest.approx(zeta, abs=0.02)

    def test_shift_direction(self):
        d = gen_dataset(DgpSpec(), 5000, 5000, 2)
        lab = d.r == 1
        # labeling favours large eta'x
        assert d.x[lab].sum(axis=1).mean() > 1.0 > -1.0 > d.x[~lab].sum(axis=1).mean()

    def test_truth_matches(self):
        d, y, z = gen_dataset(DgpSpec(), 30, 30, 3, return_truth=True)
        lab = d.r == 1
        np.testing.assert_array_equal(d.y[lab], y[lab])
        np.testing.assert_array_equal(d.yhat, z)

    def test_logistic_outcomes_binary(self):
        d = gen_dataset(DgpSpec(family="logistic"), 200, 50, 4)
        assert set(np.unique(d.y[d.r == 1])) <= {0.0, 1.0}

    def test_seed_determinism(self):
        a = gen_dataset(DgpSpec(), 40, 40, 9)
        b = gen_dataset(DgpSpec(), 40, 40, 9)
        np.testing.assert_array_equal(a.x, b.x)


class TestSimConfig:
    @pytest.mark.parametrize("kw", [{"n": 49}, {"N": 10}, {"replications": 1},
                                    {"target": "gamma"}, {"nuisance": "magic"},
                                    {"model": "probit"}])
    def test_invalid(self, kw):
        with pytest.raises((InvalidSpec, ValueError)):
            SimConfig(**kw)

    def test_seeds_distinct(self):
        s = {replication_seeds(0, r)[1] for r in range(100)}
        assert len(s) == 100
        assert replication_seeds(0, 3)[1] == replication_seeds(0, 3)[1]


SMALL = SimConfig(n=80, N=80, replications=2, K=2, mc_n=20_000)


class TestReplications:
    def test_deterministic(self):
        a = run_replications(SMALL)
        b = run_replications(SMALL)
        assert a.to_dict() == b.to_dict()
        assert a.completed == 2 and a.valid and a.low_replication

    def test_order_independent(self):
        recs = [run_one(SMALL, r) for r in (1, 0)]
        again = [run_one(SMALL, 0)]
        assert recs[1] == again[0]
        s1 = summarize(SMALL, recs, [0.0])
        s2 = summarize(SMALL, recs[::-1], [0.0])
        assert s1.to_dict() == s2.to_dict()

    def test_summary_arithmetic(self):
        recs = [{"rep": 0, "ok": True, "beta_with": [1.0], "beta_without": [2.0],
                 "var_with": [0.1], "var_without": [0.2],
                 "ci_with": [[0.5, 1.5]], "ci_without": [[-1.0, 1.0]]},
                {"rep": 1, "ok": True, "beta_with": [-1.0], "beta_without": [0.0],
                 "var_with": [0.3], "var_without": [0.4],
                 "ci_with": [[-1.5, -0.5]], "ci_without": [[-1.0, 1.0]]},
                {"rep": 2, "ok": False}]
        s = summarize(SMALL, recs, [0.0])
        assert s.mse_with[0] == 1.0 and s.mse_without[0] == 2.0 and s.are[0] == 2.0
        assert s.coverage_with[0] == 0.0 and s.coverage_without[0] == 1.0
        assert s.width_with[0] == 1.0 and s.failures == 1 and not s.valid

    def test_oracle_nuisance_variance_ratio(self):
        cfg = SimConfig(n=900, N=900, replications=60, K=2, nuisance="oracle", mc_n=200_000)
        s = run_replications(cfg)
        assert 0.6 <= s.emp_var_with[0] / s.mean_var_with[0] <= 1.6


def test_sweep_writes_rows(tmp_path):
    out = tmp_path / "sweep.csv"
    rows, sums = sweep([GridPoint(panel="alpha", n=80, N=80, alpha_signal=0.0)], SMALL, out)
    assert len(rows) == 1 == len(sums)
    with open(out, newline="") as fh:
        got = list(csv.DictReader(fh))
    assert got[0]["panel"] == "alpha" and float(got[0]["alpha_signal"]) == 0.0
