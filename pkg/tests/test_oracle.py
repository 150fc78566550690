from dataclasses import replace

import numpy as np
import pytest

from acpshift import DgpSpec, ScoreModel
from acpshift.exceptions import InvalidSpec
from acpshift.oracle import (
    analytic_nuisances,
    cached_bounds,
    cached_true_param,
    draw_xz,
    marginal_label_rate,
    oracle_bounds,
    oracle_bounds_theta,
    true_beta,
)

MEAN = ScoreModel.mean()
MC = 200_000


class TestSpec:
    @pytest.mark.parametrize("kw", [{"family": "probit"}, {"zeta": 1.5}, {"zeta": -0.1},
                                    {"xi": (1.0, 2.0)}])
    def test_invalid(self, kw):
        with pytest.raises(InvalidSpec):
            DgpSpec(**kw)

    def test_covariance(self):
        S = DgpSpec(zeta=0.6).covariance
        assert S[0, 5] == S[5, 0] == 0.6
        assert np.all(np.linalg.eigvalsh(S) > 0)

    def test_draw_correlation(self):
        x, z = draw_xz(DgpSpec(zeta=0.6), 200_000, np.random.default_rng(0))
        assert np.corrcoef(x[:, 0], z)[0, 1] == pytest.approx(0.6, abs=0.01)
        x, z = draw_xz(DgpSpec(zeta=1.0), 10, np.random.default_rng(0))
        np.testing.assert_array_equal(x[:, 0], z)


class TestAnalytic:
    def test_origin(self):
        nu = analytic_nuisances(DgpSpec())
        x0 = np.zeros((1, 5))
        assert nu.marginal_pi == pytest.approx(0.5, abs=1e-12)
        assert nu.propensity(x0)[0] == pytest.approx(0.5)
        assert nu.density_ratio(x0)[0] == pytest.approx(1.0)
        assert nu.mu(x0)[0] == pytest.approx(1.0)
        assert nu.mu_tilde(x0, [2.0])[0] == pytest.approx(11.0)

    def test_label_fraction_shift(self):
        nu = analytic_nuisances(DgpSpec(), label_fraction=0.2)
        x = np.random.default_rng(1).normal(size=(50, 5))
        base = analytic_nuisances(DgpSpec())
        np.testing.assert_allclose(nu.density_ratio(x), base.density_ratio(x))
        assert nu.propensity(np.zeros((1, 5)))[0] == pytest.approx(0.2)

    def test_marginal_rate_asymmetric(self):
        # symmetric eta'X gives 1/2 regardless of scale
        assert marginal_label_rate(DgpSpec(eta=(3.0, 0, 0, 0, 0))) == pytest.approx(0.5)
        assert marginal_label_rate(DgpSpec(eta=(0.0,) * 5)) == 0.5

    def test_logistic_mu_integrates_mu_tilde(self):
        spec = DgpSpec(family="logistic", alpha_signal=2.0, zeta=0.3)
        nu = analytic_nuisances(spec)
        rng = np.random.default_rng(2)
        x = np.tile(rng.normal(size=(1, 5)), (400_000, 1))
        z = 0.3 * x[:, 0] + np.sqrt(1 - 0.09) * rng.normal(size=x.shape[0])
        assert nu.mu(x[:1])[0] == pytest.approx(nu.mu_tilde(x, z).mean(), abs=2e-3)


class TestTrueParameter:
    def test_linear_no_signal_recovers_coefficients(self):
        beta, se = true_beta(DgpSpec(alpha_signal=0.0), ScoreModel.linear(5), MC, 0)
        np.testing.assert_allclose(beta, np.r_[1.0, 1.0, 0.5, 0.5, 0.5, 0.5], atol=6 * se.max() + 0.01)

    def test_logistic_differs_from_index_coefficients(self):
        beta, _ = true_beta(DgpSpec(family="logistic", zeta=0.3), ScoreModel.logistic(5), MC, 0)
        assert np.abs(beta[1:] - np.array([1.0, 0.5, 0.5, 0.5, 0.5])).max() > 0.1

    def test_cached_value_stable(self, tmp_path):
        a = cached_true_param(DgpSpec(), MEAN, 50_000, 0, directory=tmp_path)
        b = cached_true_param(DgpSpec(), MEAN, 50_000, 0, directory=tmp_path)
        np.testing.assert_array_equal(a[0], b[0])


class TestBounds:
    @pytest.mark.parametrize("spec", [DgpSpec(zeta=1.0), DgpSpec(alpha_signal=0.0)])
    def test_no_gain(self, spec):
        ob = oracle_bounds(spec, MEAN, MC, 0)
        np.testing.assert_allclose(ob.gain, 0.0, atol=1e-12)
        np.testing.assert_allclose(ob.bound_w, ob.bound_wo, rtol=1e-10)

    def test_constant_propensity_gain(self):
        # with no shift, w = 1 and pi0 = 1/2: gain = E[(alpha z)^2] = 25
        spec = DgpSpec(eta=(0.0,) * 5)
        ob = oracle_bounds(spec, MEAN, MC, 0)
        assert ob.gain[0, 0] == pytest.approx(25.0, abs=5 * ob.gain_se[0, 0])
        th = oracle_bounds_theta(spec, MEAN, MC, 0)
        assert th.gain[0, 0] == pytest.approx(25.0, abs=5 * th.gain_se[0, 0])

    def test_two_routes_agree_and_psd(self):
        for z in (0.0, 0.6):
            ob = oracle_bounds(DgpSpec(zeta=z), ScoreModel.linear(5), MC, 1)
            assert ob.consistent()
            assert ob.gain_psd()
            np.testing.assert_allclose(ob.gain, ob.gain.T)

    def test_gain_grows_with_signal(self):
        tr = [np.trace(oracle_bounds(DgpSpec(alpha_signal=a), MEAN, MC, 0).gain)
              for a in (0.0, 1.0, 3.0, 5.0)]
        assert all(b > a for a, b in zip(tr, tr[1:]))

    def test_mean_omega(self):
        ob = oracle_bounds(DgpSpec(), MEAN, 20_000, 0)
        np.testing.assert_allclose(ob.omega, [[-1.0]])

    def test_cache_roundtrip(self, tmp_path):
        spec = replace(DgpSpec(), zeta=0.3)
        ob1, path, hit1 = cached_bounds(spec, MEAN, 20_000, 4, directory=tmp_path)
        ob2, path2, hit2 = cached_bounds(spec, MEAN, 20_000, 4, directory=tmp_path)
        assert (hit1, hit2) == (False, True) and path == path2
        np.testing.assert_array_equal(ob1.bound_w, ob2.bound_w)
        _, other, hit3 = cached_bounds(spec, MEAN, 20_000, 5, directory=tmp_path)
        assert not hit3 and other != path
