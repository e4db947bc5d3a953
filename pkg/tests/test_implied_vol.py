import math

import numpy as np
import pytest
from scipy.stats import norm

from volterra_deviations.errors import DegenerateCoefficients, InvalidModel, PriceOutOfBounds
from volterra_deviations.implied_vol import (
    bs_call,
    implied_vol,
    mc_smile,
    smile_ldp,
    smile_mdp,
    smile_tail,
)
from volterra_deviations.sve_sim import RoughBergomi, RoughHeston, RoughSteinStein

H = 0.1


class TestBsCall:
    def test_atm_zero_vol(self):
        assert bs_call(1.0, 0.0, 0.0) == 0.0

    def test_atm_normal_cdf_oracle(self):
        want = 2.0 * norm.cdf(0.1) - 1.0
        assert bs_call(1.0, 0.0, 0.2) == pytest.approx(want, rel=1e-12)
        assert want == pytest.approx(0.07966, abs=1e-5)

    def test_deep_itm_intrinsic(self):
        assert bs_call(1.0, -10.0, 0.05) == pytest.approx(1.0 - math.exp(-10.0), abs=1e-10)

    def test_increasing_in_sigma(self):
        sigmas = np.linspace(0.05, 1.0, 12)
        vals = [bs_call(0.7, 0.1, s) for s in sigmas]
        assert all(vals[i] < vals[i + 1] for i in range(len(vals) - 1))

    def test_convex_in_strike(self):
        ks = np.linspace(-0.5, 0.5, 21)
        strikes = np.exp(ks)
        prices = np.array([bs_call(0.5, k, 0.3) for k in ks])
        # convexity in the strike (not in log-moneyness)
        second = np.diff(np.diff(prices) / np.diff(strikes)) / np.diff(strikes[:-1])
        assert np.all(second > -1e-9)


class TestImpliedVol:
    def test_round_trip_lattice(self):
        for t in (0.05, 0.5, 2.0):
            for k in (-0.1, 0.0, 0.2):
                for sigma in (0.15, 0.3, 0.8):
                    price = bs_call(t, k, sigma)
                    back = implied_vol(price, t, k)
                    assert bs_call(t, k, back) == pytest.approx(price, abs=1e-8)
                    assert back == pytest.approx(sigma, abs=1e-6)

    def test_example_inverse(self):
        assert implied_vol(2.0 * norm.cdf(0.1) - 1.0, 1.0, 0.0) == pytest.approx(0.2, abs=1e-8)

    def test_intrinsic_rejected(self):
        with pytest.raises(PriceOutOfBounds):
            implied_vol(max(1.0 - math.exp(-0.2), 0.0), 1.0, -0.2)
        with pytest.raises(PriceOutOfBounds):
            implied_vol(1.0, 1.0, 0.0)


class TestSmileLdp:
    def test_flat_bs_sanity(self):
        # degenerate Stein-Stein: xi = 0 freezes the volatility at y0
        for hurst in (H, 0.5):
            mod = RoughSteinStein(
                kappa=1.0, theta=0.2, xi=0.0, rho=0.0, y0=0.2, hurst=hurst
            )
            pt = smile_ldp(mod, 0.1, 0.01, n_steps=128)
            assert pt.sigma_hat == pytest.approx(0.2, abs=1e-6)

    def test_symmetric_for_uncorrelated(self):
        mod = RoughBergomi(a=0.0, rho=0.0, y0=math.log(0.04), hurst=H)
        up = smile_ldp(mod, 0.2, 0.01, n_steps=128)
        dn = smile_ldp(mod, -0.2, 0.01, n_steps=128)
        assert up.sigma_hat == pytest.approx(dn.sigma_hat, rel=5e-3)

    def test_bs_small_time_prefactor(self):
        # Gaussian tail computation: t^(2H) log P(X_t >= k t^(1/2-H)) -> -k^2/(2 sigma^2)
        sigma, k, t = 0.1, 2.0, 1e-4
        z = (k * t ** (0.5 - H) + 0.5 * sigma**2 * t) / (sigma * math.sqrt(t))
        got = t ** (2 * H) * norm.logsf(z)
        want = -(k**2) / (2.0 * sigma**2)
        assert got == pytest.approx(want, rel=0.05)


class TestSmileMdp:
    def test_rough_heston_level(self):
        mod = RoughHeston(kappa=1.0, theta=0.04, xi=0.3, rho=-0.7, y0=0.04, hurst=H)
        pt = smile_mdp(mod, 0.1, 0.01, beta=H / 2)
        assert pt.sigma_hat == pytest.approx(0.2, abs=1e-14)

    def test_strike_independent(self):
        mod = RoughHeston(kappa=1.0, theta=0.04, xi=0.3, rho=-0.7, y0=0.04, hurst=H)
        vals = {smile_mdp(mod, k, 0.01, beta=H / 2).sigma_hat for k in (0.1, 0.5, 1.0)}
        assert len(vals) == 1

    def test_consistency_with_quadratic_infimum(self):
        # inf_(x >= k) x^2/(2 Sigma0) = k^2/(2 Sigma0) -> sigma^2 = Sigma0
        from volterra_deviations.rate_functions import mdp_rate_terminal_x

        mod = RoughHeston(kappa=1.0, theta=0.04, xi=0.3, rho=-0.7, y0=0.04, hurst=H)
        k = 0.3
        rate = mdp_rate_terminal_x(mod, k)
        assert math.sqrt(k**2 / (2.0 * rate)) == pytest.approx(
            smile_mdp(mod, k, 0.01, beta=H / 2).sigma_hat
        )

    def test_beta_window_enforced(self):
        mod = RoughHeston(kappa=1.0, theta=0.04, xi=0.3, rho=-0.7, y0=0.04, hurst=H)
        with pytest.raises(DegenerateCoefficients):
            smile_mdp(mod, 0.1, 0.01, beta=0.2)


class TestSmileTail:
    def test_positive_when_rate_finite(self):
        ss = RoughSteinStein(kappa=0.5, theta=0.1, xi=0.4, rho=-0.3, y0=0.3, hurst=H)
        pt = smile_tail(ss, 1.0, 5.0, n_steps=128)
        assert pt.sigma_hat > 0.0
        assert pt.source == "asymptotic_tail"

    def test_stein_stein_regression_pin(self):
        # value pinned by the variational solver before the main build
        ss = RoughSteinStein(kappa=0.5, theta=0.1, xi=0.4, rho=-0.3, y0=0.3, hurst=H)
        pt = smile_tail(ss, 1.0, 5.0, n_steps=128)
        pt2 = smile_tail(ss, 1.0, 5.0, n_steps=128)
        assert pt.sigma_hat == pt2.sigma_hat  # deterministic
        assert pt.sigma_hat**2 * 1.0 / 5.0 == pytest.approx(
            1.0 / (2.0 * _tail_infimum_pin(ss)), rel=1e-9
        )


def _tail_infimum_pin(model):
    from volterra_deviations.rate_functions import tail_rate_terminal

    levels = np.geomspace(1.0, 8.0, 17)
    return min(tail_rate_terminal(model, float(y), 1.0, n_steps=128).value for y in levels)


class TestMcSmile:
    def test_flat_vol_recovers_constant(self):
        mod = RoughSteinStein(kappa=1.0, theta=0.2, xi=0.0, rho=0.0, y0=0.2, hurst=H)
        pts = mc_smile(mod, 0.25, [-0.05, 0.0, 0.05], 40_000, seed=11, n_steps=64)
        for pt in pts:
            assert pt.sigma_hat == pytest.approx(0.2, abs=4.0 * max(pt.stderr, 1e-4))

    def test_martingale_identity(self):
        mod = RoughBergomi(a=0.5, rho=-0.5, y0=math.log(0.04), hurst=H)
        from volterra_deviations.kernels import TimeGrid
        from volterra_deviations.sve_sim import simulate, small_time_ldp

        t_mat = 0.25
        ens = simulate(mod, small_time_ldp(t_mat), TimeGrid(1.0, 64), 50_000, seed=3)
        s = np.exp(t_mat ** (0.5 - H) * ens.component(0)[:, -1])
        se = s.std(ddof=1) / math.sqrt(len(s))
        assert abs(s.mean() - 1.0) <= 3.0 * se

    def test_positive_rho_bergomi_rejected(self):
        mod = RoughBergomi(a=0.5, rho=0.5, y0=math.log(0.04), hurst=H)
        with pytest.raises(InvalidModel):
            mc_smile(mod, 0.1, [0.0], 1000, seed=1)

    def test_deep_strike_flagged_not_crashing(self):
        mod = RoughSteinStein(kappa=1.0, theta=0.2, xi=0.0, rho=0.0, y0=0.2, hurst=H)
        pts = mc_smile(mod, 0.01, [3.0], 2000, seed=7, n_steps=32)
        assert len(pts) == 1
        assert pts[0].flag in ("clipped_to_intrinsic", "price_out_of_bounds")
