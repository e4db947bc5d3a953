"""Black-Scholes machinery and the implied-volatility asymptotics.

Conventions: spot 1, zero rates and dividends, strike exp(k).  The smile
formulas take the rescaled log-moneyness k of each regime: the physical
strike is k t^(1/2 - H) in the small-time LDP regime and k t^(1/2 - beta) in
the MDP regime, and the LDP implied volatility blows up like t^(H - 1/2) as
maturity shrinks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

from .errors import (
    DegenerateCoefficients,
    InvalidModel,
    PriceOutOfBounds,
    RateUnavailable,
    SolverFailure,
)
from .kernels import TimeGrid
from .rate_functions import ldp_rate_terminal, tail_rate_terminal
from .sve_sim import Model, RoughBergomi, simulate, small_time_ldp

__all__ = [
    "SmilePoint",
    "bs_call",
    "implied_vol",
    "smile_ldp",
    "smile_mdp",
    "smile_tail",
    "mc_smile",
]

_INF_GRID_POINTS = 17
_INF_GRID_SPAN = 8.0


@dataclass
class SmilePoint:
    maturity: float
    log_moneyness: float
    sigma_hat: float
    source: str
    stderr: float | None = None
    flag: str | None = None


def bs_call(t: float, k: float, sigma: float) -> float:
    """European call value under Black-Scholes (spot 1, strike e^k)."""
    if sigma < 0.0 or t <= 0.0:
        raise PriceOutOfBounds("need sigma >= 0 and t > 0")
    if sigma == 0.0:
        return max(1.0 - math.exp(k), 0.0)
    st = sigma * math.sqrt(t)
    d1 = (-k + 0.5 * st * st) / st
    d2 = d1 - st
    return float(norm.cdf(d1) - math.exp(k) * norm.cdf(d2))


def _vega(t: float, k: float, sigma: float) -> float:
    st = sigma * math.sqrt(t)
    d1 = (-k + 0.5 * st * st) / st
    return float(norm.pdf(d1) * math.sqrt(t))


def implied_vol(price: float, t: float, k: float) -> float:
    """Unique nonnegative Black-Scholes volatility matching ``price``.

    Bisection bracket followed by Newton polish, to 1e-10 in price.
    """
    intrinsic = max(1.0 - math.exp(k), 0.0)
    if not intrinsic < price < 1.0:
        raise PriceOutOfBounds(
            f"price {price} outside ({intrinsic}, 1) for k={k}, t={t}"
        )
    lo, hi = 1e-12, 1.0
    while bs_call(t, k, hi) < price:
        hi *= 2.0
        if hi > 1e6:
            raise PriceOutOfBounds("no volatility matches the price")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if bs_call(t, k, mid) < price:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-6:
            break
    sigma = 0.5 * (lo + hi)
    for _ in range(50):
        diff = bs_call(t, k, sigma) - price
        if abs(diff) <= 1e-10:
            return sigma
        vega = _vega(t, k, sigma)
        if vega <= 1e-300:
            break
        step = diff / vega
        sigma = min(max(sigma - step, lo), hi)
    # fall back to tight bisection if Newton stalled near zero vega
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if bs_call(t, k, mid) < price:
            lo = mid
        else:
            hi = mid
        if bs_call(t, k, 0.5 * (lo + hi)) - price <= 1e-10 and 0.5 * (lo + hi) > 0:
            break
    return 0.5 * (lo + hi)


def _inf_rate_over_ray(model: Model, k: float, n_steps: int) -> float:
    """Running minimum of the terminal LDP rate on a geometric grid [k, 8k].

    Convexity in the control makes the rate nondecreasing beyond the mean for
    rho = 0; for rho != 0 the grid argmin is reported as is.
    """
    sign = 1.0 if k > 0 else -1.0
    levels = sign * np.geomspace(abs(k), _INF_GRID_SPAN * abs(k), _INF_GRID_POINTS)
    best = np.inf
    for x in levels:
        try:
            res = ldp_rate_terminal(model, float(x), component="x", n_steps=n_steps)
        except SolverFailure as exc:
            raise RateUnavailable(str(exc)) from exc
        best = min(best, res.value)
    return best


def smile_ldp(model: Model, k: float, t: float, n_steps: int = 256) -> SmilePoint:
    """Small-time LDP implied volatility at rescaled log-moneyness k != 0.

    sigma_hat^2 = k^2 / (2 inf_(x >= k) I^X_1(x)) for k > 0 (mirrored for
    k < 0); the physical strike is k t^(1/2 - H).
    """
    if k == 0.0:
        raise RateUnavailable("LDP smile formula needs k != 0")
    rate = _inf_rate_over_ray(model, k, n_steps)
    if rate <= 0.0:
        raise RateUnavailable("terminal rate vanished; limit formula degenerate")
    sig = math.sqrt(k * k / (2.0 * rate))
    return SmilePoint(maturity=t, log_moneyness=k, sigma_hat=sig, source="asymptotic_ldp")


def smile_mdp(model: Model, k: float, t: float, beta: float) -> SmilePoint:
    """MDP implied volatility: sigma_hat^2 = Sigma(y0), strike independent."""
    from .rate_functions import _coeffs

    if not 0.0 < beta < model.min_hurst:
        raise DegenerateCoefficients("beta must lie in (0, H)")
    if k == 0.0:
        raise DegenerateCoefficients("MDP smile formula needs k != 0")
    sigma_sq, _, _ = _coeffs(model)
    sig0 = float(sigma_sq(np.asarray(model.y0)))
    if sig0 <= 0.0:
        raise DegenerateCoefficients("Sigma(y0) must be positive")
    return SmilePoint(
        maturity=t, log_moneyness=k, sigma_hat=math.sqrt(sig0), source="asymptotic_mdp"
    )


def smile_tail(model: Model, t: float, k: float, n_steps: int = 192) -> SmilePoint:
    """Large-strike implied volatility: sigma_hat^2 ~ k / (2 t inf_(y>=1) I^X_t(y))."""
    levels = np.geomspace(1.0, _INF_GRID_SPAN, _INF_GRID_POINTS)
    best = np.inf
    for y in levels:
        try:
            res = tail_rate_terminal(model, float(y), t_end=t, n_steps=n_steps)
        except SolverFailure as exc:
            raise RateUnavailable(str(exc)) from exc
        best = min(best, res.value)
    if not math.isfinite(best) or best <= 0.0:
        raise RateUnavailable("tail rate infimum unavailable")
    sig = math.sqrt(k / (2.0 * t * best))
    return SmilePoint(maturity=t, log_moneyness=k, sigma_hat=sig, source="asymptotic_tail")


def mc_smile(
    model: Model,
    t: float,
    strikes,
    n_paths: int,
    seed: int,
    n_steps: int = 192,
    threads: int | None = None,
) -> list[SmilePoint]:
    """Monte Carlo implied-volatility points at physical log-moneyness values.

    Simulates the small-time rescaled system at eps = t and maps back to the
    physical log price X_t = t^(1/2 - H) X^eps_1; requires exp(X) to be a
    martingale (rho <= 0 for rough Bergomi).
    """
    if isinstance(model, RoughBergomi) and model.rho > 0.0:
        raise InvalidModel("exp(X) is a martingale for rough Bergomi only when rho <= 0")
    from .sve_sim import MultiRoughBergomi

    if isinstance(model, MultiRoughBergomi):
        raise InvalidModel("exp(X) is not a martingale under the multifactor price form")
    grid = TimeGrid(1.0, n_steps)
    ens = simulate(model, small_time_ldp(t), grid, n_paths, seed, threads=threads)
    x_phys = t ** (0.5 - model.min_hurst) * ens.component(0)[:, -1]
    s_terminal = np.exp(x_phys)
    out = []
    for k in strikes:
        payoff = np.maximum(s_terminal - math.exp(k), 0.0)
        price = float(payoff.mean())
        se_price = float(payoff.std(ddof=1) / math.sqrt(n_paths))
        intrinsic = max(1.0 - math.exp(k), 0.0)
        flag = None
        if price <= intrinsic:
            price = intrinsic + 1e-12
            flag = "clipped_to_intrinsic"
        try:
            sig = implied_vol(price, t, k)
        except PriceOutOfBounds:
            out.append(
                SmilePoint(t, k, float("nan"), "monte_carlo", stderr=None, flag="price_out_of_bounds")
            )
            continue
        vega = _vega(t, k, sig)
        se_sig = se_price / vega if vega > 1e-300 else float("inf")
        out.append(SmilePoint(t, k, sig, "monte_carlo", stderr=se_sig, flag=flag))
    return out
