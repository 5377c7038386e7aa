"""Closed-form constants and bounds for dispatching to n FCFS servers.

All quantities use the convention that each server works at rate 1/n, so a
job of size s spends n*s in service and the system is stable for any load
rho = lam*E[S] < 1.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

from .distributions import JobSizeModel, require_continuous, solve_size_threshold
from .policies import card_params_from_alpha_beta, card_threshold_c


class BoundsError(ValueError):
    pass


def _epsilon(lam: float, model: JobSizeModel) -> float:
    eps = 1.0 - lam * model.mean
    if not eps > 0:
        raise BoundsError(f"load lam*E[S] = {1 - eps:.6g} must be below 1")
    return eps


def ideal_cutoff(n: int, model: JobSizeModel) -> float:
    """Size ``m`` with ``E[S 1(S < m)] = (1 - 1/n) E[S]``."""
    return solve_size_threshold(model, 1.0 - 1.0 / n)


def k_card(n: int, model: JobSizeModel) -> float:
    """Optimal heavy-traffic constant ``n P{S >= m}``."""
    require_continuous(model)
    return n * model.sf(ideal_cutoff(n, model))


def k_lwl() -> float:
    return 1.0


def mg1_mean_work(lam: float, model: JobSizeModel) -> float:
    """Mean work ``lam E[S^2] / (2 eps)`` in the resource-pooled M/G/1."""
    return lam * model.moment(2) / (2.0 * _epsilon(lam, model))


def lower_bound_mean_response(n: int, lam: float, model: JobSizeModel) -> float:
    """Mean response time lower bound valid for every dispatching policy.

    Can be negative at low load; it is returned unclamped.
    """
    m = ideal_cutoff(n, model)
    return (k_card(n, model) * mg1_mean_work(lam, model)
            - (n - 1) * model.moment(2) / (2.0 * m) + n * model.mean)


def _sita_split_terms(model: JobSizeModel) -> tuple[float, float]:
    # P{S<m} E[S^2 1(S<m)] and P{S>=m} E[S^2 1(S>=m)] at the equal-load cutoff
    require_continuous(model)
    m = solve_size_threshold(model, 0.5)
    below = model.truncated_moment(2, m)
    above = model.moment(2) - below
    return model.cdf(m) * below, model.sf(m) * above


def sita_e_mean_response(lam: float, model: JobSizeModel) -> float:
    """Exact two-server SITA-E mean response time (two independent M/G/1 queues)."""
    eps = _epsilon(lam, model)
    low, high = _sita_split_terms(model)
    return 2.0 * lam / eps * (low + high) + 2.0 * model.mean


def k_sita_e(model: JobSizeModel) -> float:
    low, high = _sita_split_terms(model)
    return 4.0 * (low + high) / model.moment(2)


def k_sita_o(model: JobSizeModel) -> float:
    low, high = _sita_split_terms(model)
    return 2.0 / model.moment(2) * (math.sqrt(low) + math.sqrt(high)) ** 2


def erlang_c_mean_response(n: int, lam: float, mean_size: float = 1.0) -> float:
    """Mean response time of an M/M/n central queue whose servers work at rate 1/n.

    With exponential sizes this is exactly LWL dispatching.
    """
    mu = 1.0 / (n * mean_size)
    a = lam / mu
    rho = a / n
    if not rho < 1:
        raise BoundsError("M/M/n requires rho < 1")
    term = a ** n / math.factorial(n) / (1.0 - rho)
    p_wait = term / (sum(a ** k / math.factorial(k) for k in range(n)) + term)
    return p_wait / (n * mu - lam) + 1.0 / mu


def card_upper_bound_explicit(alpha: float, beta: float, delta: float, epsilon: float,
                              m_plus: float, model: JobSizeModel, lam: float) -> float:
    """Explicit two-server CARD mean response time upper bound.

    Requires ``delta <= epsilon < 1/2`` and ``beta >= 2 delta``; ``c`` is
    assumed to follow the idleness-threshold formula.
    """
    if not delta <= epsilon:
        raise BoundsError(f"requires delta <= epsilon (delta={delta}, epsilon={epsilon})")
    if not epsilon < 0.5:
        raise BoundsError(f"requires epsilon < 1/2 (epsilon={epsilon})")
    if not beta >= 2 * delta:
        raise BoundsError(f"requires beta >= 2 delta (beta={beta}, delta={delta})")
    if not (alpha > 0 and beta > 0 and delta > 0):
        raise BoundsError("alpha, beta and delta must be positive")
    if abs(epsilon - (1.0 - lam * model.mean)) > 1e-9:
        raise BoundsError("epsilon does not match 1 - lam E[S]")
    ab = alpha + beta
    log_term = math.log(3.0 / (2.0 * beta * delta))
    leading = (k_card(2, model) + 4.0 * beta / ab) * (1.0 + delta / epsilon) * mg1_mean_work(lam, model)
    terms = (
        beta / (alpha ** 2 * ab),
        math.sqrt(beta / (alpha ** 2 * epsilon * ab)),
        log_term / (beta * ab),
        math.sqrt(log_term / beta),
        math.sqrt(delta) * log_term / (alpha ** 2 * beta ** 2 * epsilon),
    )
    return leading + 2.0 * model.mean + 44.0 * m_plus * max(terms)


@dataclass(frozen=True)
class HeavyTrafficRecipe:
    alpha: float
    beta: float
    delta: float
    c: float
    m_minus: float
    m_plus: float
    beta_clipped: bool


def heavy_traffic_recipe(epsilon: float, n: int, model: JobSizeModel,
                         alpha_scale: float = 0.25, beta_scale: float = 1.0,
                         delta_power: float = 3.0) -> HeavyTrafficRecipe:
    """Rigid CARD parameters with the heavy-traffic scalings.

    ``alpha = alpha_scale/n``, ``beta = beta_scale eps^(1/3) log(1/eps)^(2/3)``,
    ``delta = eps^delta_power``.  When ``beta`` would leave no load for
    large jobs it is clipped to 90% of its feasible maximum
    ``rho/(n-1) - 1/n``.
    """
    if not 0 < epsilon < 1.0 / n:
        raise BoundsError(f"epsilon must lie in (0, 1/n), got {epsilon}")
    rho = 1.0 - epsilon
    alpha = alpha_scale / n
    beta = beta_scale * epsilon ** (1.0 / 3.0) * math.log(1.0 / epsilon) ** (2.0 / 3.0)
    beta_max = rho / (n - 1) - 1.0 / n
    if beta_max <= 0:
        raise BoundsError("no feasible beta at this load")
    clipped = beta >= beta_max
    if clipped:
        beta = 0.9 * beta_max
    delta = epsilon ** delta_power
    lam = rho / model.mean
    m_minus, m_plus = card_params_from_alpha_beta(n, lam, model, alpha, beta)
    c = card_threshold_c(n, m_plus, beta, delta)
    return HeavyTrafficRecipe(alpha, beta, delta, c, m_minus, m_plus, clipped)


BOUNDS_COLUMNS = ("dist", "n", "rho", "K_CARD", "K_LWL", "K_SITA_E", "K_SITA_O",
                  "mg1_mean_work", "lower_bound", "sita_e_exact", "card_upper_explicit")


def bounds_row(n: int, lam: float, model: JobSizeModel, dist: str = "") -> dict:
    """All constants and bounds for one configuration; n=2-only entries are NaN otherwise."""
    eps = _epsilon(lam, model)
    row = {
        "dist": dist or model.tag,
        "n": n,
        "rho": 1.0 - eps,
        "K_CARD": k_card(n, model),
        "K_LWL": k_lwl(),
        "K_SITA_E": math.nan,
        "K_SITA_O": math.nan,
        "mg1_mean_work": mg1_mean_work(lam, model),
        "lower_bound": lower_bound_mean_response(n, lam, model),
        "sita_e_exact": math.nan,
        "card_upper_explicit": math.nan,
    }
    if n == 2:
        row["K_SITA_E"] = k_sita_e(model)
        row["K_SITA_O"] = k_sita_o(model)
        row["sita_e_exact"] = sita_e_mean_response(lam, model)
        if eps < 0.5:
            try:
                r = heavy_traffic_recipe(eps, 2, model)
                row["card_upper_explicit"] = card_upper_bound_explicit(
                    r.alpha, r.beta, r.delta, eps, r.m_plus, model, lam)
            except (BoundsError, ValueError):
                pass
    return row
