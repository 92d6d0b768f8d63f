"""Closed forms for relay-handoff rounds under both strategies.

Quantities for the latest-at-expiry policy (``Strategy.SC_LATEST_AT_EXPIRY``):
vertical-handoff probability, first-window statistics, handoff and unserved
counts, and the served-time ratio. Quantities for the serve-all policy
(``Strategy.SM_SERVE_ALL``) additionally cover stopping vehicles through the
effective-stop-probability chain, the truncated expectation series for the
handoff count, per-ride service means, and the served-time ratio.

Two kinds of results live here side by side and the comparison harness keeps
them apart: exact results (they gate hard against simulation) and
approximations (reported with their error, never gated). Docstrings say
which is which.
"""
from __future__ import annotations

import cmath
import math
from dataclasses import dataclass

from .model import ScenarioParams
from .numerics import QuadratureError, cond_max_mean, dilog, integrate, trunc_mean

_PI2_6 = math.pi * math.pi / 6.0
_SUM_TERM_CAP = 1_000_000

DEFAULT_QUAD_TOL = 1e-9
DEFAULT_TAIL_TOL = 1e-10


# ---------------------------------------------------------------------------
# plain scenario, latest-at-expiry policy
# ---------------------------------------------------------------------------

def p_vertical(params: ScenarioParams) -> float:
    """Probability a round ends with no handoff at all (exact).

    The first coverage window of length t_m is empty of arrivals with
    probability e^(-lam t_m); the round then falls back to the fixed
    infrastructure.
    """
    return math.exp(-params.lam * params.t_m)


def expected_tau1_sc(params: ScenarioParams) -> float:
    """Mean arrival offset of the first handoff target (exact).

    Given at least one arrival in the first window (0, t_m], the target is
    the latest arrival; its offset has mean
    (lam t_m - (1 - e^(-lam t_m))) / (lam (1 - e^(-lam t_m))),
    always inside (t_m / 2, t_m).
    """
    return cond_max_mean(params.lam * params.t_m) / params.lam


def _pdf_tau1(s: float, params: ScenarioParams) -> float:
    # lam e^(lam s) / (e^(lam t_m) - 1), written to stay finite for large lam*t_m
    lam = params.lam
    return lam * math.exp(lam * (s - params.t_m)) / -math.expm1(-lam * params.t_m)


def pdf_tau1_sc(s: float, params: ScenarioParams) -> float:
    """Density of the first target's arrival offset on (0, t_m] (exact).

    Raises:
        ValueError: outside the support (0, t_m].
    """
    if not 0.0 < s <= params.t_m:
        raise ValueError(f"s must lie in (0, t_m] = (0, {params.t_m}], got {s!r}")
    return _pdf_tau1(s, params)


def expected_t_given_tau(s: float, params: ScenarioParams) -> float:
    """Mean offset of the latest arrival in a follow-up window of length s (exact).

    Same functional form as expected_tau1_sc with the window t_m replaced by
    s: (lam s - (1 - e^(-lam s))) / (lam (1 - e^(-lam s))).

    Raises:
        ValueError: outside (0, t_m].
    """
    if not 0.0 < s <= params.t_m:
        raise ValueError(f"s must lie in (0, t_m] = (0, {params.t_m}], got {s!r}")
    return cond_max_mean(params.lam * s) / params.lam


def expected_t1_sc(
    params: ScenarioParams,
    method: str = "quadrature",
    tol: float = DEFAULT_QUAD_TOL,
) -> float:
    """Mean second-window offset, averaged over the first window (approximation).

    This composes the conditional mean of the second-window maximum with the
    density of the first one:

        integral over (0, t_m] of expected_t_given_tau(s) * pdf_tau1_sc(s) ds

    ``method="quadrature"`` evaluates that integral directly and is the
    ground truth for every downstream consumer. ``method="closed_form"``
    evaluates the equivalent dilogarithm expression on the principal branch
    and returns its real part; use build_report to see the (tiny) deviation
    between the two routes.

    Note the composition ignores that larger first windows are more likely
    to contain a second arrival at all, so it sits below the simulated
    conditional mean; the comparison harness reports that gap rather than
    asserting it away.

    The lam -> 0+ limit is t_m / 4.

    Raises:
        ValueError: on an unknown method.
    """
    lam, t_m = params.lam, params.t_m
    if method == "quadrature":
        def integrand(s: float) -> float:
            return _pdf_tau1(s, params) * cond_max_mean(lam * s) / lam

        return integrate(integrand, 0.0, t_m, tol)
    if method == "closed_form":
        x = lam * t_m
        big = math.exp(x)
        bracket = (
            dilog(big)
            - _PI2_6
            + 1.0
            + big * (x - 1.0)
            + x * cmath.log(complex(1.0 - big, 0.0))
        )
        value = bracket / (lam * (big - 1.0)) - 1.0 / lam
        return value.real
    raise ValueError(f"method must be 'quadrature' or 'closed_form', got {method!r}")


def expected_handoffs_sm(params: ScenarioParams) -> float:
    """Mean handoff count per round under serve-all, no stopping (exact).

    The handoff count is geometric with success probability p_vertical, so
    the mean is (1 - P_V) / P_V = e^(lam t_m) - 1.
    """
    pv = p_vertical(params)
    return (1.0 - pv) / pv


def expected_unserved_per_round(
    params: ScenarioParams, n: int, tol: float = DEFAULT_QUAD_TOL
) -> float:
    """Mean count of relays never ridden, given n handoffs (approximation).

    Skipped relays accumulate at rate lam over windows whose mean length is
    (E[tau1] + E[t1]) / 2 per handoff: n * lam * (E[tau1] + E[t1]) / 2.

    Raises:
        ValueError: n < 0.
    """
    if n < 0:
        raise ValueError(f"n must be >= 0, got {n!r}")
    pair = expected_tau1_sc(params) + expected_t1_sc(params, tol=tol)
    return n * params.lam * pair / 2.0


def expected_handoffs_sc(params: ScenarioParams, tol: float = DEFAULT_QUAD_TOL) -> float:
    """Mean handoff count per round under latest-at-expiry (approximation).

    2 E[M_serve_all] / (lam (E[tau1] + E[t1]) + 2); never exceeds the
    serve-all count.
    """
    pair = expected_tau1_sc(params) + expected_t1_sc(params, tol=tol)
    return 2.0 * expected_handoffs_sm(params) / (params.lam * pair + 2.0)


def ratio_t2_sc(params: ScenarioParams, tol: float = DEFAULT_QUAD_TOL) -> float:
    """Fraction of a cycle spent served under latest-at-expiry.

    (1 - P_V) - 2 (1 - P_V) t_h / (E[tau1] + E[t1] + 2 / lam).

    Exact at t_h = 0, where it reduces to 1 - P_V; an approximation
    otherwise. Large t_h can push the raw value negative; callers that need
    a flag should use build_report.
    """
    base = 1.0 - p_vertical(params)
    if params.t_h == 0.0:
        return base
    pair = expected_tau1_sc(params) + expected_t1_sc(params, tol=tol)
    return base - 2.0 * base * params.t_h / (pair + 2.0 / params.lam)


# ---------------------------------------------------------------------------
# stopping scenario, serve-all policy
# ---------------------------------------------------------------------------

def p_s_prime(params: ScenarioParams) -> float:
    """Effective stop probability of the next ridden relay (approximation).

    (1 - e^(-p_s lam t_s)) + e^(-p_s lam t_s) (1 - e^(-lam t_m)) p_s:
    either a stopping relay arrives during the extra dwell window, or a
    relay caught in the regular window happens to stop itself.
    """
    a = -math.expm1(-params.p_s * params.lam * params.t_s)
    q = 1.0 - a
    return a + q * -math.expm1(-params.lam * params.t_m) * params.p_s


def p_s_delta(params: ScenarioParams) -> float:
    """Drift of the effective stop probability, p_s_prime - p_s.

    May be negative (small t_s with sizable p_s e^(-lam t_m)); always < 1.
    """
    return p_s_prime(params) - params.p_s


def _geom_sum(delta: float, terms: int) -> float:
    # sum_{k=0}^{terms-1} delta^k; delta < 1 for every valid scenario
    if terms <= 0:
        return 0.0
    if delta == 0.0:
        return 1.0
    return (1.0 - delta**terms) / (1.0 - delta)


def p_s_prime_seq(params: ScenarioParams, j: int) -> float:
    """Effective stop probability after j handoffs (approximation).

    p_s * (1 - delta^(j+1)) / (1 - delta) for j >= 0; equals p_s at j = 0
    and converges to p_s / (1 - delta).

    Raises:
        ValueError: j < 0.
    """
    if j < 0:
        raise ValueError(f"j must be >= 0, got {j!r}")
    return params.p_s * _geom_sum(p_s_delta(params), j + 1)


def p_vertical_hat(params: ScenarioParams, j: int) -> float:
    """No-catchable-relay probability at the j-th ride (j = 1 exact, j >= 2 approximation).

    e^(-lam t_m) [1 - p_s (1 - e^(-p_s lam t_s)) (1 - delta^j) / (1 - delta)].
    Reduces to e^(-lam t_m) exactly when p_s = 0 or t_s = 0. Monotone
    non-increasing in j whenever delta >= 0 (not in general).

    Raises:
        ValueError: j < 1.
    """
    if j < 1:
        raise ValueError(f"j must be >= 1, got {j!r}")
    a = -math.expm1(-params.p_s * params.lam * params.t_s)
    scale = 1.0 - params.p_s * a * _geom_sum(p_s_delta(params), j)
    return p_vertical(params) * scale


def p_vertical_hat_limit(params: ScenarioParams) -> float:
    """Large-j limit of p_vertical_hat."""
    a = -math.expm1(-params.p_s * params.lam * params.t_s)
    return p_vertical(params) * (1.0 - params.p_s * a / (1.0 - p_s_delta(params)))


def _stopping_sum(params: ScenarioParams, tail_tol: float) -> tuple[float, int]:
    r = 1.0 - min(p_vertical_hat(params, 1), p_vertical_hat_limit(params))
    if r >= 1.0:
        raise ArithmeticError(
            f"survival ratio {r} >= 1; the expectation series cannot be truncated"
        )
    total = 0.0
    term = 1.0
    j = 0
    while True:
        j += 1
        term *= 1.0 - p_vertical_hat(params, j)
        total += term
        if term * r / (1.0 - r) < tail_tol:
            return total, j
        if j >= _SUM_TERM_CAP:
            raise ArithmeticError(f"expectation series needs more than {j} terms")


def expected_handoffs_sm_stopping_sum(
    params: ScenarioParams, tail_tol: float = DEFAULT_TAIL_TOL
) -> float:
    """Mean handoff count with stopping relays, truncated series (approximation).

    sum over m >= 0 of prod_{j=1}^{m+1} (1 - p_vertical_hat(j)), truncated
    once the geometric tail bound term * r / (1 - r) drops below tail_tol,
    r being one minus the smallest ride-survival floor.

    Raises:
        ArithmeticError: defensively, if the tail ratio reaches 1 (no valid
            scenario does this).
    """
    return _stopping_sum(params, tail_tol)[0]


def expected_handoffs_sm_stopping_geo(params: ScenarioParams) -> float:
    """Mean handoff count with stopping relays, geometric shortcut (approximation).

    (1 - p_vertical_hat(1)) / p_vertical_hat(2): first ride survives with
    its own probability, later rides are approximated by the j = 2 level.
    Stays within a couple percent of the truncated series and reduces to
    e^(lam t_m) - 1 exactly at p_s = 0.
    """
    return (1.0 - p_vertical_hat(params, 1)) / p_vertical_hat(params, 2)


def expected_service_sm_stopping(params: ScenarioParams, j: int) -> float:
    """Mean duration of the j-th ride under serve-all (approximation).

    Three truncated-exponential terms, one per way the ride can end early:

        (1 - P'_(j-1))                    * trunc_mean(p_s lam t_m)
      + (1 - P'_(j-1) delta / (1 - p_s)) * trunc_mean((1 - p_s) lam t_m)
      + p_s_prime * G_(j-1)              * trunc_mean(p_s lam (t_m + t_s))

    with P'_(j-1) = p_s_prime_seq(j - 1) and G_(j-1) the geometric partial
    sum of delta with j terms (so the third weight avoids the 0/0 at
    p_s = 0). The weights are taken as written even though they are not a
    probability decomposition (the middle one can exceed 1). A term whose
    truncation point is zero contributes nothing, which keeps p_s = 1 from
    dividing by zero. Reduces to trunc_mean(lam t_m) at p_s = 0.

    Raises:
        ValueError: j < 1.
    """
    if j < 1:
        raise ValueError(f"j must be >= 1, got {j!r}")
    lam, t_m, p_s, t_s = params.lam, params.t_m, params.p_s, params.t_s
    delta = p_s_delta(params)
    seq_prev = params.p_s * _geom_sum(delta, j)  # p_s_prime_seq(j - 1)
    total = 0.0
    x1 = p_s * lam * t_m
    if x1 > 0.0:
        total += (1.0 - seq_prev) * trunc_mean(x1, lam)
    x2 = (1.0 - p_s) * lam * t_m
    if x2 > 0.0:
        total += (1.0 - seq_prev * delta / (1.0 - p_s)) * trunc_mean(x2, lam)
    x3 = p_s * lam * (t_m + t_s)
    if x3 > 0.0:
        total += p_s_prime(params) * _geom_sum(delta, j) * trunc_mean(x3, lam)
    return total


def expected_t2_stopping(params: ScenarioParams) -> float:
    """Mean served duration of a round under serve-all (approximation).

    t_m + p_s t_s + E[M'] (ride_mean(1) + ride_mean(2)) / 2, with E[M'] the
    geometric shortcut. Exact at p_s = 0, where it collapses to the
    renewal identity (1 - P_V) / (lam P_V).
    """
    rides = expected_service_sm_stopping(params, 1) + expected_service_sm_stopping(params, 2)
    return (
        params.t_m
        + params.p_s * params.t_s
        + expected_handoffs_sm_stopping_geo(params) * rides / 2.0
    )


def ratio_t2_sm_stopping(params: ScenarioParams) -> float:
    """Fraction of a cycle spent served under serve-all.

    (A2 - t_h E[M']) / (1 / lam + A2) with A2 = expected_t2_stopping.
    Exact for p_s = 0 at any t_h (and then equal to 1 - P_V when t_h = 0);
    an approximation when stopping is active. Large t_h can push it
    negative; build_report carries the flag.
    """
    a2 = expected_t2_stopping(params)
    m = expected_handoffs_sm_stopping_geo(params)
    return (a2 - params.t_h * m) / (1.0 / params.lam + a2)


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AnalyticReport:
    """Every closed-form quantity for one scenario, plus method bookkeeping.

    ``e_t1_sc`` holds the value selected by ``t1_method``;
    ``t1_closed_deviation`` is |closed_form - quadrature| so the two routes
    can be audited without re-deriving either. ``r2_*_negative`` flag ratios
    that came out below zero (physically meaningless, numerically possible
    for large t_h).
    """

    params: ScenarioParams
    p_v: float
    e_tau1_sc: float
    e_t1_sc: float
    t1_method: str
    e_t1_sc_closed: float
    t1_closed_deviation: float
    e_m_sm: float
    e_m_sc: float
    e_unserved_per_handoff: float
    r2_sc: float
    r2_sc_negative: bool
    p_s_prime: float
    delta: float
    p_v_hat_1: float
    p_v_hat_2: float
    e_m_sm_stop_sum: float
    e_m_sm_stop_geo: float
    truncation_terms: int
    e_tau_sm_stop_1: float
    e_tau_sm_stop_2: float
    a2_tilde: float
    r2_sm_stop: float
    r2_sm_stop_negative: bool


def build_report(
    params: ScenarioParams,
    quad_tol: float = DEFAULT_QUAD_TOL,
    tail_tol: float = DEFAULT_TAIL_TOL,
    t1_method: str = "quadrature",
) -> AnalyticReport:
    """Evaluate the full closed-form battery for one scenario.

    Args:
        params: validated scenario.
        quad_tol: absolute tolerance for the first-gap quadrature.
        tail_tol: truncation tolerance for the stopping expectation series.
        t1_method: which first-gap route lands in e_t1_sc
            ("quadrature", the ground truth, or "closed_form").

    Raises:
        ValueError: on an unknown t1_method.
        QuadratureError: propagated if the quadrature cannot converge.
    """
    if t1_method not in ("quadrature", "closed_form"):
        raise ValueError(f"t1_method must be 'quadrature' or 'closed_form', got {t1_method!r}")
    t1_quad = expected_t1_sc(params, "quadrature", quad_tol)
    t1_closed = expected_t1_sc(params, "closed_form")
    e_t1 = t1_quad if t1_method == "quadrature" else t1_closed
    r2_sc_val = ratio_t2_sc(params, quad_tol)
    r2_stop_val = ratio_t2_sm_stopping(params)
    stop_sum, terms = _stopping_sum(params, tail_tol)
    return AnalyticReport(
        params=params,
        p_v=p_vertical(params),
        e_tau1_sc=expected_tau1_sc(params),
        e_t1_sc=e_t1,
        t1_method=t1_method,
        e_t1_sc_closed=t1_closed,
        t1_closed_deviation=abs(t1_closed - t1_quad),
        e_m_sm=expected_handoffs_sm(params),
        e_m_sc=expected_handoffs_sc(params, quad_tol),
        e_unserved_per_handoff=expected_unserved_per_round(params, 1, quad_tol),
        r2_sc=r2_sc_val,
        r2_sc_negative=r2_sc_val < 0.0,
        p_s_prime=p_s_prime(params),
        delta=p_s_delta(params),
        p_v_hat_1=p_vertical_hat(params, 1),
        p_v_hat_2=p_vertical_hat(params, 2),
        e_m_sm_stop_sum=stop_sum,
        e_m_sm_stop_geo=expected_handoffs_sm_stopping_geo(params),
        truncation_terms=terms,
        e_tau_sm_stop_1=expected_service_sm_stopping(params, 1),
        e_tau_sm_stop_2=expected_service_sm_stopping(params, 2),
        a2_tilde=expected_t2_stopping(params),
        r2_sm_stop=r2_stop_val,
        r2_sm_stop_negative=r2_stop_val < 0.0,
    )
