"""relaylab: a verification laboratory for vehicular relay-handoff strategies.

Three layers: closed forms (`analytic`), an event-driven Monte Carlo
simulator of the same rounds (`sim`), and a batch harness (`cli`) that
quantifies where the closed forms hold and where the approximations drift.
"""
from .model import ScenarioParams, SimConfig, Strategy, validate_params
from .numerics import (
    MeanCI,
    QuadratureError,
    cond_max_mean,
    dilog,
    integrate,
    mean_ci,
    trunc_mean,
)
from .analytic import (
    AnalyticReport,
    build_report,
    expected_handoffs_sc,
    expected_handoffs_sm,
    expected_handoffs_sm_stopping_geo,
    expected_handoffs_sm_stopping_sum,
    expected_service_sm_stopping,
    expected_t1_sc,
    expected_t2_stopping,
    expected_t_given_tau,
    expected_tau1_sc,
    expected_unserved_per_round,
    p_s_delta,
    p_s_prime,
    p_s_prime_seq,
    p_vertical,
    p_vertical_hat,
    p_vertical_hat_limit,
    pdf_tau1_sc,
    ratio_t2_sc,
    ratio_t2_sm_stopping,
)
from .sim import (
    ArrivalEvent,
    RoundOutcome,
    SimSummary,
    TraceStep,
    coupled_round,
    estimate_r2,
    simulate_many,
    simulate_round,
    trace_rounds,
    window_recursion_round,
)

__version__ = "0.1.0"

__all__ = [
    "AnalyticReport",
    "ArrivalEvent",
    "MeanCI",
    "QuadratureError",
    "RoundOutcome",
    "ScenarioParams",
    "SimConfig",
    "SimSummary",
    "Strategy",
    "TraceStep",
    "build_report",
    "cond_max_mean",
    "coupled_round",
    "dilog",
    "estimate_r2",
    "expected_handoffs_sc",
    "expected_handoffs_sm",
    "expected_handoffs_sm_stopping_geo",
    "expected_handoffs_sm_stopping_sum",
    "expected_service_sm_stopping",
    "expected_t1_sc",
    "expected_t2_stopping",
    "expected_t_given_tau",
    "expected_tau1_sc",
    "expected_unserved_per_round",
    "integrate",
    "mean_ci",
    "p_s_delta",
    "p_s_prime",
    "p_s_prime_seq",
    "p_vertical",
    "p_vertical_hat",
    "p_vertical_hat_limit",
    "pdf_tau1_sc",
    "ratio_t2_sc",
    "ratio_t2_sm_stopping",
    "simulate_many",
    "simulate_round",
    "trace_rounds",
    "trunc_mean",
    "validate_params",
    "window_recursion_round",
    "__version__",
]
