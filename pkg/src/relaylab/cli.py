"""Batch harness: parse a job, run analytics/simulation/comparisons, emit tables.

Commands:
  analytic   evaluate the closed-form battery for one scenario
  simulate   Monte Carlo estimates for one scenario (optionally with traces)
  compare    closed forms vs simulation, one row per quantity, with gating
  sweep      compare over a Cartesian parameter grid

Rows share one schema (see _COLUMNS) so every output is a plot-ready table;
each row embeds the full scenario, rounds, and seed, making it reproducible
from the file alone. Comparison rows are tiered: "hard" rows are exact
results the simulation must confirm (the command exits 2 if one misses by
more than three standard errors), "soft" rows are approximations whose
error is reported, never gated. Sweeps only report; they never gate.
"""
from __future__ import annotations

import argparse
import itertools
import json
import math
import sys
from csv import writer as csv_writer
from dataclasses import dataclass

from .model import ScenarioParams, SimConfig, Strategy
from .numerics import trunc_mean
from . import analytic
from .sim import SimSummary, simulate_many, trace_rounds

_EPS_REL = 1e-12
_GATE_CUSHION = 1e-12

_COLUMNS = (
    "lambda", "tm", "th", "ps", "ts", "strategy", "rounds", "seed",
    "quantity", "analytic", "method", "sim_mean", "sim_ci95",
    "abs_err", "rel_err", "tier",
)

_AXIS_FIELDS = ("lambda", "tm", "th", "ps", "ts")
_SCALAR_KEYS = ("strategy", "rounds", "seed", "format", "out", "traces")


class UsageError(Exception):
    """Bad flags, bad config document, or an unusable command combination."""


@dataclass(frozen=True)
class RunSpec:
    """A fully resolved job: what to run, on what scenario(s), where to write."""

    command: str
    strategy: Strategy
    fmt: str
    out: str | None
    rounds: int
    seed: int
    traces: int
    params: ScenarioParams | None
    grid: tuple[tuple[str, tuple[float, ...]], ...] | None


@dataclass(frozen=True)
class CompareRow:
    lam: float
    tm: float
    th: float
    ps: float
    ts: float
    strategy: str
    rounds: int | None
    seed: int | None
    quantity: str
    analytic: float | None
    method: str
    sim_mean: float | None
    sim_ci95: float | None
    abs_err: float | None
    rel_err: float | None
    tier: str


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    # usage problems must exit 1 (status 2 is reserved for gate failures)
    def error(self, message):
        raise UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="relaylab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("analytic", "simulate", "compare", "sweep"):
        p = sub.add_parser(name)
        p.add_argument("--lambda", dest="lam", type=float, default=None,
                       help="relay arrival rate (> 0)")
        p.add_argument("--tm", type=float, default=None, help="coverage window")
        p.add_argument("--th", type=float, default=None, help="per-handoff cost")
        p.add_argument("--ps", type=float, default=None, help="stop probability")
        p.add_argument("--ts", type=float, default=None, help="extra dwell when stopped")
        p.add_argument("--strategy", choices=("sm", "sc"), default=None)
        p.add_argument("--out", default=None, help="output path (default stdout)")
        p.add_argument("--format", dest="fmt", choices=("csv", "json"), default=None)
        p.add_argument("--config", default=None, help="JSON config document")
        if name != "analytic":
            p.add_argument("--rounds", type=int, default=None)
            p.add_argument("--seed", type=int, default=None)
        if name == "simulate":
            p.add_argument("--traces", type=int, default=None,
                           help="dump full traces for this many extra rounds")
    return parser


def _load_config(path: str) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise UsageError(f"cannot read config document: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"config document is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise UsageError("config document must be a JSON object")
    return doc


def _axis_values(key: str, raw) -> tuple[float, ...]:
    values = raw if isinstance(raw, (list, tuple)) else [raw]
    if len(values) == 0:
        raise UsageError(f"config axis {key!r} is empty")
    try:
        values = sorted(float(v) for v in values)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"config axis {key!r} has a non-numeric entry: {raw!r}") from exc
    return tuple(values)


def parse_run_spec(argv, config: dict | None = None) -> RunSpec:
    """Resolve argv (plus an optional pre-loaded config document) to a RunSpec.

    Precedence, lowest to highest: built-in defaults, the `config` argument,
    the --config file, explicit flags.

    Raises:
        UsageError: unknown flags, malformed numbers or document, missing
            required parameters, empty grid axis, scenario validation
            failures, array values outside the sweep command.
    """
    ns = _build_parser().parse_args(list(argv))
    doc: dict = dict(config) if config else {}
    if ns.config is not None:
        doc.update(_load_config(ns.config))
    unknown = set(doc) - set(_AXIS_FIELDS) - set(_SCALAR_KEYS)
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")

    axes: dict[str, tuple[float, ...]] = {}
    defaults = {"lambda": None, "tm": None, "th": 0.0, "ps": 0.0, "ts": 0.0}
    flag_names = {"lambda": "lam", "tm": "tm", "th": "th", "ps": "ps", "ts": "ts"}
    for key in _AXIS_FIELDS:
        flag = getattr(ns, flag_names[key])
        if flag is not None:
            axes[key] = (float(flag),)
        elif key in doc:
            axes[key] = _axis_values(key, doc[key])
        elif defaults[key] is not None:
            axes[key] = (defaults[key],)
        else:
            raise UsageError(f"missing required parameter --{key}")

    def scalar(flag_value, key, fallback):
        if flag_value is not None:
            return flag_value
        return doc.get(key, fallback)

    strategy_raw = scalar(ns.strategy, "strategy", "sm")
    try:
        strategy = Strategy(strategy_raw)
    except ValueError as exc:
        raise UsageError(f"unknown strategy {strategy_raw!r}") from exc
    fmt = scalar(ns.fmt, "format", "csv")
    if fmt not in ("csv", "json"):
        raise UsageError(f"unknown format {fmt!r}")
    out = scalar(ns.out, "out", None)
    rounds = int(scalar(getattr(ns, "rounds", None), "rounds", 100_000))
    seed = int(scalar(getattr(ns, "seed", None), "seed", 0))
    traces = int(scalar(getattr(ns, "traces", None), "traces", 0))
    if traces < 0:
        raise UsageError("--traces must be >= 0")

    if ns.command == "sweep":
        grid = tuple((k, axes[k]) for k in _AXIS_FIELDS)
        # validate every grid point eagerly so errors surface at parse time
        for values in itertools.product(*(axes[k] for k in _AXIS_FIELDS)):
            _validate_point(dict(zip(_AXIS_FIELDS, values)))
        if (strategy is Strategy.SC_LATEST_AT_EXPIRY
                and any(v > 0 for v in axes["ps"]) and any(v > 0 for v in axes["ts"])):
            raise UsageError(
                "sweep: the latest-at-expiry policy has no closed forms with "
                "stopping relays; drop ps/ts or use --strategy sm"
            )
        return RunSpec(ns.command, strategy, fmt, out, rounds, seed, traces,
                       params=None, grid=grid)

    multi = [k for k in _AXIS_FIELDS if len(axes[k]) > 1]
    if multi:
        raise UsageError(
            f"array-valued parameter(s) {multi} require the sweep command"
        )
    params = _validate_point({k: axes[k][0] for k in _AXIS_FIELDS})
    if ns.command == "compare" and params.stopping and strategy is Strategy.SC_LATEST_AT_EXPIRY:
        raise UsageError(
            "compare: the latest-at-expiry policy has no closed forms with "
            "stopping relays (the simulator still runs it, flagged "
            "experimental, via the simulate command)"
        )
    return RunSpec(ns.command, strategy, fmt, out, rounds, seed, traces,
                   params=params, grid=None)


def _validate_point(point: dict) -> ScenarioParams:
    try:
        return ScenarioParams(
            lam=point["lambda"], t_m=point["tm"], t_h=point["th"],
            p_s=point["ps"], t_s=point["ts"],
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


# ---------------------------------------------------------------------------
# row construction
# ---------------------------------------------------------------------------

def _clean(v):
    if v is None:
        return None
    if isinstance(v, float) and not math.isfinite(v):
        return None
    return v


def _row(params, strategy, rounds, seed, quantity, analytic_value, method,
         sim_mean, sim_ci95, tier) -> CompareRow:
    analytic_value = _clean(analytic_value)
    sim_mean = _clean(sim_mean)
    sim_ci95 = _clean(sim_ci95)
    abs_err = rel_err = None
    if analytic_value is not None and sim_mean is not None:
        abs_err = abs(analytic_value - sim_mean)
        rel_err = abs_err / max(abs(analytic_value), _EPS_REL)
    return CompareRow(
        lam=params.lam, tm=params.t_m, th=params.t_h, ps=params.p_s,
        ts=params.t_s, strategy=strategy.value, rounds=rounds, seed=seed,
        quantity=quantity, analytic=analytic_value, method=method,
        sim_mean=sim_mean, sim_ci95=sim_ci95, abs_err=abs_err,
        rel_err=rel_err, tier=tier,
    )


def _analytic_entries(params: ScenarioParams, quad_tol=1e-9, tail_tol=1e-10):
    """(quantity, value, method) for every field of the closed-form report."""
    rep = analytic.build_report(params, quad_tol=quad_tol, tail_tol=tail_tol)
    return [
        ("p_v", rep.p_v, "closed_form"),
        ("e_tau1_sc", rep.e_tau1_sc, "closed_form"),
        ("e_t1_sc", rep.e_t1_sc, rep.t1_method),
        ("e_t1_sc_closed", rep.e_t1_sc_closed, "closed_form"),
        ("t1_closed_deviation", rep.t1_closed_deviation, ""),
        ("e_m_sm", rep.e_m_sm, "closed_form"),
        ("e_m_sc", rep.e_m_sc, "closed_form"),
        ("e_unserved_per_handoff", rep.e_unserved_per_handoff, "closed_form"),
        ("r2_sc", rep.r2_sc, "closed_form"),
        ("p_s_prime", rep.p_s_prime, "closed_form"),
        ("delta", rep.delta, "closed_form"),
        ("p_v_hat_1", rep.p_v_hat_1, "closed_form"),
        ("p_v_hat_2", rep.p_v_hat_2, "closed_form"),
        ("e_m_sm_stop_sum", rep.e_m_sm_stop_sum, "series_sum"),
        ("truncation_terms", float(rep.truncation_terms), "series_sum"),
        ("e_m_sm_stop_geo", rep.e_m_sm_stop_geo, "geometric"),
        ("e_tau_sm_stop_1", rep.e_tau_sm_stop_1, "closed_form"),
        ("e_tau_sm_stop_2", rep.e_tau_sm_stop_2, "closed_form"),
        ("a2_tilde", rep.a2_tilde, "closed_form"),
        ("r2_sm_stop", rep.r2_sm_stop, "closed_form"),
    ]


def run_analytic(spec: RunSpec) -> list[CompareRow]:
    """Closed-form battery as rows (sim columns empty)."""
    params = spec.params
    return [
        _row(params, spec.strategy, None, None, name, value, method,
             None, None, "")
        for name, value, method in _analytic_entries(params)
    ]


def _summary_rows(params, strategy, summary: SimSummary, rounds, seed,
                  tiers=None, analytics=None,
                  include_unmatched: bool = True) -> list[CompareRow]:
    # include_unmatched keeps sim-only quantities (no analytic counterpart);
    # comparison output drops them so every emitted row carries an error
    tiers = tiers or {}
    analytics = analytics or {}
    rows = []
    stats = [
        ("p_vertical", summary.p_vertical),
        ("first_service_offset", summary.first_service_offset),
        ("first_gap_offset", summary.first_gap_offset),
        ("m_handoffs", summary.m_handoffs),
        ("u_unserved", summary.u_unserved),
        ("t2_duration", summary.t2_duration),
        ("t1_duration", summary.t1_duration),
    ]
    for name, mc in stats:
        if name not in analytics and not include_unmatched:
            continue
        specs = analytics.get(name, [(None, "")])
        for value, method in specs:
            rows.append(_row(params, strategy, rounds, seed, name, value,
                             method, mc.mean, mc.ci95_half_width,
                             tiers.get(name, "")))
    if "r2" in analytics or include_unmatched:
        r2_specs = analytics.get("r2", [(None, "")])
        for value, method in r2_specs:
            rows.append(_row(params, strategy, rounds, seed, "r2", value,
                             method, summary.r2_estimate,
                             1.96 * summary.r2_std_error, tiers.get("r2", "")))
    if summary.experimental:
        rows.append(_row(params, strategy, rounds, seed, "experimental_flag",
                         None, "", 1.0, 0.0, ""))
    return rows


def run_simulate(spec: RunSpec) -> list[CompareRow]:
    """Simulation estimates as rows (analytic columns empty)."""
    summary = simulate_many(
        spec.params, spec.strategy, SimConfig(rounds=spec.rounds, seed=spec.seed)
    )
    return _summary_rows(spec.params, spec.strategy, summary, spec.rounds, spec.seed)


def _compare_point(params: ScenarioParams, strategy: Strategy,
                   rounds: int, seed: int) -> list[CompareRow]:
    summary = simulate_many(params, strategy, SimConfig(rounds=rounds, seed=seed))
    lam = params.lam
    pv = analytic.p_vertical(params)
    exact_renewal_t2 = (1.0 - pv) / (lam * pv)
    analytics: dict[str, list] = {"t1_duration": [(1.0 / lam, "closed_form")]}
    tiers = {"t1_duration": "hard"}
    if strategy is Strategy.SC_LATEST_AT_EXPIRY:
        analytics["p_vertical"] = [(pv, "closed_form")]
        tiers["p_vertical"] = "hard"
        analytics["first_service_offset"] = [(analytic.expected_tau1_sc(params), "closed_form")]
        tiers["first_service_offset"] = "hard"
        analytics["first_gap_offset"] = [(analytic.expected_t1_sc(params), "quadrature")]
        tiers["first_gap_offset"] = "soft"
        e_m_sc = analytic.expected_handoffs_sc(params)
        analytics["m_handoffs"] = [(e_m_sc, "closed_form")]
        tiers["m_handoffs"] = "soft"
        analytics["u_unserved"] = [(analytic.expected_handoffs_sm(params) - e_m_sc,
                                    "closed_form")]
        tiers["u_unserved"] = "soft"
        analytics["t2_duration"] = [(exact_renewal_t2, "closed_form")]
        tiers["t2_duration"] = "hard"
        analytics["r2"] = [(analytic.ratio_t2_sc(params), "closed_form")]
        tiers["r2"] = "hard" if params.t_h == 0.0 else "soft"
    else:
        plain_formulas = params.p_s == 0.0            # service/t2/r2 forms reduce
        plain_dynamics = plain_formulas or params.t_s == 0.0
        analytics["p_vertical"] = [(analytic.p_vertical_hat(params, 1), "closed_form")]
        tiers["p_vertical"] = "hard"
        if plain_formulas:
            tm_mean = trunc_mean(lam * params.t_m, lam)
            analytics["first_service_offset"] = [(tm_mean, "closed_form")]
            analytics["first_gap_offset"] = [(tm_mean, "closed_form")]
            tiers["first_service_offset"] = tiers["first_gap_offset"] = "hard"
        else:
            analytics["first_service_offset"] = [
                (analytic.expected_service_sm_stopping(params, 1), "closed_form")]
            analytics["first_gap_offset"] = [
                (analytic.expected_service_sm_stopping(params, 2), "closed_form")]
            tiers["first_service_offset"] = tiers["first_gap_offset"] = "soft"
        if plain_dynamics:
            analytics["m_handoffs"] = [(analytic.expected_handoffs_sm(params),
                                        "closed_form")]
            tiers["m_handoffs"] = "hard"
            analytics["u_unserved"] = [(0.0, "closed_form")]
            tiers["u_unserved"] = "hard"
        else:
            analytics["m_handoffs"] = [
                (analytic.expected_handoffs_sm_stopping_sum(params), "series_sum"),
                (analytic.expected_handoffs_sm_stopping_geo(params), "geometric"),
            ]
            tiers["m_handoffs"] = "soft"
        analytics["t2_duration"] = [(analytic.expected_t2_stopping(params),
                                     "closed_form")]
        tiers["t2_duration"] = "hard" if plain_formulas else "soft"
        analytics["r2"] = [(analytic.ratio_t2_sm_stopping(params), "closed_form")]
        tiers["r2"] = "hard" if plain_formulas else "soft"
    return _summary_rows(params, strategy, summary, rounds, seed,
                         tiers=tiers, analytics=analytics,
                         include_unmatched=False)


def run_compare(spec: RunSpec) -> list[CompareRow]:
    """One comparison row per quantity (two for the stopping handoff count)."""
    return _compare_point(spec.params, spec.strategy, spec.rounds, spec.seed)


def run_sweep(spec: RunSpec) -> list[CompareRow]:
    """Comparison rows for every grid point; emits to spec.out as a side effect.

    Point i runs with seed spec.seed + i (echoed in its rows), in
    lexicographic order over the axes (lambda, tm, th, ps, ts), each axis
    ascending.
    """
    axes = dict(spec.grid)
    rows: list[CompareRow] = []
    for index, values in enumerate(
        itertools.product(*(axes[k] for k in _AXIS_FIELDS))
    ):
        params = _validate_point(dict(zip(_AXIS_FIELDS, values)))
        rows.extend(
            _compare_point(params, spec.strategy, spec.rounds, spec.seed + index)
        )
    emit(rows, spec.fmt, spec.out)
    return rows


def hard_violations(rows) -> list[CompareRow]:
    """Hard-tier rows whose |analytic - sim| exceeds 3 standard errors.

    The standard error is recovered from the 95% half-width; a 1e-12
    cushion keeps zero-variance exact rows from tripping on representation
    noise.
    """
    bad = []
    for r in rows:
        if r.tier != "hard" or r.abs_err is None or r.sim_ci95 is None:
            continue
        se = r.sim_ci95 / 1.96
        if not r.abs_err <= 3.0 * se + _GATE_CUSHION:
            bad.append(r)
    return bad


# ---------------------------------------------------------------------------
# emission
# ---------------------------------------------------------------------------

def row_to_dict(row: CompareRow) -> dict:
    return {
        "lambda": row.lam, "tm": row.tm, "th": row.th, "ps": row.ps,
        "ts": row.ts, "strategy": row.strategy, "rounds": row.rounds,
        "seed": row.seed, "quantity": row.quantity, "analytic": row.analytic,
        "method": row.method, "sim_mean": row.sim_mean,
        "sim_ci95": row.sim_ci95, "abs_err": row.abs_err,
        "rel_err": row.rel_err, "tier": row.tier,
    }


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return str(int(value))
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        return f"{value:.9g}"
    return str(value)


def emit(rows, fmt: str, path: str | None) -> None:
    """Write rows as CSV (9 significant digits) or JSON (full precision).

    Raises:
        ValueError: no rows or unknown format.
        OSError: unwritable path.
    """
    rows = list(rows)
    if not rows:
        raise ValueError("nothing to emit")
    if fmt not in ("csv", "json"):
        raise ValueError(f"unknown format {fmt!r}")
    if path is None:
        _emit_stream(rows, fmt, sys.stdout)
    else:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            _emit_stream(rows, fmt, fh)


def _emit_stream(rows, fmt, stream) -> None:
    if fmt == "json":
        json.dump([row_to_dict(r) for r in rows], stream, indent=2)
        stream.write("\n")
        return
    w = csv_writer(stream, lineterminator="\n")
    w.writerow(_COLUMNS)
    for r in rows:
        d = row_to_dict(r)
        w.writerow([_cell(d[c]) for c in _COLUMNS])


def _emit_trace_dump(params, strategy, seed, count, stream) -> None:
    outcomes = trace_rounds(
        params, strategy,
        SimConfig(rounds=count, seed=seed, collect_traces=True),
    )
    for i, o in enumerate(outcomes):
        record = {
            "round": i,
            "m_handoffs": o.m_handoffs,
            "u_unserved": o.u_unserved,
            "t2_duration": o.t2_duration,
            "t1_duration": o.t1_duration,
            "service_durations": list(o.service_durations),
            "steps": [
                {
                    "k": s.k,
                    "window_length": s.window_length,
                    "arrival_count": s.arrival_count,
                    "max_offset": s.max_offset,
                    "boarded_arrival_time": s.boarded_arrival_time,
                    "stop_flag": s.stop_flag,
                }
                for s in (o.trace or ())
            ],
        }
        stream.write(json.dumps(record) + "\n")


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def main(argv=None) -> int:
    """Exit status: 0 success, 1 usage/runtime error, 2 hard-tier gate failure."""
    if argv is None:
        argv = sys.argv[1:]
    try:
        spec = parse_run_spec(argv)
    except UsageError as exc:
        print(f"relaylab: error: {exc}", file=sys.stderr)
        return 1
    try:
        if spec.command == "analytic":
            rows = run_analytic(spec)
            emit(rows, spec.fmt, spec.out)
        elif spec.command == "simulate":
            rows = run_simulate(spec)
            emit(rows, spec.fmt, spec.out)
            if spec.traces > 0:
                if spec.out is None:
                    _emit_trace_dump(spec.params, spec.strategy, spec.seed,
                                     spec.traces, sys.stdout)
                else:
                    with open(f"{spec.out}.traces.jsonl", "w",
                              encoding="utf-8") as fh:
                        _emit_trace_dump(spec.params, spec.strategy, spec.seed,
                                         spec.traces, fh)
        elif spec.command == "compare":
            rows = run_compare(spec)
            emit(rows, spec.fmt, spec.out)
            bad = hard_violations(rows)
            if bad:
                for r in bad:
                    print(
                        f"relaylab: hard-tier violation: {r.quantity} "
                        f"analytic {r.analytic!r} vs sim {r.sim_mean!r} "
                        f"(ci95 {r.sim_ci95!r})",
                        file=sys.stderr,
                    )
                return 2
        else:
            run_sweep(spec)
        return 0
    except (ValueError, ArithmeticError, OSError) as exc:
        print(f"relaylab: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
