"""Experiment harness: config parsing, seeded Monte Carlo sweeps and CSV output."""

from __future__ import annotations

import csv
import io
import logging
import math
import re
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .baselines import (
    EnumerationTooLarge,
    PowerGrid,
    brute_force_oracle,
    decoupled_baseline_run,
    enumeration_budget,
    hd_baseline_run,
)
from .channel import (
    CellGeometry,
    ChannelGains,
    LargeScaleParams,
    ParameterError,
    dbm_to_watt,
    sample_channel_realization,
    trial_rng,
)
from .engine import SolverError
from .model import (
    Allocation,
    ProblemInstance,
    check_feasibility,
    subcarrier_utility,
    system_objective,
)
from .reform import RoundingError
from .sca import SolveReport, SolverConfig, solve

log = logging.getLogger(__name__)

CSV_HEADER = "# fdmc-alloc results v1"
RESULT_COLUMNS = ("sweep_value", "scheme", "mean_throughput_bps_hz", "std_error", "trials",
                  "mean_iterations", "feasibility_failures")
SCHEMES = ("proposed", "baseline1", "baseline2")
PRESETS = ("paper-faithful", "converged")
FAILURE_LIMIT = 0.05


class ConfigError(ValueError):
    """Malformed or out-of-range experiment configuration."""


class AuditError(RuntimeError):
    """A reported mean does not match the stored allocations."""


# ---------------------------------------------------------------- config

_SCALE = {
    "frequency": {"": 1.0, "hz": 1.0, "khz": 1e3, "mhz": 1e6, "ghz": 1e9},
    "length": {"": 1.0, "m": 1.0, "km": 1e3},
}


def parse_quantity(text: str, kind: str) -> float:
    """Parse ``"<number> [unit]"`` into SI / linear units.

    ``power``: dBm, W or mW (bare numbers are watts). ``ratio``: dB or dBi
    (bare numbers are linear). ``frequency`` and ``length`` take the usual
    metric prefixes.
    """
    m = re.fullmatch(r"\s*([-+]?[0-9.]+(?:[eE][-+]?\d+)?)\s*([A-Za-z]*)\s*", text)
    if not m:
        raise ConfigError(f"cannot parse quantity {text!r}")
    value, unit = float(m.group(1)), m.group(2).lower()
    if kind == "power":
        if unit == "dbm":
            return float(dbm_to_watt(value))
        scale = {"": 1.0, "w": 1.0, "mw": 1e-3}
    elif kind == "ratio":
        if unit in ("db", "dbi"):
            return 10.0 ** (value / 10.0)
        scale = {"": 1.0}
    else:
        scale = _SCALE[kind]
    if unit not in scale:
        raise ConfigError(f"unit {m.group(2)!r} not valid for a {kind} value")
    return value * scale[unit]


def _parse_sweep(text: str) -> tuple:
    out = []
    for tok in text.split(","):
        tok = tok.strip()
        if not tok:
            continue
        # power axes are expressed in dBm; the suffix is optional
        tok = re.sub(r"\s*dBm$", "", tok, flags=re.IGNORECASE)
        try:
            out.append(float(tok))
        except ValueError:
            raise ConfigError(f"bad sweep value {tok!r}") from None
    return tuple(out)


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("true", "yes", "1", "on"):
        return True
    if t in ("false", "no", "0", "off"):
        return False
    raise ConfigError(f"bad boolean {text!r}")


@dataclass(frozen=True)
class ExperimentConfig:
    """All run parameters in SI / linear units.

    Defaults follow the simulation table: 2.5 GHz carrier, 5 MHz band split
    into 64 subcarriers of 78 kHz, exponent 3.6, SI cancellation -90 dB,
    noise -125 dBm at both ends, 18 dBm UL budget and a 10 dBi BS antenna.
    ``sweep_values`` are DL budgets in dBm for a power sweep and user
    counts (K = J) for a user sweep.
    """

    carrier_hz: float = 2.5e9
    bandwidth_hz: float = 5e6
    n_subcarriers: int = 64
    subcarrier_hz: float = 78e3
    pathloss_exponent: float = 3.6
    reference_distance_m: float = 1.0
    antenna_gain: float = 10.0
    noise_dl_w: float = float(dbm_to_watt(-125.0))
    noise_bs_w: float = float(dbm_to_watt(-125.0))
    rician_k: float = 10.0 ** 0.5
    rho: float = 1e-9
    p_max_ul_w: float = float(dbm_to_watt(18.0))
    p_max_dl_w: float = float(dbm_to_watt(31.0))
    inner_radius_m: float = 30.0
    outer_radius_m: float = 600.0
    n_dl: int = 4
    n_ul: int = 4
    sweep_values: tuple = ()
    trials: int = 50
    master_seed: int = 0
    preset: str = "paper-faithful"
    baseline2_split: str = "adaptive"
    oracle_levels: int = 32
    oracle_cap: float = 1e16
    interference_free: bool = False
    output: str | None = None
    trace: str | None = None

    def __post_init__(self):
        if self.trials < 1:
            raise ConfigError("trials must be at least 1")
        if min(self.n_subcarriers, self.n_dl, self.n_ul) < 1:
            raise ConfigError("subcarrier and user counts must be at least 1")
        if any(b <= a for a, b in zip(self.sweep_values, self.sweep_values[1:])):
            raise ConfigError("sweep values must be strictly increasing")
        if self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}")
        if self.baseline2_split not in ("adaptive", "band"):
            raise ConfigError("baseline2_split must be 'adaptive' or 'band'")
        if self.oracle_levels < 2:
            raise ConfigError("oracle_levels must be at least 2")
        for name in ("noise_dl_w", "noise_bs_w", "p_max_ul_w", "p_max_dl_w", "carrier_hz",
                     "antenna_gain", "rician_k", "subcarrier_hz", "bandwidth_hz"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        try:
            self.geometry().validate()
            self.params().validate()
        except ParameterError as exc:
            raise ConfigError(str(exc)) from None

    def geometry(self) -> CellGeometry:
        return CellGeometry(self.inner_radius_m, self.outer_radius_m)

    def params(self) -> LargeScaleParams:
        def db(x):
            return 10.0 * math.log10(x) if x > 0 else -math.inf

        return LargeScaleParams(
            carrier_hz=self.carrier_hz,
            pathloss_exponent=self.pathloss_exponent,
            reference_distance_m=self.reference_distance_m,
            bs_antenna_gain_db=db(self.antenna_gain),
            noise_dl_dbm=db(self.noise_dl_w) + 30.0,
            noise_bs_dbm=db(self.noise_bs_w) + 30.0,
            rician_k_db=db(self.rician_k),
            si_cancellation_db=db(self.rho),
        )

    def solver(self) -> SolverConfig:
        return SolverConfig.preset(self.preset)


# key -> (field, parser)
_KEYS = {
    "carrier_frequency": ("carrier_hz", lambda v: parse_quantity(v, "frequency")),
    "bandwidth": ("bandwidth_hz", lambda v: parse_quantity(v, "frequency")),
    "n_subcarriers": ("n_subcarriers", int),
    "subcarrier_bandwidth": ("subcarrier_hz", lambda v: parse_quantity(v, "frequency")),
    "pathloss_exponent": ("pathloss_exponent", float),
    "reference_distance": ("reference_distance_m", lambda v: parse_quantity(v, "length")),
    "antenna_gain": ("antenna_gain", lambda v: parse_quantity(v, "ratio")),
    "noise_dl": ("noise_dl_w", lambda v: parse_quantity(v, "power")),
    "noise_bs": ("noise_bs_w", lambda v: parse_quantity(v, "power")),
    "rician_k": ("rician_k", lambda v: parse_quantity(v, "ratio")),
    "si_cancellation": ("rho", lambda v: parse_quantity(v, "ratio")),
    "p_max_ul": ("p_max_ul_w", lambda v: parse_quantity(v, "power")),
    "p_max_dl": ("p_max_dl_w", lambda v: parse_quantity(v, "power")),
    "inner_radius": ("inner_radius_m", lambda v: parse_quantity(v, "length")),
    "outer_radius": ("outer_radius_m", lambda v: parse_quantity(v, "length")),
    "n_dl": ("n_dl", int),
    "n_ul": ("n_ul", int),
    "sweep_values": ("sweep_values", _parse_sweep),
    "trials": ("trials", int),
    "master_seed": ("master_seed", int),
    "preset": ("preset", str),
    "baseline2_split": ("baseline2_split", str),
    "oracle_levels": ("oracle_levels", int),
    "oracle_cap": ("oracle_cap", float),
    "interference_free": ("interference_free", _parse_bool),
    "output": ("output", str),
    "trace": ("trace", str),
}


def parse_config(text: str, **overrides) -> ExperimentConfig:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        name, parser = _KEYS[key]
        try:
            values[name] = parser(value)
        except (ValueError, KeyError) as exc:
            raise ConfigError(f"line {lineno}: {exc}") from None
    values.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentConfig(**values)


def load_config(path, **overrides) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    return parse_config(text, **overrides)


# ---------------------------------------------------------------- instances

def make_instance(config: ExperimentConfig, trial: int, p_max_dl_w: float | None = None,
                  n_users: int | None = None) -> ProblemInstance:
    """Drop ``trial`` of the configured cell; the drop ignores the DL budget."""
    k = config.n_dl if n_users is None else n_users
    j = config.n_ul if n_users is None else n_users
    rng = trial_rng(config.master_seed, trial)
    gains = sample_channel_realization(config.geometry(), config.params(),
                                       config.n_subcarriers, k, j, rng)
    rho = config.rho
    if config.interference_free:
        gains = ChannelGains(gains.H, gains.G, np.zeros_like(gains.F), gains.L_SI)
        rho = 0.0
    p_dl = config.p_max_dl_w if p_max_dl_w is None else p_max_dl_w
    return ProblemInstance.create(gains, p_dl, config.p_max_ul_w, rho,
                                  noise_dl_w=config.noise_dl_w)


@dataclass(frozen=True)
class SchemeOutcome:
    scheme: str
    throughput: float | None
    iterations: int
    allocation: Allocation | None
    report: SolveReport | None = None


def run_scheme(inst: ProblemInstance, scheme: str, config: ExperimentConfig) -> SchemeOutcome:
    """Run one scheme; solver failures and infeasible outputs give ``None``."""
    cfg = config.solver()
    report = None
    try:
        if scheme == "proposed":
            report = solve(inst, cfg)
            alloc, its = report.final_allocation, report.iterations_used
        elif scheme == "baseline1":
            run = decoupled_baseline_run(inst, cfg)
            alloc, its = run.allocation, run.iterations
        elif scheme == "baseline2":
            run = hd_baseline_run(inst, cfg, config.baseline2_split)
            alloc, its = run.allocation, run.iterations
        else:
            raise ValueError(f"unknown scheme {scheme!r}")
    except (SolverError, RoundingError) as exc:
        log.warning("%s failed: %s", scheme, exc)
        return SchemeOutcome(scheme, None, 0, None)
    feas = check_feasibility(inst, alloc)
    if not feas.feasible:
        log.warning("%s returned an infeasible allocation: %s", scheme, feas)
        return SchemeOutcome(scheme, None, its, None)
    return SchemeOutcome(scheme, system_objective(inst, alloc), its, alloc, report)


# ---------------------------------------------------------------- sweeps

@dataclass(frozen=True)
class ResultRow:
    sweep_value: float
    scheme: str
    mean_throughput: float
    std_error: float
    trials: int
    mean_iterations: float
    feasibility_failures: int


@dataclass
class SweepResult:
    rows: list
    values: tuple = ()
    # (sweep index, scheme) -> [(instance, outcome)] in trial order
    runs: dict = field(default_factory=dict, repr=False)
    traces: list = field(default_factory=list, repr=False)

    @property
    def failures(self) -> int:
        return sum(r.feasibility_failures for r in self.rows)

    @property
    def attempts(self) -> int:
        return sum(r.trials + r.feasibility_failures for r in self.rows)

    def failure_rate(self) -> float:
        return self.failures / self.attempts if self.attempts else 0.0

    def row(self, sweep_value, scheme) -> ResultRow:
        for r in self.rows:
            if r.sweep_value == sweep_value and r.scheme == scheme:
                return r
        raise KeyError((sweep_value, scheme))


def _summarize(value, scheme, outcomes) -> ResultRow:
    ok = [o for o in outcomes if o.throughput is not None]
    vals = np.array([o.throughput for o in ok], dtype=float)
    n = len(ok)
    mean = float(vals.mean()) if n else float("nan")
    se = float(vals.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    its = float(np.mean([o.iterations for o in ok])) if n else float("nan")
    return ResultRow(value, scheme, mean, se, n, its, len(outcomes) - n)


def _sweep(config, values, make, schemes) -> SweepResult:
    rows, runs, traces = [], {}, []
    for idx, value in enumerate(values):
        for scheme in schemes:
            runs[(idx, scheme)] = []
        for trial in range(config.trials):
            inst = make(value, trial)
            for scheme in schemes:
                out = run_scheme(inst, scheme, config)
                runs[(idx, scheme)].append((inst, out))
                if out.report is not None and config.trace:
                    traces.append((value, trial, out.report))
        for scheme in schemes:
            row = _summarize(value, scheme, [o for _, o in runs[(idx, scheme)]])
            log.info("sweep %g %s: %.4f bits/s/Hz (%d ok, %d failed)", value, scheme,
                     row.mean_throughput, row.trials, row.feasibility_failures)
            rows.append(row)
    result = SweepResult(rows, tuple(values), runs, traces)
    audit(result, config.master_seed)
    return result


def run_power_sweep(config: ExperimentConfig, schemes=SCHEMES) -> SweepResult:
    """Throughput versus the DL budget (``sweep_values`` in dBm).

    Each trial index is one drop reused across all budgets.
    """
    values = config.sweep_values or (10.0, 16.0, 22.0, 28.0, 34.0, 40.0, 46.0)
    return _sweep(config, values,
                  lambda v, t: make_instance(config, t, p_max_dl_w=float(dbm_to_watt(v))),
                  schemes)


def run_user_sweep(config: ExperimentConfig, schemes=SCHEMES) -> SweepResult:
    """Throughput versus the user count K = J at the configured DL budget."""
    values = config.sweep_values or (1.0, 2.0, 4.0, 8.0)
    for v in values:
        if v != int(v) or v < 1:
            raise ConfigError("user-sweep values must be positive integers")
    return _sweep(config, values, lambda v, t: make_instance(config, t, n_users=int(v)),
                  schemes)


def audit(result: SweepResult, seed: int, fraction: float = 0.1) -> int:
    """Recompute a sampled share of row means from the stored allocations."""
    keys = sorted(result.runs)
    if not keys:
        return 0
    n_pick = max(1, math.ceil(fraction * len(keys)))
    rng = np.random.default_rng(seed)
    picked = sorted(rng.choice(len(keys), size=n_pick, replace=False))
    for idx in picked:
        key = keys[idx]
        runs = result.runs[key]
        vals = [system_objective(inst, o.allocation) for inst, o in runs if o.allocation is not None]
        expected = [o.throughput for _, o in runs if o.allocation is not None]
        if vals != expected:
            raise AuditError(f"stored allocations disagree with throughputs for {key}")
        row = result.row(result.values[key[0]], key[1])
        if vals and not math.isclose(float(np.mean(vals)), row.mean_throughput,
                                     rel_tol=1e-12, abs_tol=1e-12):
            raise AuditError(f"row mean mismatch for {key}")
    return n_pick


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def rows_to_csv(rows) -> str:
    buf = io.StringIO()
    buf.write(CSV_HEADER + "\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(RESULT_COLUMNS)
    for r in rows:
        writer.writerow([_fmt(r.sweep_value), r.scheme, _fmt(r.mean_throughput),
                         _fmt(r.std_error), r.trials, _fmt(r.mean_iterations),
                         r.feasibility_failures])
    return buf.getvalue()


def traces_to_tsv(traces) -> str:
    lines = []
    for value, trial, report in traces:
        body = report.trace_tsv().splitlines()
        if not lines:
            lines.append("sweep_value\ttrial\t" + body[0])
        lines.extend(f"{_fmt(value)}\t{trial}\t{line}" for line in body[1:])
    return "\n".join(lines) + "\n" if lines else ""


# ---------------------------------------------------------------- oracle check

@dataclass(frozen=True)
class OracleRow:
    instance: int
    oracle_objective: float
    sca_objective: float
    ratio: float


@dataclass(frozen=True)
class OracleCheck:
    rows: tuple
    fraction_at_95: float
    grid_slack: float
    failures: int


def _grid_slack(inst: ProblemInstance, grid: PowerGrid) -> float:
    """Rate the grid can lose by rounding each active power down one level.

    Shrinking a power by factor c costs at most log2(1/c) per log term; the
    gap between the zero level and the lowest positive level is not covered.
    """
    fr = grid.fractions()
    fr = fr[fr > 0]
    if fr.size < 2:
        return float("inf")
    step = float(np.max(fr[1:] / fr[:-1]))
    n = inst.shape[0]
    return n * (float(np.max(inst.w)) + float(np.max(inst.mu))) * math.log2(step)


def run_oracle_check(config: ExperimentConfig) -> OracleCheck:
    """Compare the proposed scheme with the grid oracle on ``trials`` drops.

    The enumeration cap is checked on the first drop before any solve.
    """
    grid = PowerGrid(levels_per_variable=config.oracle_levels)
    first = make_instance(config, 0)
    need = enumeration_budget(first, grid)
    if need > config.oracle_cap:
        raise EnumerationTooLarge(need, config.oracle_cap)
    rows, failures = [], 0
    slack = _grid_slack(first, grid)
    for trial in range(config.trials):
        inst = first if trial == 0 else make_instance(config, trial)
        oracle = brute_force_oracle(inst, grid, cap=config.oracle_cap)
        out = run_scheme(inst, "proposed", config)
        if out.throughput is None:
            failures += 1
            continue
        ratio = out.throughput / oracle.objective if oracle.objective > 0 else 1.0
        rows.append(OracleRow(trial, oracle.objective, out.throughput, ratio))
    frac = float(np.mean([r.ratio >= 0.95 for r in rows])) if rows else 0.0
    return OracleCheck(tuple(rows), frac, slack, failures)


def oracle_to_csv(check: OracleCheck) -> str:
    buf = io.StringIO()
    buf.write(CSV_HEADER + "\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(("instance", "oracle_objective", "sca_objective", "ratio"))
    for r in check.rows:
        writer.writerow([r.instance, _fmt(r.oracle_objective), _fmt(r.sca_objective), _fmt(r.ratio)])
    writer.writerow(("summary_fraction_ratio_ge_0.95", _fmt(check.fraction_at_95),
                     "grid_slack_bps_hz", _fmt(check.grid_slack)))
    return buf.getvalue()


# ---------------------------------------------------------------- single solve

def allocation_to_csv(inst: ProblemInstance, alloc: Allocation) -> str:
    """Active slots with their powers and weighted utility."""
    buf = io.StringIO()
    buf.write(CSV_HEADER + "\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(("i", "m", "r", "p_w", "q_w", "utility_bps_hz"))
    for i, m, r in alloc.pairs():
        p, q = float(alloc.p[i, m]), float(alloc.q[i, r])
        writer.writerow([i, m, r, _fmt(p), _fmt(q), _fmt(subcarrier_utility(inst, i, m, r, p, q))])
    return buf.getvalue()


def format_report(inst: ProblemInstance, report: SolveReport, config: ExperimentConfig) -> str:
    """Human-readable summary of one solve."""
    thr = report.weighted_throughput
    lines = [
        f"instance: N_F={inst.shape[0]} K={inst.shape[1]} J={inst.shape[2]}",
        f"penalty weight: {report.eta:.6g}",
        f"outer iterations: {report.iterations_used} (converged: {report.converged})",
        "penalized objective: " + " ".join(f"{v:.6g}" for v in report.lifted_trajectory_objectives),
        f"max binary deviation before rounding: {report.max_binary_deviation:.3g}",
        f"feasibility: {report.feasibility_report}",
        f"weighted throughput: {thr:.6f} bits/s/Hz"
        f" ({thr * config.subcarrier_hz / 1e6:.4f} Mbit/s at {config.subcarrier_hz / 1e3:g} kHz"
        " per subcarrier)",
        f"active slots: {len(report.final_allocation.pairs())}",
    ]
    return "\n".join(lines) + "\n"


def with_overrides(config: ExperimentConfig, **kw) -> ExperimentConfig:
    names = {f.name for f in fields(ExperimentConfig)}
    return replace(config, **{k: v for k, v in kw.items() if k in names and v is not None})
