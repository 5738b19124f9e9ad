"""Successive convex approximation over the lifted penalized problem.

Each outer iteration linearizes the concave parts (-G and -eta*M) at the
current anchor and minimizes the resulting convex surrogate with the
interior-point engine. The surrogate upper-bounds the true penalized
objective and touches it at the anchor, so the true objective can only go
down; a guard keeps the previous anchor if round-off says otherwise.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp

from .channel import ParameterError
from .engine import ConstraintSystem, SmoothObjective, SolverError, minimize
from .model import (Allocation, FeasibilityReport, ProblemInstance, check_feasibility,
                    system_objective)
from .reform import Layout, LiftedPoint, SlotModel, Surrogate, build_constraints, penalized_objective

log = logging.getLogger(__name__)

INIT_STRATEGIES = ("greedy", "uniform", "random")


def default_eta(p_max_dl: float, noise_dl_w: float = 1.0) -> float:
    """Penalty weight ``10 * log2(1 + P_max^DL / noise)``."""
    return 10.0 * float(np.log2(1.0 + p_max_dl / noise_dl_w))


@dataclass(frozen=True)
class SolverConfig:
    """Outer-loop settings. ``eta=None`` derives the weight from the instance."""

    eta: float | None = None
    max_outer_iterations: int = 30
    outer_tol: float = 1e-6
    inner_tol: float = 1e-7
    binary_tol: float = 1e-3
    init_strategy: str = "greedy"
    seed: int = 0

    def __post_init__(self):
        if self.eta is not None and not self.eta > 0:
            raise ParameterError("eta must be positive")
        if min(self.outer_tol, self.inner_tol, self.binary_tol) <= 0:
            raise ParameterError("tolerances must be positive")
        if self.max_outer_iterations < 1:
            raise ParameterError("need at least one outer iteration")
        if self.init_strategy not in INIT_STRATEGIES:
            raise ParameterError(f"unknown init strategy {self.init_strategy!r}")

    @classmethod
    def preset(cls, name: str, **overrides) -> "SolverConfig":
        presets = {"paper-faithful": 5, "converged": 30}
        if name not in presets:
            raise ParameterError(f"unknown preset {name!r}; choose from {sorted(presets)}")
        return cls(max_outer_iterations=presets[name], **overrides)

    def eta_for(self, inst: ProblemInstance) -> float:
        if self.eta is not None:
            return float(self.eta)
        noise = inst.noise_dl_w if inst.noise_dl_w is not None else 1.0
        return default_eta(inst.p_max_dl, noise)


@dataclass(frozen=True)
class IterationRecord:
    k: int
    penalized_objective: float
    max_binary_deviation: float
    inner_iterations: int


@dataclass(frozen=True, eq=False)
class SolveReport:
    final_allocation: Allocation
    lifted_trajectory_objectives: tuple
    iterations_used: int
    converged: bool
    max_binary_deviation: float
    weighted_throughput: float
    feasibility_report: FeasibilityReport
    relaxed_point: LiftedPoint | None = None
    near_binary: bool = True
    eta: float = 0.0
    trace: tuple = field(default=(), repr=False)

    def trace_tsv(self) -> str:
        lines = ["k\tpenalized_objective\tmax_binary_deviation\tinner_iterations"]
        lines += [f"{r.k}\t{r.penalized_objective:.12g}\t{r.max_binary_deviation:.6g}\t"
                  f"{r.inner_iterations}" for r in self.trace]
        return "\n".join(lines) + "\n"


def binary_deviation(s) -> float:
    s = np.asarray(s, dtype=float)
    return float(np.max(np.minimum(np.abs(s), np.abs(1.0 - s)))) if s.size else 0.0


# ---------------------------------------------------------------- init

def _assemble_point(inst, lay: Layout, s, p_raw, q_raw) -> np.ndarray:
    """Flat lifted vector from s and raw powers, scaled into the interior."""
    si, sm, sr = lay.slots.T
    sv = s[si, sm, sr]
    pr = p_raw[lay.p_pairs[:, 0], lay.p_pairs[:, 1]]
    qr = q_raw[lay.q_pairs[:, 0], lay.q_pairs[:, 1]]
    pt = sv * pr[lay.slot_p]
    qt = sv * qr[lay.slot_q]
    # keep the C1 / C3 left-hand sides at or below half the budget
    c1 = pt.sum()
    if c1 > 0.5 * inst.p_max_dl:
        f = 0.5 * inst.p_max_dl / c1
        pr, pt = pr * f, pt * f
    j = inst.shape[2]
    use = np.bincount(sr, weights=qt, minlength=j)
    f_r = np.minimum(1.0, 0.5 * inst.p_max_ul / np.maximum(use, 1e-300))
    qt = qt * f_r[sr]
    qr = qr * f_r[lay.q_pairs[:, 1]]
    return np.concatenate((pt, qt, sv, pr, qr))


def _uniform_point(inst, lay):
    n, k, j = inst.shape
    mask = inst.slot_mask
    per_sc = mask.sum(axis=(1, 2))
    s = mask / (per_sc[:, None, None] + 1.0)
    p_raw = np.full((n, k), inst.p_max_dl / (2.0 * n))
    q_raw = np.broadcast_to(inst.p_max_ul / (2.0 * n), (n, j)).copy()
    return _assemble_point(inst, lay, s, p_raw, q_raw)


def _random_point(inst, lay, seed):
    rng = np.random.default_rng(seed)
    n, k, j = inst.shape
    mask = inst.slot_mask
    raw = rng.uniform(0.05, 1.0, (n, k, j)) * mask
    total = raw.sum(axis=(1, 2))
    share = rng.uniform(0.2, 0.9, n)
    s = raw * (share / np.maximum(total, 1e-300))[:, None, None]
    p_raw = rng.uniform(0.1, 1.0, (n, k)) * inst.p_max_dl / (2.0 * n)
    q_raw = rng.uniform(0.1, 1.0, (n, j)) * inst.p_max_ul / (2.0 * n)
    return _assemble_point(inst, lay, s, p_raw, q_raw)


def _plan_value(inst, H, F, G, RL, plan_m, plan_r, dl_on, ul_on):
    """Approximate objective of candidate schedules with equal power split.

    Plans are arrays of shape (O, N_F); the DL budget is split evenly over
    DL-active subcarriers and each UL user's budget over its subcarriers.
    """
    n, k, j = inst.shape
    idx = np.arange(n)
    n_dl = dl_on.sum(axis=1, keepdims=True)
    p = np.where(dl_on, inst.p_max_dl / np.maximum(n_dl, 1), 0.0)
    counts = np.zeros((plan_m.shape[0], j))
    rows = np.repeat(np.arange(plan_m.shape[0]), n)
    np.add.at(counts, (rows, plan_r.ravel()), ul_on.ravel())
    per_r = inst.p_max_ul[None, :] / np.maximum(counts, 1)
    q = np.where(ul_on, np.take_along_axis(per_r, plan_r, axis=1), 0.0)
    h = H[idx, plan_m, plan_r]
    f = F[idx, plan_m, plan_r]
    g = G[idx, plan_m, plan_r]
    rl = RL[idx, plan_m, plan_r]
    u = inst.w[plan_m] * np.log1p(h * p / (f * q + 1.0)) + \
        inst.mu[plan_r] * np.log1p(g * q / (rl * p + 1.0))
    return u.sum(axis=1)


def greedy_schedule(inst: ProblemInstance, max_passes: int = 20):
    """Coordinate-ascent schedule search under an equal-power heuristic.

    Per subcarrier the options are idle, DL-only, UL-only or FD on any
    allowed slot. Returns ``(m, r, dl_on, ul_on)`` arrays of length N_F.
    """
    n, k, j = inst.shape
    H, F, G, RL = (np.asarray(a) for a in inst.slot_gains())
    mask = inst.slot_mask
    opts = [(0, 0, False, False)]
    for m in range(k):
        for r in range(j):
            opts += [(m, r, True, True), (m, r, True, False), (m, r, False, True)]
    opts = np.array(opts, dtype=int)
    plan = np.zeros((n, 4), dtype=int)
    for _ in range(max_passes):
        changed = False
        for i in range(n):
            ok = mask[i, opts[:, 0], opts[:, 1]] | ((opts[:, 2] == 0) & (opts[:, 3] == 0))
            cand = opts[ok]
            trial = np.repeat(plan[None], len(cand), axis=0)
            trial[:, i] = cand
            vals = _plan_value(inst, H, F, G, RL, trial[..., 0], trial[..., 1],
                               trial[..., 2].astype(bool), trial[..., 3].astype(bool))
            cur = np.flatnonzero((cand == plan[i]).all(axis=1))
            best = int(np.argmax(vals))
            if cur.size and vals[best] <= vals[cur[0]] * (1.0 + 1e-12) + 1e-15:
                continue
            plan[i] = cand[best]
            changed = True
        if not changed:
            break
    return plan[:, 0], plan[:, 1], plan[:, 2].astype(bool), plan[:, 3].astype(bool)


def _greedy_point(inst, lay):
    n, k, j = inst.shape
    mask = inst.slot_mask
    m, r, dl_on, ul_on = greedy_schedule(inst)
    per_sc = mask.sum(axis=(1, 2))
    s = mask / (per_sc[:, None, None] + 1.0)
    n_dl = max(int(dl_on.sum()), 1)
    ul_count = np.bincount(r[ul_on], minlength=j)
    # weak but nonzero power on directions the plan leaves off
    p_raw = np.full((n, k), 1e-3 * inst.p_max_dl / n)
    q_raw = np.broadcast_to(1e-3 * inst.p_max_ul / n, (n, j)).copy()
    for i in range(n):
        if not (dl_on[i] or ul_on[i]):
            continue
        s[i] = mask[i] * (0.05 / max(per_sc[i] - 1, 1))
        s[i, m[i], r[i]] = 0.9
        if dl_on[i]:
            p_raw[i, m[i]] = 0.5 * inst.p_max_dl / n_dl
        if ul_on[i]:
            q_raw[i, r[i]] = 0.5 * inst.p_max_ul[r[i]] / ul_count[r[i]]
    return _assemble_point(inst, lay, s, p_raw, q_raw)


def _initial_vector(inst, lay, config):
    if config.init_strategy == "uniform":
        return _uniform_point(inst, lay)
    if config.init_strategy == "random":
        return _random_point(inst, lay, config.seed)
    return _greedy_point(inst, lay)


def initial_point(inst: ProblemInstance, config: SolverConfig | None = None) -> LiftedPoint:
    """Strictly feasible starting point for the outer loop."""
    config = config or SolverConfig()
    lay = Layout(inst)
    return LiftedPoint.from_vector(lay, _initial_vector(inst, lay, config))


# ---------------------------------------------------------------- outer loop

def _recenter(x, center, cons: ConstraintSystem):
    """Pull a (possibly near-boundary) iterate slightly toward ``center``."""
    start = 0.99 * x + 0.01 * center
    if cons.slacks(start).min() <= 0.0:
        return center
    return start


def _sca_loop(obj_true, make_surrogate, cons, x0, config, deviation=None, label="sca"):
    """Generic monotone SCA iteration; returns (x, trajectory, records, converged)."""
    x = x0
    cur = obj_true(x)
    traj = [cur]
    records = []
    converged = False
    for k in range(1, config.max_outer_iterations + 1):
        sur = make_surrogate(x)
        try:
            sol = minimize(sur, cons, _recenter(x, x0, cons), tol=config.inner_tol)
        except SolverError as exc:
            raise type(exc)(f"{label}: outer iteration {k}: {exc}") from exc
        new = obj_true(sol.point)
        if not np.isfinite(new) or new > cur:
            # round-off only: the surrogate cannot raise the true objective
            log.debug("%s: iteration %d did not improve (%.3g); stopping", label, k, new - cur)
            converged = True
            break
        x = sol.point
        records.append(IterationRecord(k, new, deviation(x) if deviation else 0.0,
                                       sol.newton_iterations))
        traj.append(new)
        done = abs(new - cur) <= config.outer_tol * (1.0 + abs(cur))
        cur = new
        if done:
            converged = True
            break
    return x, traj, records, converged


def solve(inst: ProblemInstance, config: SolverConfig | None = None) -> SolveReport:
    """Run the SCA outer loop, then round and refine to a binary allocation."""
    config = config or SolverConfig()
    eta = config.eta_for(inst)
    lay = Layout(inst)
    cons = build_constraints(inst, lay)
    x0 = _initial_vector(inst, lay, config)

    def true_obj(x):
        return penalized_objective(inst, x, eta, lay)

    def make(x):
        return Surrogate(inst, lay, x, eta).objective()

    x, traj, records, converged = _sca_loop(
        true_obj, make, cons, x0, config, deviation=lambda v: binary_deviation(v[lay.sl_s]))
    relaxed = LiftedPoint.from_vector(lay, x)
    dev = binary_deviation(x[lay.sl_s])
    near_binary = dev <= config.binary_tol
    if not near_binary:
        log.info("relaxed s deviates from binary by %.3g (flagged)", dev)
    alloc = _round_and_refine(inst, relaxed, config, lay)
    return SolveReport(
        final_allocation=alloc,
        lifted_trajectory_objectives=tuple(traj),
        iterations_used=len(traj) - 1,
        converged=converged,
        max_binary_deviation=dev,
        weighted_throughput=system_objective(inst, alloc),
        feasibility_report=check_feasibility(inst, alloc),
        relaxed_point=relaxed,
        near_binary=near_binary,
        eta=eta,
        trace=tuple(records),
    )


# ---------------------------------------------------------------- rounding

def round_schedule(inst: ProblemInstance, s) -> np.ndarray:
    """Per subcarrier keep the argmax slot if its relaxed s is at least 0.5."""
    s = np.where(inst.slot_mask, np.asarray(s, dtype=float), -np.inf)
    n, k, j = inst.shape
    out = np.zeros((n, k, j), dtype=np.int8)
    flat = s.reshape(n, -1)
    best = np.argmax(flat, axis=1)  # first maximum = lowest (m, r)
    keep = flat[np.arange(n), best] >= 0.5
    for i in np.flatnonzero(keep):
        out[i].flat[best[i]] = 1
    return out


class _PowerProblem:
    """Power-only DC program over a fixed set of active slots."""

    def __init__(self, inst: ProblemInstance, slots: np.ndarray):
        self.inst = inst
        self.slots = slots
        self.model = SlotModel.from_instance(inst, slots)
        a = len(slots)
        r = slots[:, 2]
        users = np.unique(r)
        rows = [np.zeros(a, dtype=int)]
        cols = [np.arange(a)]
        b = [inst.p_max_dl]
        for row, u in enumerate(users, start=1):
            idx = np.flatnonzero(r == u)
            rows.append(np.full(idx.size, row))
            cols.append(a + idx)
            b.append(float(inst.p_max_ul[u]))
        rows, cols = np.concatenate(rows), np.concatenate(cols)
        A = sp.csr_matrix((np.ones(rows.size), (rows, cols)), shape=(len(b), 2 * a))
        self.cons = ConstraintSystem(A, np.array(b), np.zeros(2 * a), np.full(2 * a, np.inf))
        self.a = a

    def true_obj(self, x):
        pt, qt = x[:self.a], x[self.a:]
        return float(self.model.f_parts(pt, qt)[0] - self.model.g_value(pt, qt))

    def surrogate(self, anchor) -> SmoothObjective:
        m, a = self.model, self.a
        apt, aqt = anchor[:a].copy(), anchor[a:].copy()
        g0 = m.g_value(apt, aqt)
        ggp, ggq = m.g_grad(apt, aqt)
        idx = np.arange(a)
        hr = np.concatenate((idx, idx, a + idx, a + idx))
        hc = np.concatenate((idx, a + idx, idx, a + idx))

        def fun(x):
            pt, qt = x[:a], x[a:]
            fv, gp, gq, _ = m.f_parts(pt, qt)
            val = fv - (g0 + ggp @ (pt - apt) + ggq @ (qt - aqt))
            return float(val), np.concatenate((gp - ggp, gq - ggq))

        def hess(x):
            _, _, _, (hpp, hpq, hqq) = m.f_parts(x[:a], x[a:])
            return sp.csr_matrix((np.concatenate((hpp, hpq, hpq, hqq)), (hr, hc)),
                                 shape=(2 * a, 2 * a))

        return SmoothObjective(fun, hess)

    def interior_start(self, pt, qt):
        """Scale relaxed powers into the strict interior of C1/C3."""
        inst, a = self.inst, self.a
        floor_p = 1e-6 * inst.p_max_dl / max(a, 1)
        p = np.maximum(np.asarray(pt, dtype=float), floor_p)
        r = self.slots[:, 2]
        q = np.maximum(np.asarray(qt, dtype=float), 1e-6 * inst.p_max_ul[r] / max(a, 1))
        if p.sum() >= 0.999 * inst.p_max_dl:
            p *= 0.999 * inst.p_max_dl / p.sum()
        use = np.bincount(r, weights=q, minlength=inst.shape[2])
        f = np.where(use >= 0.999 * inst.p_max_ul, 0.999 * inst.p_max_ul / np.maximum(use, 1e-300), 1.0)
        return np.concatenate((p, q * f[r]))


def refine_powers(inst: ProblemInstance, schedule, pt, qt, config: SolverConfig):
    """Re-optimize powers for a fixed binary schedule, starting from (pt, qt).

    ``pt`` / ``qt`` are per active slot in (i, m, r) order. Returns an
    Allocation.
    """
    n, k, j = inst.shape
    slots = np.argwhere(np.asarray(schedule) > 0)
    if slots.size == 0:
        return Allocation.zeros(inst.shape)
    prob = _PowerProblem(inst, slots)
    x0 = prob.interior_start(pt, qt)
    cfg = replace(config, max_outer_iterations=max(config.max_outer_iterations, 30))
    x, _, _, _ = _sca_loop(prob.true_obj, prob.surrogate, prob.cons, x0, cfg, label="refine")
    a = len(slots)
    p = np.zeros((n, k))
    q = np.zeros((n, j))
    p[slots[:, 0], slots[:, 1]] = x[:a]
    q[slots[:, 0], slots[:, 2]] = x[a:]
    # the barrier keeps powers strictly inside; clip round-off on the budgets
    p = np.maximum(p, 0.0)
    q = np.maximum(q, 0.0)
    s = np.zeros((n, k, j), dtype=np.int8)
    s[slots[:, 0], slots[:, 1], slots[:, 2]] = 1
    return Allocation(p, q, s)


def _round_and_refine(inst, pt: LiftedPoint, config, lay=None):
    sched = round_schedule(inst, pt.s)
    slots = np.argwhere(sched > 0)
    si, sm, sr = slots.T if slots.size else (np.array([], int),) * 3
    return refine_powers(inst, sched, pt.p_tilde[si, sm, sr], pt.q_tilde[si, sm, sr], config)


def round_and_refine(inst: ProblemInstance, pt: LiftedPoint,
                     config: SolverConfig | None = None) -> Allocation:
    """Binary schedule from relaxed s plus power re-optimization."""
    return _round_and_refine(inst, pt, config or SolverConfig())
