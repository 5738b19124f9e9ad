"""Reference schemes: grid-exhaustive oracle, half-duplex and decoupled baselines."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize as nm_minimize

from .channel import ChannelGains, ParameterError
from .model import LN2, Allocation, ProblemInstance, system_objective
from .sca import SolverConfig, solve


class EnumerationTooLarge(ValueError):
    """The oracle's enumeration budget exceeds the configured cap."""

    def __init__(self, required: float, cap: float):
        super().__init__(f"oracle enumeration needs ~{required:.3g} candidates, cap is {cap:.3g}")
        self.required = required
        self.cap = cap


@dataclass(frozen=True)
class PowerGrid:
    """Discrete power levels per variable, as fractions of its budget."""

    levels_per_variable: int = 32
    spacing: str = "logarithmic"
    includes_zero: bool = True
    decades: float = 3.0

    def __post_init__(self):
        if self.levels_per_variable < 2:
            raise ParameterError("need at least two grid levels")
        if self.spacing not in ("linear", "logarithmic"):
            raise ParameterError("spacing must be 'linear' or 'logarithmic'")

    def fractions(self) -> np.ndarray:
        n = self.levels_per_variable
        if self.spacing == "linear":
            lv = np.linspace(1.0 / n, 1.0, n)
        else:
            lv = np.logspace(-self.decades, 0.0, n)
        lv[-1] = 1.0
        return np.concatenate(([0.0], lv)) if self.includes_zero else lv

    def values(self, budget: float) -> np.ndarray:
        return budget * self.fractions()


@dataclass(frozen=True, eq=False)
class OracleResult:
    allocation: Allocation
    objective: float
    nodes: int
    required_budget: float


def enumeration_budget(inst: ProblemInstance, grid: PowerGrid) -> float:
    """Nominal size of the naive (assignment x grid tuple) enumeration."""
    n_levels = len(grid.fractions())
    per_sc = inst.slot_mask.sum(axis=(1, 2)) + 1
    log_total = float(np.sum(np.log10(per_sc))) + 2 * inst.shape[0] * math.log10(n_levels)
    return 10.0 ** log_total


class _Subcarrier:
    """Non-dominated (slot, p, q) options of one subcarrier.

    For each UL user r the DL user is chosen by max over m (it only changes
    the utility). An option is kept only if no option of the same r with
    component-wise smaller-or-equal powers is at least as good; the grid
    optimum is unaffected because a dominating option fits in any budget the
    dominated one fits in.
    """

    def __init__(self, inst, i, p_lv, q_lv):
        n, k, j = inst.shape
        g = inst.gains
        mask = inst.slot_mask[i]
        self.p_lv = p_lv
        self.q_lv = q_lv  # (J, L)
        L = len(p_lv)
        self.tables = {}
        self.argm = {}
        self.prefix = {}
        self.prefix_arg = {}
        rows = []
        for r in range(j):
            ms = np.flatnonzero(mask[:, r])
            if ms.size == 0:
                continue
            P = p_lv[:, None]
            Q = q_lv[r][None, :]
            tab = np.full((len(ms), L, L), -np.inf)
            for t, m in enumerate(ms):
                dl = np.log1p(g.H[i, m] * P / (g.F[i, r, m] * Q + 1.0))
                ul = np.log1p(g.G[i, r] * Q / (inst.rho * g.L_SI[i] * P + 1.0))
                tab[t] = (inst.w[m] * dl + inst.mu[r] * ul) / LN2
            best = np.argmax(tab, axis=0)
            u = np.take_along_axis(tab, best[None], axis=0)[0]
            self.tables[r] = u
            self.argm[r] = ms[best]
            # prefix max over (p <= p_a, q <= q_b) and its flat argmax
            pm = u.copy()
            arg = np.arange(L * L).reshape(L, L)
            for a in range(1, L):
                take = pm[a - 1] > pm[a]
                pm[a] = np.where(take, pm[a - 1], pm[a])
                arg[a] = np.where(take, arg[a - 1], arg[a])
            for b in range(1, L):
                take = pm[:, b - 1] > pm[:, b]
                pm[:, b] = np.where(take, pm[:, b - 1], pm[:, b])
                arg[:, b] = np.where(take, arg[:, b - 1], arg[:, b])
            self.prefix[r] = pm
            self.prefix_arg[r] = arg
            left = np.full((L, L), -np.inf)
            left[1:] = pm[:-1]
            down = np.full((L, L), -np.inf)
            down[:, 1:] = pm[:, :-1]
            keep = u > np.maximum(left, down)
            keep[0, 0] = False  # idle is the implicit fallback
            a_idx, b_idx = np.nonzero(keep)
            for a, b in zip(a_idx, b_idx):
                rows.append((r, a, b, u[a, b]))
        if rows:
            arr = np.array(rows)
            order = np.lexsort((arr[:, 2], arr[:, 1], arr[:, 0]))
            arr = arr[order]
        else:
            arr = np.zeros((0, 4))
        self.opt_r = arr[:, 0].astype(int)
        self.opt_a = arr[:, 1].astype(int)
        self.opt_b = arr[:, 2].astype(int)
        self.opt_u = arr[:, 3]
        self.opt_p = p_lv[self.opt_a]
        self.opt_q = np.array([q_lv[r][b] for r, b in zip(self.opt_r, self.opt_b)])

    def lagrangian(self, lam, nu):
        if self.opt_u.size == 0:
            return 0.0
        return max(0.0, float(np.max(self.opt_u - lam * self.opt_p - nu[self.opt_r] * self.opt_q)))

    def best_within(self, rp, rq):
        """Exact best utility within remaining budgets; rp (S,), rq (S, J)."""
        out = np.zeros(len(rp))
        a = np.searchsorted(self.p_lv, rp * (1 + 1e-12), side="right") - 1
        for r, pm in self.prefix.items():
            b = np.searchsorted(self.q_lv[r], rq[:, r] * (1 + 1e-12), side="right") - 1
            ok = (a >= 0) & (b >= 0)
            val = np.where(ok, pm[np.maximum(a, 0), np.maximum(b, 0)], 0.0)
            out = np.maximum(out, val)
        return out

    def argbest_within(self, rp, rq):
        """(r, a, b) of the best option within a single budget pair or None."""
        best, choice = 0.0, None
        a = int(np.searchsorted(self.p_lv, rp * (1 + 1e-12), side="right") - 1)
        for r, pm in self.prefix.items():
            b = int(np.searchsorted(self.q_lv[r], rq[r] * (1 + 1e-12), side="right") - 1)
            if a < 0 or b < 0:
                continue
            if pm[a, b] > best:
                best = pm[a, b]
                flat = self.prefix_arg[r][a, b]
                choice = (r, flat // len(self.p_lv), flat % len(self.p_lv))
        return choice, best


def _dual_multipliers(subs, p_max, q_max):
    """Multipliers minimizing the Lagrangian bound (any value is valid)."""
    j = len(q_max)
    scale_u = max(float(np.mean([s.opt_u.max() if s.opt_u.size else 1.0 for s in subs])), 1e-9)

    def bound(z):
        lam, nu = np.exp(z[0]), np.exp(z[1:])
        return sum(s.lagrangian(lam, nu) for s in subs) + lam * p_max + float(nu @ q_max)

    z0 = np.concatenate(([math.log(scale_u / p_max)], np.log(scale_u / q_max)))
    res = nm_minimize(bound, z0, method="Nelder-Mead",
                      options={"maxiter": 400 * (1 + j), "xatol": 1e-4, "fatol": 1e-9})
    z = res.x if res.fun <= bound(z0) else z0
    return np.exp(z[0]), np.exp(z[1:])


def brute_force_oracle(inst: ProblemInstance, grid: PowerGrid | None = None,
                       cap: float = 1e16, chunk: int = 200_000) -> OracleResult:
    """Grid-optimal allocation by exhaustive constrained enumeration.

    Every (assignment, grid power tuple) satisfying C1/C3/C6 is covered;
    subtrees whose valid upper bound cannot beat the incumbent are skipped,
    which leaves the optimum unchanged.
    """
    grid = grid or PowerGrid()
    required = enumeration_budget(inst, grid)
    if required > cap:
        raise EnumerationTooLarge(required, cap)
    n, k, j = inst.shape
    p_lv = grid.values(inst.p_max_dl)
    q_lv = np.stack([grid.values(b) for b in inst.p_max_ul])
    subs = [_Subcarrier(inst, i, p_lv, q_lv) for i in range(n)]
    lam, nu = _dual_multipliers(subs, inst.p_max_dl, inst.p_max_ul)
    phi = np.array([s.lagrangian(lam, nu) for s in subs])
    phi_tail = np.concatenate((np.cumsum(phi[::-1])[::-1], [0.0]))  # sum over i >= t

    best = {"val": 0.0, "path": None}
    nodes = 0

    def upper(t, rp, rq):
        """Bound on subcarriers t..n-1 given remaining budgets."""
        ub1 = phi_tail[t] + lam * rp + rq @ nu
        ub2 = np.zeros(len(rp))
        for s in subs[t:]:
            ub2 += s.best_within(rp, rq)
        return np.minimum(ub1, ub2)

    def expand(t, val, rp, rq, path):
        nonlocal nodes
        nodes += len(val)
        s = subs[t]
        if t == n - 1:
            last = s.best_within(rp, rq)
            tot = val + last
            idx = int(np.argmax(tot))
            if tot[idx] > best["val"] + 1e-12:
                choice, _ = s.argbest_within(rp[idx], rq[idx])
                best["val"] = float(tot[idx])
                best["path"] = list(path[idx]) + [choice]
            return
        # children: idle plus every non-dominated option of subcarrier t
        n_opt = len(s.opt_u) + 1
        o_u = np.concatenate(([0.0], s.opt_u))
        o_p = np.concatenate(([0.0], s.opt_p))
        o_q = np.zeros((n_opt, j))
        if n_opt > 1:
            o_q[np.arange(1, n_opt), s.opt_r] = s.opt_q
        for lo in range(0, len(val), max(1, chunk // n_opt)):
            hi = min(len(val), lo + max(1, chunk // n_opt))
            cv = (val[lo:hi, None] + o_u[None, :]).ravel()
            crp = (rp[lo:hi, None] - o_p[None, :]).ravel()
            crq = (rq[lo:hi, None, :] - o_q[None, :, :]).reshape(-1, j)
            ok = (crp >= -1e-12 * inst.p_max_dl) & np.all(crq >= -1e-12 * inst.p_max_ul, axis=1)
            parent = np.repeat(np.arange(lo, hi), n_opt)[ok]
            opt = np.tile(np.arange(n_opt), hi - lo)[ok]
            cv, crp, crq = cv[ok], np.maximum(crp[ok], 0.0), np.maximum(crq[ok], 0.0)
            ub = cv + upper(t + 1, crp, crq)
            keep = ub > best["val"] + 1e-12
            if not keep.any():
                continue
            order = np.argsort(-ub[keep], kind="stable")
            sel = np.flatnonzero(keep)[order]
            new_path = [path[pp] + [int(oo) - 1] for pp, oo in zip(parent[sel], opt[sel])]
            # recurse in slices so good incumbents prune later siblings
            step = max(1, chunk // 64)
            for a in range(0, len(sel), step):
                b = a + step
                sub = sel[a:b]
                sub_ub = ub[sub]
                if sub_ub.max() <= best["val"] + 1e-12:
                    break
                live = sub_ub > best["val"] + 1e-12
                sub = sub[live]
                paths = [p for p, lv in zip(new_path[a:b], live) if lv]
                expand(t + 1, cv[sub], crp[sub], crq[sub], paths)

    expand(0, np.zeros(1), np.array([inst.p_max_dl]), inst.p_max_ul[None, :].copy(), [[]])

    p = np.zeros((n, k))
    q = np.zeros((n, j))
    s_arr = np.zeros((n, k, j), dtype=np.int8)
    path = best["path"] or []
    for i, choice in enumerate(path):
        sub = subs[i]
        if choice is None or (isinstance(choice, int) and choice < 0):
            continue
        if isinstance(choice, tuple):
            r, a, b = choice
        else:
            r, a, b = sub.opt_r[choice], sub.opt_a[choice], sub.opt_b[choice]
        m = int(sub.argm[r][a, b])
        s_arr[i, m, r] = 1
        p[i, m] = p_lv[a]
        q[i, r] = q_lv[r][b]
    alloc = Allocation(p, q, s_arr)
    return OracleResult(alloc, system_objective(inst, alloc), nodes, required)


# ---------------------------------------------------------------- baselines

def _with_dummies(inst: ProblemInstance, dummy_dl: bool, dummy_ul: bool, H=None, G=None,
                  F=None, rho=None, w=None, mu=None, p_ul=None, allowed=None):
    """Instance with optional zero-gain, zero-weight dummy users appended."""
    g = inst.gains
    H = g.H if H is None else H
    G = g.G if G is None else G
    F = g.F if F is None else F
    w = inst.w if w is None else w
    mu = inst.mu if mu is None else mu
    p_ul = inst.p_max_ul if p_ul is None else p_ul
    n = g.n_subcarriers
    if dummy_dl:
        H = np.concatenate((H, np.zeros((n, 1))), axis=1)
        F = np.concatenate((F, np.zeros((n, F.shape[1], 1))), axis=2)
        w = np.concatenate((w, [0.0]))
    if dummy_ul:
        G = np.concatenate((G, np.zeros((n, 1))), axis=1)
        F = np.concatenate((F, np.zeros((n, 1, F.shape[2]))), axis=1)
        mu = np.concatenate((mu, [0.0]))
        p_ul = np.concatenate((p_ul, [float(np.min(inst.p_max_ul))]))
    gains = ChannelGains(H, G, F, g.L_SI)
    return ProblemInstance(gains, w, mu, inst.p_max_dl, p_ul,
                           inst.rho if rho is None else rho, allowed, inst.noise_dl_w)


@dataclass(frozen=True)
class BaselineRun:
    allocation: Allocation
    iterations: int


def hd_baseline(inst: ProblemInstance, config: SolverConfig | None = None,
                split: str = "adaptive") -> Allocation:
    """Half-duplex scheme; see :func:`hd_baseline_run`."""
    return hd_baseline_run(inst, config, split).allocation


def decoupled_baseline(inst: ProblemInstance, config: SolverConfig | None = None) -> Allocation:
    """Decoupled DL-then-UL scheme; see :func:`decoupled_baseline_run`."""
    return decoupled_baseline_run(inst, config).allocation


def hd_baseline_run(inst: ProblemInstance, config: SolverConfig | None = None,
                    split: str = "adaptive") -> BaselineRun:
    """Half-duplex scheme: every subcarrier carries DL or UL traffic, never both.

    ``split="adaptive"`` lets the solver choose the direction per subcarrier;
    ``split="band"`` reserves the first half of the subcarriers for DL and
    the rest for UL, as in a fixed frequency-division layout.
    """
    if split not in ("adaptive", "band"):
        raise ParameterError("split must be 'adaptive' or 'band'")
    config = config or SolverConfig()
    n, k, j = inst.shape
    F0 = np.zeros_like(inst.gains.F)
    allowed = np.zeros((n, k + 1, j + 1), dtype=bool)
    dl_band = np.ones(n, dtype=bool)
    ul_band = np.ones(n, dtype=bool)
    if split == "band":
        n_dl = (n + 1) // 2
        dl_band[n_dl:] = False
        ul_band[:n_dl] = False
    allowed[dl_band, :k, j] = True
    allowed[ul_band, k, :j] = True
    aug = _with_dummies(inst, True, True, F=F0, rho=0.0, allowed=allowed)
    rep = solve(aug, config)
    a = rep.final_allocation
    p = np.zeros((n, k))
    q = np.zeros((n, j))
    s = np.zeros((n, k, j), dtype=np.int8)
    for i, m, r in a.pairs():
        if r == j:  # DL slot paired with the dummy UL user
            s[i, m, 0] = 1
            p[i, m] = a.p[i, m]
        else:
            s[i, 0, r] = 1
            q[i, r] = a.q[i, r]
    return BaselineRun(Allocation(p, q, s), rep.iterations_used)


def decoupled_baseline_run(inst: ProblemInstance,
                           config: SolverConfig | None = None) -> BaselineRun:
    """Two-stage scheme: DL scheduling first, then UL on the fixed DL profile.

    Stage 1 ignores the UL entirely. Stage 2 sees the SI from the stage-1 DL
    powers as extra noise and ignores the CCI it causes at the DL users.
    """
    config = config or SolverConfig()
    n, k, j = inst.shape
    g = inst.gains
    # stage 1: DL users against a silent dummy UL user
    dl = _with_dummies(inst, False, True, G=np.zeros((n, 0)), F=np.zeros((n, 0, k)),
                       mu=np.zeros(0), p_ul=np.zeros(0), rho=0.0)
    rep1 = solve(dl, config)
    a1 = rep1.final_allocation
    p = np.array(a1.p)
    dl_user = np.full(n, -1)
    for i, m, _ in a1.pairs():
        dl_user[i] = m
    # stage 2: UL users against a silent dummy DL user, SI as fixed noise
    si = inst.rho * g.L_SI * p.sum(axis=1)
    G_eff = g.G / (si[:, None] + 1.0)
    ul = _with_dummies(inst, True, False, H=np.zeros((n, 0)), G=G_eff, F=np.zeros((n, j, 0)),
                       w=np.zeros(0), rho=0.0)
    rep2 = solve(ul, config)
    a2 = rep2.final_allocation
    q = np.array(a2.q)
    s = np.zeros((n, k, j), dtype=np.int8)
    ul_user = np.full(n, -1)
    for i, _, r in a2.pairs():
        ul_user[i] = r
    for i in range(n):
        m, r = dl_user[i], ul_user[i]
        if m < 0 and r < 0:
            continue
        s[i, max(m, 0), max(r, 0)] = 1
        if m < 0:
            p[i] = 0.0
        if r < 0:
            q[i] = 0.0
    return BaselineRun(Allocation(p, q, s), rep1.iterations_used + rep2.iterations_used)
