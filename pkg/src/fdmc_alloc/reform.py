"""Big-M lifting, binary penalty and difference-of-convex split.

Coordinates of a lifted point are flattened as five consecutive blocks
``[p_tilde | q_tilde | s | p_raw | q_raw]``. Inside each block entries follow
(i outer, m middle, r inner) order, restricted to the instance's allowed
slots; ``p_raw`` / ``q_raw`` only carry the (i, m) / (i, r) pairs that touch
at least one allowed slot.

All logarithms are natural internally and scaled by 1/ln 2 on output, so
values are in bits/s/Hz.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .engine import ConstraintSystem, SmoothObjective
from .model import LN2, Allocation, ProblemInstance


class RoundingError(ValueError):
    """Relaxed subcarrier indicators are not close enough to binary."""

    def __init__(self, max_deviation: float):
        super().__init__(f"relaxed s deviates from binary by {max_deviation:.3g}")
        self.max_deviation = max_deviation


@dataclass(frozen=True)
class SlotModel:
    """Per-slot gains and weights for a list of (i, m, r) slots."""

    H: np.ndarray
    F: np.ndarray
    G: np.ndarray
    RL: np.ndarray
    w: np.ndarray
    mu: np.ndarray

    @classmethod
    def from_instance(cls, inst: ProblemInstance, slots: np.ndarray) -> "SlotModel":
        H, F, G, RL = inst.slot_gains()
        i, m, r = slots[:, 0], slots[:, 1], slots[:, 2]
        return cls(H[i, m, r], F[i, m, r], G[i, m, r], RL[i, m, r], inst.w[m], inst.mu[r])

    def f_parts(self, pt, qt):
        """Value, gradient and 2x2 Hessian blocks of the convex part F."""
        a = 1.0 + self.H * pt + self.F * qt
        b = 1.0 + self.G * qt + self.RL * pt
        val = -np.sum(self.w * np.log(a) + self.mu * np.log(b)) / LN2
        wa, mb = self.w / a, self.mu / b
        gp = -(wa * self.H + mb * self.RL) / LN2
        gq = -(wa * self.F + mb * self.G) / LN2
        wa2, mb2 = wa / a, mb / b
        hpp = (wa2 * self.H ** 2 + mb2 * self.RL ** 2) / LN2
        hpq = (wa2 * self.H * self.F + mb2 * self.RL * self.G) / LN2
        hqq = (wa2 * self.F ** 2 + mb2 * self.G ** 2) / LN2
        return val, gp, gq, (hpp, hpq, hqq)

    def g_value(self, pt, qt) -> float:
        return float(-np.sum(self.w * np.log1p(self.F * qt) + self.mu * np.log1p(self.RL * pt)) / LN2)

    def g_grad(self, pt, qt):
        gp = -self.mu * self.RL / ((1.0 + self.RL * pt) * LN2)
        gq = -self.w * self.F / ((1.0 + self.F * qt) * LN2)
        return gp, gq

    def utility(self, pt, qt) -> np.ndarray:
        dl = np.log1p(self.H * pt / (self.F * qt + 1.0))
        ul = np.log1p(self.G * qt / (self.RL * pt + 1.0))
        return (self.w * dl + self.mu * ul) / LN2


class Layout:
    """Index bookkeeping between (N_F, K, J) arrays and flat coordinates."""

    def __init__(self, inst: ProblemInstance):
        self.shape = inst.shape
        mask = inst.slot_mask
        self.slots = np.argwhere(mask)
        self.n_slots = len(self.slots)
        self.p_pairs = np.argwhere(mask.any(axis=2))
        self.q_pairs = np.argwhere(mask.any(axis=1))
        n, k, j = self.shape
        p_pos = -np.ones((n, k), dtype=int)
        p_pos[self.p_pairs[:, 0], self.p_pairs[:, 1]] = np.arange(len(self.p_pairs))
        q_pos = -np.ones((n, j), dtype=int)
        q_pos[self.q_pairs[:, 0], self.q_pairs[:, 1]] = np.arange(len(self.q_pairs))
        si, sm, sr = self.slots[:, 0], self.slots[:, 1], self.slots[:, 2]
        self.slot_p = p_pos[si, sm]
        self.slot_q = q_pos[si, sr]
        S = self.n_slots
        self.sl_pt = slice(0, S)
        self.sl_qt = slice(S, 2 * S)
        self.sl_s = slice(2 * S, 3 * S)
        self.sl_p = slice(3 * S, 3 * S + len(self.p_pairs))
        self.sl_q = slice(3 * S + len(self.p_pairs), 3 * S + len(self.p_pairs) + len(self.q_pairs))
        self.dim = self.sl_q.stop
        self.model = SlotModel.from_instance(inst, self.slots)
        self.p_budget = inst.p_max_dl
        self.q_budget = inst.p_max_ul[sr]

    def split(self, x):
        return x[self.sl_pt], x[self.sl_qt], x[self.sl_s], x[self.sl_p], x[self.sl_q]


@dataclass(frozen=True, eq=False)
class LiftedPoint:
    """Iterate of the lifted problem; arrays use (N_F, K, J) / (N_F, K) / (N_F, J)."""

    p_tilde: np.ndarray
    q_tilde: np.ndarray
    s: np.ndarray
    p_raw: np.ndarray
    q_raw: np.ndarray

    def to_vector(self, lay: Layout) -> np.ndarray:
        si, sm, sr = lay.slots.T
        return np.concatenate((
            self.p_tilde[si, sm, sr], self.q_tilde[si, sm, sr], self.s[si, sm, sr],
            self.p_raw[lay.p_pairs[:, 0], lay.p_pairs[:, 1]],
            self.q_raw[lay.q_pairs[:, 0], lay.q_pairs[:, 1]],
        ))

    @classmethod
    def from_vector(cls, lay: Layout, x) -> "LiftedPoint":
        n, k, j = lay.shape
        pt, qt, s, praw, qraw = lay.split(np.asarray(x, dtype=float))
        si, sm, sr = lay.slots.T
        arrs = [np.zeros((n, k, j)) for _ in range(3)]
        for arr, vals in zip(arrs, (pt, qt, s)):
            arr[si, sm, sr] = vals
        p_raw = np.zeros((n, k))
        p_raw[lay.p_pairs[:, 0], lay.p_pairs[:, 1]] = praw
        q_raw = np.zeros((n, j))
        q_raw[lay.q_pairs[:, 0], lay.q_pairs[:, 1]] = qraw
        return cls(arrs[0], arrs[1], arrs[2], p_raw, q_raw)


def build_constraints(inst: ProblemInstance, lay: Layout | None = None) -> ConstraintSystem:
    """Linear constraints C1-C4, C5b, C6-C14 over the flattened lifted point."""
    lay = lay or Layout(inst)
    S = lay.n_slots
    n, k, j = lay.shape
    rows, cols, vals, rhs, fam = [], [], [], [], []
    row = 0

    def add(family, entries, b):
        nonlocal row
        for c, v in entries:
            rows.append(row)
            cols.append(c)
            vals.append(v)
        rhs.append(b)
        fam.append(family)
        row += 1

    pt0, qt0, s0, p0, q0 = (lay.sl_pt.start, lay.sl_qt.start, lay.sl_s.start,
                            lay.sl_p.start, lay.sl_q.start)
    P = inst.p_max_dl
    add("C1", [(pt0 + a, 1.0) for a in range(S)], P)
    for r in range(j):
        idx = np.flatnonzero(lay.slots[:, 2] == r)
        if idx.size:
            add("C3", [(qt0 + a, 1.0) for a in idx], float(inst.p_max_ul[r]))
    for i in range(n):
        idx = np.flatnonzero(lay.slots[:, 0] == i)
        if idx.size:
            add("C6", [(s0 + a, 1.0) for a in idx], 1.0)
    for a in range(S):
        Q = float(lay.q_budget[a])
        pa, qa = p0 + lay.slot_p[a], q0 + lay.slot_q[a]
        add("C7", [(pt0 + a, 1.0), (s0 + a, -P)], 0.0)
        add("C8", [(pt0 + a, 1.0), (pa, -1.0)], 0.0)
        add("C9", [(pa, 1.0), (pt0 + a, -1.0), (s0 + a, P)], P)
        add("C11", [(qt0 + a, 1.0), (s0 + a, -Q)], 0.0)
        add("C12", [(qt0 + a, 1.0), (qa, -1.0)], 0.0)
        add("C14", [(qa, 1.0), (qt0 + a, -1.0), (s0 + a, Q)], Q)
    A = sp.csr_matrix((vals, (rows, cols)), shape=(row, lay.dim))

    lb = np.zeros(lay.dim)
    ub = np.full(lay.dim, np.inf)
    ub[lay.sl_s] = 1.0
    lb_fam = [""] * lay.dim
    ub_fam = [""] * lay.dim
    for sl, name in ((lay.sl_pt, "C10"), (lay.sl_qt, "C13"), (lay.sl_s, "C5b"),
                     (lay.sl_p, "C2"), (lay.sl_q, "C4")):
        for c in range(sl.start, sl.stop):
            lb_fam[c] = name
    for c in range(lay.sl_s.start, lay.sl_s.stop):
        ub_fam[c] = "C5b"
    return ConstraintSystem(A, np.array(rhs), lb, ub, tuple(fam), tuple(lb_fam), tuple(ub_fam))


def expected_constraint_count(n_f: int, k: int, j: int) -> int:
    return 1 + n_f * k + j + n_f * j + 2 * n_f * k * j + n_f + 8 * n_f * k * j


def _vec(inst, pt, lay):
    if isinstance(pt, LiftedPoint):
        lay = lay or Layout(inst)
        return pt.to_vector(lay), lay
    return np.asarray(pt, dtype=float), lay or Layout(inst)


def eval_dc_parts(inst: ProblemInstance, pt, lay: Layout | None = None):
    """Return ``(F, G, H, M)``; ``F - G`` is minus the lifted weighted throughput."""
    x, lay = _vec(inst, pt, lay)
    ptv, qtv, s, _, _ = lay.split(x)
    f_val = lay.model.f_parts(ptv, qtv)[0]
    return float(f_val), lay.model.g_value(ptv, qtv), float(np.sum(s)), float(np.sum(s * s))


def penalized_objective(inst: ProblemInstance, pt, eta: float, lay: Layout | None = None) -> float:
    F, G, H, M = eval_dc_parts(inst, pt, lay)
    return F - G + eta * (H - M)


def grad_F(inst: ProblemInstance, pt, lay: Layout | None = None):
    x, lay = _vec(inst, pt, lay)
    ptv, qtv = x[lay.sl_pt], x[lay.sl_qt]
    _, gp, gq, _ = lay.model.f_parts(ptv, qtv)
    return gp, gq


def grad_G(inst: ProblemInstance, pt, lay: Layout | None = None):
    """Gradient of G over the p_tilde and q_tilde blocks (flat slot order)."""
    x, lay = _vec(inst, pt, lay)
    return lay.model.g_grad(x[lay.sl_pt], x[lay.sl_qt])


def grad_M(pt, lay: Layout | None = None):
    if isinstance(pt, LiftedPoint):
        if lay is None:
            return 2.0 * pt.s
        return 2.0 * pt.to_vector(lay)[lay.sl_s]
    return 2.0 * np.asarray(pt, dtype=float)


class Surrogate:
    """Convex upper model of the penalized objective, tight at ``anchor``."""

    def __init__(self, inst: ProblemInstance, lay: Layout, anchor, eta: float):
        self.lay = lay
        self.eta = float(eta)
        a = np.asarray(anchor, dtype=float)
        apt, aqt, as_, _, _ = lay.split(a)
        self.anchor = a
        self.g_anchor = lay.model.g_value(apt, aqt)
        self.ggp, self.ggq = lay.model.g_grad(apt, aqt)
        self.m_anchor = float(np.sum(as_ * as_))
        self.as_ = as_.copy()
        self.apt, self.aqt = apt.copy(), aqt.copy()
        S = lay.n_slots
        idx = np.arange(S)
        self._hrows = np.concatenate((idx, idx, S + idx, S + idx))
        self._hcols = np.concatenate((idx, S + idx, idx, S + idx))

    def fun(self, x):
        lay = self.lay
        pt, qt, s, _, _ = lay.split(x)
        f_val, gp, gq, _ = lay.model.f_parts(pt, qt)
        lin_g = self.g_anchor + self.ggp @ (pt - self.apt) + self.ggq @ (qt - self.aqt)
        lin_m = self.m_anchor + (2.0 * self.as_) @ (s - self.as_)
        val = f_val - lin_g + self.eta * (np.sum(s) - lin_m)
        grad = np.zeros(lay.dim)
        grad[lay.sl_pt] = gp - self.ggp
        grad[lay.sl_qt] = gq - self.ggq
        grad[lay.sl_s] = self.eta * (1.0 - 2.0 * self.as_)
        return float(val), grad

    def hess(self, x):
        lay = self.lay
        pt, qt = x[lay.sl_pt], x[lay.sl_qt]
        _, _, _, (hpp, hpq, hqq) = lay.model.f_parts(pt, qt)
        data = np.concatenate((hpp, hpq, hpq, hqq))
        return sp.coo_matrix((data, (self._hrows, self._hcols)), shape=(lay.dim, lay.dim))

    def objective(self) -> SmoothObjective:
        return SmoothObjective(self.fun, self.hess)


def surrogate_objective(inst: ProblemInstance, pt, anchor, eta: float, lay: Layout | None = None):
    """Value and flat gradient of the convex surrogate at ``pt``."""
    x, lay = _vec(inst, pt, lay)
    a, _ = _vec(inst, anchor, lay)
    return Surrogate(inst, lay, a, eta).fun(x)


def lift(inst: ProblemInstance, alloc: Allocation) -> LiftedPoint:
    s = (np.asarray(alloc.s) > 0.5).astype(float) * inst.slot_mask
    return LiftedPoint(
        p_tilde=s * alloc.p[:, :, None],
        q_tilde=s * alloc.q[:, None, :],
        s=s,
        p_raw=np.array(alloc.p, dtype=float),
        q_raw=np.array(alloc.q, dtype=float),
    )


def unlift(inst: ProblemInstance, pt: LiftedPoint, rounding_tol: float = 1e-3) -> Allocation:
    """Round near-binary s and read powers off the active slots."""
    s = np.asarray(pt.s, dtype=float)
    dev = float(np.max(np.minimum(np.abs(s), np.abs(1.0 - s)))) if s.size else 0.0
    if dev > rounding_tol:
        raise RoundingError(dev)
    sb = (s > 0.5) & inst.slot_mask
    n, k, j = inst.shape
    p = np.zeros((n, k))
    q = np.zeros((n, j))
    for i, m, r in np.argwhere(sb):
        p[i, m] = pt.p_tilde[i, m, r]
        q[i, r] = pt.q_tilde[i, m, r]
    return Allocation(p, q, sb.astype(np.int8))
