"""Problem instances, the weighted-throughput objective and C1-C6 checks."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .channel import ChannelGains, ParameterError

LN2 = np.log(2.0)


@dataclass(frozen=True, eq=False)
class ProblemInstance:
    """Immutable optimization input.

    ``allowed`` optionally restricts which (i, m, r) slots may be scheduled;
    the baselines use it to express restricted models. ``None`` means every
    slot is available. ``noise_dl_w`` is the physical DL noise power the
    gains were normalized by; it only feeds the default penalty weight.
    """

    gains: ChannelGains
    w: np.ndarray
    mu: np.ndarray
    p_max_dl: float
    p_max_ul: np.ndarray
    rho: float
    allowed: np.ndarray | None = None
    noise_dl_w: float | None = None

    def __post_init__(self):
        k, j = self.gains.n_dl, self.gains.n_ul
        w = np.array(self.w, dtype=float).reshape(-1)
        mu = np.array(self.mu, dtype=float).reshape(-1)
        p_ul = np.broadcast_to(np.asarray(self.p_max_ul, dtype=float), (j,)).copy()
        if w.shape != (k,) or mu.shape != (j,):
            raise ParameterError("weight vectors must match the user counts")
        if np.any((w < 0) | (w > 1)) or np.any((mu < 0) | (mu > 1)):
            raise ParameterError("weights must lie in [0, 1]")
        if not self.p_max_dl > 0 or np.any(p_ul <= 0):
            raise ParameterError("power budgets must be positive")
        if not 0.0 <= self.rho <= 1.0:
            raise ParameterError("rho must lie in [0, 1]")
        if self.noise_dl_w is not None and not self.noise_dl_w > 0:
            raise ParameterError("noise power must be positive")
        allowed = self.allowed
        if allowed is not None:
            allowed = np.array(allowed, dtype=bool)
            if allowed.shape != self.shape:
                raise ParameterError("allowed mask must have shape (N_F, K, J)")
        for arr in (w, mu, p_ul) + ((allowed,) if allowed is not None else ()):
            arr.setflags(write=False)
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "p_max_ul", p_ul)
        object.__setattr__(self, "p_max_dl", float(self.p_max_dl))
        object.__setattr__(self, "rho", float(self.rho))
        object.__setattr__(self, "allowed", allowed)

    @classmethod
    def create(cls, gains: ChannelGains, p_max_dl: float, p_max_ul, rho: float,
               w=None, mu=None, allowed=None, noise_dl_w=None) -> "ProblemInstance":
        """Build an instance with unit weights unless given."""
        w = np.ones(gains.n_dl) if w is None else w
        mu = np.ones(gains.n_ul) if mu is None else mu
        return cls(gains, w, mu, p_max_dl, p_max_ul, rho, allowed, noise_dl_w)

    @property
    def shape(self) -> tuple[int, int, int]:
        g = self.gains
        return g.n_subcarriers, g.n_dl, g.n_ul

    @property
    def slot_mask(self) -> np.ndarray:
        return np.ones(self.shape, dtype=bool) if self.allowed is None else self.allowed

    def slot_gains(self):
        """Per-slot gain arrays, each broadcast to (N_F, K, J).

        Returns ``(H, F, G, RL)`` where ``F`` is the CCI gain from UL user r
        to DL user m and ``RL`` is rho * L_SI.
        """
        n, k, j = self.shape
        g = self.gains
        H = np.broadcast_to(g.H[:, :, None], (n, k, j))
        G = np.broadcast_to(g.G[:, None, :], (n, k, j))
        F = np.transpose(g.F, (0, 2, 1))
        RL = np.broadcast_to(self.rho * g.L_SI[:, None, None], (n, k, j))
        return H, F, G, RL


@dataclass(frozen=True, eq=False)
class Allocation:
    """Physical decision: p (N_F, K), q (N_F, J), binary s (N_F, K, J)."""

    p: np.ndarray
    q: np.ndarray
    s: np.ndarray

    def __post_init__(self):
        p = np.array(self.p, dtype=float)
        q = np.array(self.q, dtype=float)
        s = np.array(self.s)
        if s.ndim != 3 or p.shape != s.shape[:2] or q.shape != (s.shape[0], s.shape[2]):
            raise ParameterError("allocation arrays have inconsistent shapes")
        for arr in (p, q, s):
            arr.setflags(write=False)
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "s", s)

    @classmethod
    def zeros(cls, shape) -> "Allocation":
        n, k, j = shape
        return cls(np.zeros((n, k)), np.zeros((n, j)), np.zeros((n, k, j), dtype=np.int8))

    def pairs(self):
        """Active (i, m, r) triples in lexicographic order."""
        return [tuple(int(v) for v in idx) for idx in np.argwhere(self.s > 0.5)]


def _check_dims(inst: ProblemInstance, alloc: Allocation) -> None:
    if alloc.s.shape != inst.shape:
        raise ParameterError(
            f"allocation shape {alloc.s.shape} does not match instance {inst.shape}"
        )


def subcarrier_utility(inst: ProblemInstance, i: int, m: int, r: int,
                       p: float, q: float) -> float:
    """Weighted DL+UL rate (bits/s/Hz) of pair (m, r) on subcarrier i."""
    if p < 0 or q < 0:
        raise ParameterError("powers must be non-negative")
    g = inst.gains
    dl = np.log1p(g.H[i, m] * p / (g.F[i, r, m] * q + 1.0))
    ul = np.log1p(g.G[i, r] * q / (inst.rho * g.L_SI[i] * p + 1.0))
    return float((inst.w[m] * dl + inst.mu[r] * ul) / LN2)


def utility_grid(inst: ProblemInstance, p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Utility of every slot (N_F, K, J) for per-(i, m) p and per-(i, r) q."""
    H, F, G, RL = inst.slot_gains()
    pp = np.asarray(p, dtype=float)[:, :, None]
    qq = np.asarray(q, dtype=float)[:, None, :]
    dl = np.log1p(H * pp / (F * qq + 1.0))
    ul = np.log1p(G * qq / (RL * pp + 1.0))
    return (inst.w[None, :, None] * dl + inst.mu[None, None, :] * ul) / LN2


def system_objective(inst: ProblemInstance, alloc: Allocation) -> float:
    """Sum over active slots of the per-subcarrier weighted throughput."""
    _check_dims(inst, alloc)
    active = alloc.s > 0.5
    if not active.any():
        return 0.0
    u = utility_grid(inst, alloc.p, alloc.q)
    # fixed summation order keeps the value reproducible
    return float(np.sum(u[active]))


@dataclass(frozen=True)
class Violation:
    constraint: str
    index: tuple
    residual: float


@dataclass(frozen=True)
class FeasibilityReport:
    violations: tuple = field(default_factory=tuple)

    @property
    def feasible(self) -> bool:
        return not self.violations

    def by_constraint(self, name: str):
        return [v for v in self.violations if v.constraint == name]

    def __str__(self):
        if self.feasible:
            return "feasible"
        return "; ".join(f"{v.constraint}{v.index}: {v.residual:.3g}" for v in self.violations)


def check_feasibility(inst: ProblemInstance, alloc: Allocation,
                      tol: float = 1e-6) -> FeasibilityReport:
    """List every violated constraint among C1-C6 with its residual."""
    out: list[Violation] = []
    if alloc.s.shape != inst.shape:
        return FeasibilityReport((Violation("shape", (), float("inf")),))
    s = np.asarray(alloc.s, dtype=float)
    p, q = alloc.p, alloc.q

    c5 = np.minimum(np.abs(s), np.abs(s - 1.0))
    for idx in np.argwhere(c5 > tol):
        out.append(Violation("C5", tuple(int(v) for v in idx), float(c5[tuple(idx)])))
    sb = (s > 0.5).astype(float)

    res = float(np.sum(sb * p[:, :, None])) - inst.p_max_dl
    if res > tol:
        out.append(Violation("C1", (), res))
    for idx in np.argwhere(p < -tol):
        out.append(Violation("C2", tuple(int(v) for v in idx), float(-p[tuple(idx)])))
    c3 = np.sum(sb * q[:, None, :], axis=(0, 1)) - inst.p_max_ul
    for r in np.flatnonzero(c3 > tol):
        out.append(Violation("C3", (int(r),), float(c3[r])))
    for idx in np.argwhere(q < -tol):
        out.append(Violation("C4", tuple(int(v) for v in idx), float(-q[tuple(idx)])))
    c6 = np.sum(sb, axis=(1, 2)) - 1.0
    for i in np.flatnonzero(c6 > tol):
        out.append(Violation("C6", (int(i),), float(c6[i])))
    if inst.allowed is not None:
        for idx in np.argwhere((sb > 0) & ~inst.allowed):
            out.append(Violation("mask", tuple(int(v) for v in idx), 1.0))
    return FeasibilityReport(tuple(out))
