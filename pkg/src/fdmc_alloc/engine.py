"""Primal log-barrier interior-point solver for smooth convex objectives.

Minimizes ``f(x)`` subject to ``A x <= b`` and ``lb <= x <= ub``. Newton
systems are solved either densely (small problems) or with a sparse LU of the
narrow constraint rows plus a Woodbury correction for the few wide rows
(budget sums), which keeps the lifted allocation problems cheap.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

log = logging.getLogger(__name__)

DENSE_MAX_DIM = 400


class SolverError(RuntimeError):
    pass


class InfeasibleStartError(SolverError):
    """The start point is not strictly feasible."""


class InfeasibleError(SolverError):
    """The constraint system has an empty interior."""


class NumericalFailure(SolverError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


@dataclass(frozen=True, eq=False)
class ConstraintSystem:
    """Linear inequalities ``A x <= b`` plus box bounds ``lb <= x <= ub``.

    ``row_family`` names the constraint family of each row and
    ``lb_family`` / ``ub_family`` of each finite bound (empty string when
    the bound is infinite).
    """

    A: sp.csr_matrix
    b: np.ndarray
    lb: np.ndarray
    ub: np.ndarray
    row_family: tuple = ()
    lb_family: tuple = ()
    ub_family: tuple = ()

    def __post_init__(self):
        A = sp.csr_matrix(self.A, dtype=float)
        n = A.shape[1]
        b = np.asarray(self.b, dtype=float).reshape(-1)
        lb = np.broadcast_to(np.asarray(self.lb, dtype=float), (n,)).copy()
        ub = np.broadcast_to(np.asarray(self.ub, dtype=float), (n,)).copy()
        if b.shape != (A.shape[0],):
            raise ValueError("b must have one entry per row of A")
        if np.any(lb >= ub):
            raise ValueError("box bounds must satisfy lb < ub")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "lb", lb)
        object.__setattr__(self, "ub", ub)

    @property
    def dim(self) -> int:
        return self.A.shape[1]

    @property
    def n_inequalities(self) -> int:
        return self.A.shape[0] + int(np.isfinite(self.lb).sum() + np.isfinite(self.ub).sum())

    def family_counts(self) -> dict:
        counts: dict = {}
        fams = list(self.row_family)
        fams += [f for f, v in zip(self.lb_family, self.lb) if np.isfinite(v)]
        fams += [f for f, v in zip(self.ub_family, self.ub) if np.isfinite(v)]
        for f in fams:
            counts[f] = counts.get(f, 0) + 1
        return counts

    def slacks(self, x) -> np.ndarray:
        """All slacks (rows, then finite lower, then finite upper bounds)."""
        x = np.asarray(x, dtype=float)
        lo = np.isfinite(self.lb)
        hi = np.isfinite(self.ub)
        return np.concatenate((self.b - self.A @ x, (x - self.lb)[lo], (self.ub - x)[hi]))

    def max_violation(self, x) -> float:
        s = self.slacks(x)
        return float(max(0.0, -s.min())) if s.size else 0.0


@dataclass(frozen=True)
class SmoothObjective:
    """Convex objective: ``fun(x) -> (value, grad)`` and ``hess(x)``.

    ``hess`` may return a dense array or a scipy sparse matrix.
    """

    fun: Callable
    hess: Callable


@dataclass(frozen=True)
class InnerSolution:
    point: np.ndarray
    objective_value: float
    kkt_residual: float
    barrier_iterations: int
    newton_iterations: int = 0
    duality_gap: float = 0.0
    trace: tuple = field(default=(), repr=False)


class _NewtonSystem:
    """Assembles and solves barrier Newton systems for a fixed constraint set.

    Sparse path: narrow rows (few nonzeros) enter ``B = t*Hf + An' D An + box``
    directly. Wide rows (budget sums) would fill B densely, so they become
    extra unknowns ``y = sqrt(D) Aw dx`` of a quasi-definite system

        [S B S,            S Aw' sqrt(D)] [z]   [S g]
        [sqrt(D) Aw S,    -I            ] [y] = [0  ]

    with S the Jacobi scaling of the full matrix; dx = S z. Every block
    stays bounded when a budget row is nearly active. The sparsity pattern
    is fixed, so each step only refills a data array.
    """

    def __init__(self, cons: ConstraintSystem, wide_threshold: int):
        self.cons = cons
        self.n = cons.dim
        self.dense = self.n <= DENSE_MAX_DIM
        self.lo = np.isfinite(cons.lb)
        self.hi = np.isfinite(cons.ub)
        self.wide_threshold = wide_threshold
        self._sparse_ready = False
        if self.dense:
            self.A = cons.A.tocsr()
            self.AT = self.A.T.tocsr()
        else:
            self._init_sparse()

    def _init_sparse(self):
        A = self.cons.A.tocsr()
        n = self.n
        nnz = np.diff(A.indptr)
        self.wide = np.flatnonzero(nnz > self.wide_threshold)
        narrow = np.flatnonzero(nnz <= self.wide_threshold)
        Aw = A[self.wide].tocoo()
        self._w_row, self._w_col, self._w_val = Aw.row, Aw.col, Aw.data
        # every (j, l) product of a narrow row contributes d_row * a_j * a_l
        rows, cols, coef, src = [], [], [], []
        for k in narrow:
            lo_, hi_ = A.indptr[k], A.indptr[k + 1]
            idx = A.indices[lo_:hi_]
            val = A.data[lo_:hi_]
            rows.append(np.repeat(idx, idx.size))
            cols.append(np.tile(idx, idx.size))
            coef.append(np.outer(val, val).ravel())
            src.append(np.full(idx.size ** 2, k))
        diag = np.arange(n)
        self._k_rows = np.concatenate(rows + [diag])
        self._k_cols = np.concatenate(cols + [diag])
        self._k_coef = np.concatenate(coef + [np.zeros(n)])
        self._k_src = np.concatenate(src + [np.zeros(n, dtype=int)])
        self._pattern_keys = None
        self._sparse_ready = True

    def _build_pattern(self, h_keys):
        n, k = self.n, self.wide.size
        keys = np.unique(np.concatenate((self._k_rows * n + self._k_cols, h_keys)))
        self._pattern_keys = keys
        self._p_rows = keys // n
        self._p_cols = keys % n
        self._k_pos = np.searchsorted(keys, self._k_rows * n + self._k_cols)
        self._diag_pos = np.searchsorted(keys, np.arange(n) * (n + 1))
        wr = n + self._w_row
        rows = np.concatenate((self._p_rows, self._w_col, wr, n + np.arange(k)))
        cols = np.concatenate((self._p_cols, wr, self._w_col, n + np.arange(k)))
        order = np.lexsort((rows, cols))
        self._csc_order = order
        self._csc_indices = rows[order].astype(np.int32)
        self._csc_indptr = np.searchsorted(cols[order], np.arange(n + k + 1)).astype(np.int32)

    def _assemble(self, hess_f, t, d, box):
        H = hess_f.tocoo() if sp.issparse(hess_f) else sp.coo_matrix(hess_f)
        h_keys = H.row.astype(np.int64) * self.n + H.col
        if self._pattern_keys is None:
            self._build_pattern(h_keys)
        h_pos = np.searchsorted(self._pattern_keys, h_keys)
        h_pos = np.minimum(h_pos, len(self._pattern_keys) - 1)
        if np.any(self._pattern_keys[h_pos] != h_keys):
            self._build_pattern(h_keys)
            h_pos = np.searchsorted(self._pattern_keys, h_keys)
        size = len(self._pattern_keys)
        weights = self._k_coef * d[self._k_src]
        weights[-self.n:] = box
        data = np.bincount(self._k_pos, weights=weights, minlength=size)
        data += t * np.bincount(h_pos, weights=H.data, minlength=size)
        return data

    def solve(self, hess_f, t, inv_r, inv_lo, inv_hi, rhs, ridge=0.0):
        """Newton direction; ``ridge`` is added to the Jacobi-scaled diagonal."""
        n = self.n
        box = np.zeros(n)
        box[self.lo] += inv_lo ** 2
        box[self.hi] += inv_hi ** 2
        d = inv_r ** 2
        if self.dense:
            Hf = hess_f.toarray() if sp.issparse(hess_f) else np.asarray(hess_f)
            M = t * Hf + (self.AT @ sp.diags(d) @ self.A).toarray()
            M[np.diag_indices(n)] += box
            dx = _dense_spd_solve(M, rhs, ridge)
            if dx is not None:
                return dx
            # Cholesky broke down: forming A' D A squared the conditioning of
            # nearly active rows, which the augmented system avoids
            if not self._sparse_ready:
                self._init_sparse()
        return self._augmented_solve(hess_f, t, d, box, rhs, ridge)

    def _augmented_solve(self, hess_f, t, d, box, rhs, ridge):
        n = self.n
        data = self._assemble(hess_f, t, d, box)
        if not np.all(np.isfinite(data)):
            raise NumericalFailure("non-finite Newton matrix")
        k = self.wide.size
        dw = d[self.wide]
        diag = data[self._diag_pos] + np.bincount(
            self._w_col, weights=self._w_val ** 2 * dw[self._w_row], minlength=n)
        scale = 1.0 / np.sqrt(np.maximum(diag, np.finfo(float).tiny))
        sdata = data * scale[self._p_rows] * scale[self._p_cols]
        if ridge:
            sdata[self._diag_pos] += ridge
        cvals = self._w_val * scale[self._w_col] * np.sqrt(dw)[self._w_row]
        full = np.concatenate((sdata, cvals, cvals, -np.ones(k)))
        aug = sp.csc_matrix((full[self._csc_order], self._csc_indices, self._csc_indptr),
                            shape=(n + k, n + k))
        rhs_aug = np.concatenate((scale * rhs, np.zeros(k)))
        z = np.full(n + k, np.nan)
        for opts in _SPLU_OPTS:
            try:
                lu = spla.splu(aug, **opts)
            except RuntimeError:
                continue
            z = _refine(lambda v: aug @ v, lu.solve, rhs_aug)
            # unpivoted LU is fast but can lose accuracy on near-singular steps
            if np.linalg.norm(rhs_aug - aug @ z) <= 1e-10 * np.linalg.norm(rhs_aug):
                break
        return scale * z[:n]


def _newton_system(cons: ConstraintSystem, wide_threshold: int) -> _NewtonSystem:
    # the SCA loop re-solves over one constraint set many times; reuse the
    # symbolic work attached to it
    cache = cons.__dict__.setdefault("_newton_cache", {})
    if wide_threshold not in cache:
        cache[wide_threshold] = _NewtonSystem(cons, wide_threshold)
    return cache[wide_threshold]


def _refine(matvec, inverse, rhs, steps=3):
    """Iterative refinement; recovers accuracy lost to round-off."""
    z = inverse(rhs)
    norm = np.linalg.norm(rhs)
    for _ in range(steps):
        res = rhs - matvec(z)
        if not np.linalg.norm(res) > 1e-12 * norm:
            break
        z = z + inverse(res)
    return z


def _dense_spd_solve(M, rhs, ridge=0.0):
    """Cholesky solve of a symmetric positive definite system after Jacobi
    scaling; ``ridge * I`` is added to the scaled matrix. Returns None if
    the factorization breaks down.
    """
    if not np.all(np.isfinite(M)):
        raise NumericalFailure("non-finite Newton matrix")
    diag = np.diag(M).copy()
    scale = 1.0 / np.sqrt(np.maximum(diag, np.finfo(float).tiny))
    Ms = M * scale[:, None] * scale[None, :]
    bs = scale * rhs
    if ridge:
        Ms[np.diag_indices_from(Ms)] += ridge
    try:
        c = scipy.linalg.cho_factor(Ms, check_finite=False)
    except np.linalg.LinAlgError:
        return None
    return scale * _refine(lambda v: Ms @ v,
                           lambda v: scipy.linalg.cho_solve(c, v, check_finite=False), bs)


_SPLU_OPTS = (
    dict(permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0, options={"SymmetricMode": True}),
    dict(permc_spec="COLAMD"),
)

# regularization tried on the unit-diagonal scaled system when the exact
# Newton direction is unusable (numerically singular Hessian)
_RIDGES = (0.0, 2e-10, 2e-8, 2e-6, 2e-4, 2e-2)


def _max_step(dr, r, dlo, sl, dhi, su):
    """Largest step (capped at 1) keeping 1% of every slack."""
    alpha = 1.0
    for ds, sv in ((dr, r), (dlo, sl), (dhi, su)):
        pos = ds > 0
        if pos.any():
            alpha = min(alpha, 0.99 * float(np.min(sv[pos] / ds[pos])))
    return alpha


def minimize(obj: SmoothObjective, cons: ConstraintSystem, start, tol: float = 1e-7,
             t0: float = 1.0, mu: float = 10.0, newton_tol: float = 1e-10,
             max_newton: int = 100, max_total_newton: int = 3000,
             wide_threshold: int = 8, record_trace: bool = False) -> InnerSolution:
    """Minimize a convex objective from a strictly feasible start.

    The barrier weight starts at ``t0`` and grows by ``mu`` until the
    duality-gap bound ``m / t`` falls below ``tol``. Each centering step is a
    damped Newton method with backtracking (Armijo 0.01, shrink 0.5) and a
    step cap that keeps every slack positive.
    """
    x = np.array(start, dtype=float)
    if x.shape != (cons.dim,):
        raise ValueError("start point has wrong dimension")
    slack0 = cons.slacks(x)
    if slack0.size and slack0.min() <= 0.0:
        raise InfeasibleStartError(f"start point not strictly feasible (min slack {slack0.min():.3g})")
    m = cons.n_inequalities
    lo, hi = np.isfinite(cons.lb), np.isfinite(cons.ub)
    A, b = cons.A, cons.b
    AT = A.T.tocsr()
    system = _newton_system(cons, wide_threshold)
    eps = np.finfo(float).eps

    def barrier(xv, t):
        fv, gv = obj.fun(xv)
        r = b - A @ xv
        sl = (xv - cons.lb)[lo]
        su = (cons.ub - xv)[hi]
        if not np.isfinite(fv) or (r.size and r.min() <= 0) or (sl.size and sl.min() <= 0) \
                or (su.size and su.min() <= 0):
            return np.inf, None, None
        phi = t * fv - np.log(r).sum() - np.log(sl).sum() - np.log(su).sum()
        return phi, fv, (gv, r, sl, su)

    t = t0
    total_newton = 0
    outer = 0
    trace = []
    while True:
        outer += 1
        phi, fv, parts = barrier(x, t)
        for it in range(max_newton):
            gv, r, sl, su = parts
            inv_r, inv_lo, inv_hi = 1.0 / r, 1.0 / sl, 1.0 / su
            grad = t * gv + AT @ inv_r
            grad[lo] -= inv_lo
            grad[hi] += inv_hi
            hess = obj.hess(x)
            total_newton += 1
            accepted = centered = False
            for ridge in _RIDGES:
                dx = system.solve(hess, t, inv_r, inv_lo, inv_hi, -grad, ridge)
                lam2 = float(-grad @ dx)
                if not (np.all(np.isfinite(dx)) and lam2 > 0.0):
                    continue
                # lam2 / 2 estimates phi - phi*, i.e. (lam2 / 2) / t in objective
                # units. Stop at newton_tol or at round-off level of phi; when
                # only a regularized direction exists, also once the centering
                # error is 1% of the gap target
                floor = max(newton_tol, 1e-10 * (1.0 + abs(phi)))
                if ridge:
                    floor = max(floor, 0.01 * tol * t)
                if lam2 / 2.0 <= floor:
                    centered = True
                    break
                alpha = _max_step(A @ dx, r, -dx[lo], sl, dx[hi], su)
                while alpha > 1e-14:
                    phi_new, fv_new, parts_new = barrier(x + alpha * dx, t)
                    if phi_new <= phi - 0.01 * alpha * lam2:
                        # a step too short to change phi is no progress
                        accepted = phi_new < phi
                        break
                    alpha *= 0.5
                if accepted:
                    break
                # no measurable progress (slacks at round-off level): centered
                # as far as floating point allows, or within 1% of the gap target
                if lam2 / 2.0 <= max(1e4 * eps * (1.0 + abs(phi)), 0.01 * tol * t):
                    centered = True
                    break
            if centered:
                break
            if not accepted:
                log.debug("Newton step failed: t=%g phi=%g", t, phi)
                raise NumericalFailure(
                    "no descent step found",
                    {"t": t, "newton_decrement_sq": lam2, "phi": phi, "outer": outer},
                )
            if record_trace:
                trace.append((t, phi, lam2, alpha))
            x = x + alpha * dx
            phi, fv, parts = phi_new, fv_new, parts_new
            if total_newton >= max_total_newton:
                break
        else:
            raise NumericalFailure(
                "Newton centering did not converge",
                {"t": t, "newton_decrement_sq": lam2, "outer": outer, "trace": trace[-20:]},
            )
        if total_newton >= max_total_newton:
            raise NumericalFailure(
                "Newton iteration cap reached", {"t": t, "total_newton": total_newton}
            )
        log.debug("barrier t=%g: %d Newton steps so far, f=%.12g", t, total_newton, fv)
        if m / t <= tol:
            break
        t *= mu

    gv, r, sl, su = parts
    # multipliers from the last Newton step: 1 / (t * slack) linearized at x + dx
    lam = np.maximum((1.0 + (A @ dx) / r) / (t * r), 0.0)
    mu_lo = np.maximum((1.0 - dx[lo] / sl) / (t * sl), 0.0)
    mu_hi = np.maximum((1.0 + dx[hi] / su) / (t * su), 0.0)
    kkt = gv + AT @ lam
    kkt[lo] -= mu_lo
    kkt[hi] += mu_hi
    return InnerSolution(
        point=x,
        objective_value=float(fv),
        kkt_residual=float(np.max(np.abs(kkt))) if kkt.size else 0.0,
        barrier_iterations=outer,
        newton_iterations=total_newton,
        duality_gap=m / t,
        trace=tuple(trace),
    )


def find_interior_point(cons: ConstraintSystem, margin: float = 1e-9) -> np.ndarray:
    """Return a point whose every slack is strictly positive.

    Pure boxes give their midpoint. Otherwise a phase-I problem maximizes the
    smallest slack, starting from the box midpoint (or zero for free
    coordinates).
    """
    lb, ub = cons.lb, cons.ub
    x0 = np.zeros(cons.dim)
    both = np.isfinite(lb) & np.isfinite(ub)
    x0[both] = 0.5 * (lb[both] + ub[both])
    only_lo = np.isfinite(lb) & ~np.isfinite(ub)
    only_hi = ~np.isfinite(lb) & np.isfinite(ub)
    x0[only_lo] = lb[only_lo] + 1.0
    x0[only_hi] = ub[only_hi] - 1.0
    if cons.A.shape[0] == 0:
        return x0

    # variables (x, sigma): rows A x - sigma <= b and box rows shifted by sigma
    n = cons.dim
    eye = sp.identity(n, format="csr")
    blocks = [cons.A]
    rhs = [cons.b]
    lo, hi = np.isfinite(lb), np.isfinite(ub)
    if lo.any():
        blocks.append(-eye[lo])
        rhs.append(-lb[lo])
    if hi.any():
        blocks.append(eye[hi])
        rhs.append(ub[hi])
    G = sp.vstack(blocks).tocsr()
    h = np.concatenate(rhs)
    viol = G @ x0 - h
    width = np.where(both, ub - lb, np.inf)
    sigma_floor = -0.5 * float(np.min(width)) if both.any() else -1.0
    sigma_floor = min(sigma_floor, -1e-3)
    sigma0 = max(float(viol.max()), 0.0) + 1.0
    A1 = sp.hstack([G, -np.ones((G.shape[0], 1))]).tocsr()
    phase1 = ConstraintSystem(
        A1, h, np.concatenate((np.full(n, -np.inf), [sigma_floor])), np.full(n + 1, np.inf)
    )
    c = np.zeros(n + 1)
    c[-1] = 1.0
    obj = SmoothObjective(lambda z: (float(z[-1]), c), lambda z: sp.csr_matrix((n + 1, n + 1)))
    sol = minimize(obj, phase1, np.concatenate((x0, [sigma0])), tol=1e-9 * max(1.0, sigma0))
    x = sol.point[:n]
    if sol.point[-1] >= -margin or cons.slacks(x).min() <= 0.0:
        raise InfeasibleError(
            f"no strictly feasible point found (best min slack {-sol.point[-1]:.3g})"
        )
    return x
