import math

import numpy as np
import pytest

from fdmc_alloc.model import LN2, Allocation, system_objective
from fdmc_alloc.reform import (
    Layout,
    LiftedPoint,
    RoundingError,
    Surrogate,
    build_constraints,
    eval_dc_parts,
    expected_constraint_count,
    grad_F,
    grad_G,
    grad_M,
    lift,
    penalized_objective,
    surrogate_objective,
    unlift,
)

from conftest import central_fd, drop, random_lifted, toy_instance


def single(rho=1.0, H=1.0, F=1.0, G=1.0, L=1.0, p_dl=10.0, p_ul=10.0):
    return toy_instance([[H]], [[G]], [[[F]]], [L], p_dl=p_dl, p_ul=p_ul, rho=rho)


def point(inst, pt, qt, s, p, q):
    return LiftedPoint(np.full((1, 1, 1), pt), np.full((1, 1, 1), qt), np.full((1, 1, 1), s),
                       np.full((1, 1), p), np.full((1, 1), q))


@pytest.mark.parametrize("dims", [(1, 1, 1), (2, 3, 2), (16, 4, 4)])
def test_constraint_count(dims):
    n, k, j = dims
    assert expected_constraint_count(1, 1, 1) == 1 + 1 + 1 + 1 + 2 + 1 + 8
    inst = drop(0, 0, n, k, j)
    cons = build_constraints(inst)
    assert cons.n_inequalities == expected_constraint_count(n, k, j)
    fam = cons.family_counts()
    for name in ("C7", "C8", "C9", "C10", "C11", "C12", "C13", "C14"):
        assert fam[name] == n * k * j
    assert fam["C5b"] == 2 * n * k * j
    assert fam["C1"] == 1 and fam["C3"] == j and fam["C6"] == n
    assert fam["C2"] == n * k and fam["C4"] == n * j


def test_constraint_count_16_4_4():
    assert expected_constraint_count(16, 4, 4) == 2709


def _feasible(cons, lay, lp, tol=1e-12):
    return cons.max_violation(lp.to_vector(lay)) <= tol


def test_big_m_pinch_and_release():
    inst = single(p_dl=4.0, p_ul=3.0)
    lay = Layout(inst)
    cons = build_constraints(inst, lay)
    # s = 1 pins p_tilde to p and q_tilde to q
    assert _feasible(cons, lay, point(inst, 2.0, 1.0, 1.0, 2.0, 1.0))
    assert not _feasible(cons, lay, point(inst, 1.9, 1.0, 1.0, 2.0, 1.0))
    assert not _feasible(cons, lay, point(inst, 2.0, 1.1, 1.0, 2.0, 1.0))
    # s = 0 releases p_tilde to zero whatever p is
    assert _feasible(cons, lay, point(inst, 0.0, 0.0, 0.0, 3.0, 2.0))
    assert not _feasible(cons, lay, point(inst, 0.1, 0.0, 0.0, 3.0, 2.0))
    assert not _feasible(cons, lay, point(inst, 0.0, 0.1, 0.0, 3.0, 2.0))


def test_dc_identity_hand_case():
    inst = single(p_dl=10.0)
    F, G, H, M = eval_dc_parts(inst, point(inst, 3.0, 1.0, 1.0, 3.0, 1.0))
    assert F - G == pytest.approx(-1.6439, abs=1e-4)
    assert (H, M) == (1.0, 1.0)


def test_dc_parts_zero_and_half():
    inst = drop(1, 0, 2, 2, 2)
    n, k, j = inst.shape
    z = LiftedPoint(np.zeros((n, k, j)), np.zeros((n, k, j)), np.zeros((n, k, j)),
                    np.zeros((n, k)), np.zeros((n, j)))
    assert eval_dc_parts(inst, z) == (0.0, 0.0, 0.0, 0.0)
    s = np.zeros((n, k, j))
    s[1, 0, 1] = 0.5
    half = LiftedPoint(z.p_tilde, z.q_tilde, s, z.p_raw, z.q_raw)
    _, _, H, M = eval_dc_parts(inst, half)
    assert H - M == 0.25


def test_grad_G_hand_value():
    inst = single(rho=1.0, L=1.0, F=1.0)
    gp, gq = grad_G(inst, point(inst, 1.0, 1.0, 1.0, 1.0, 1.0))
    assert gp[0] == pytest.approx(-1.0 / (2.0 * LN2), abs=1e-12)
    assert gp[0] == pytest.approx(-0.72135, abs=1e-5)
    assert gq[0] == pytest.approx(-1.0 / (2.0 * LN2), abs=1e-12)


def test_grad_G_zero_without_si(rng):
    inst = drop(2, 0, 3, 2, 2)
    inst0 = toy_instance(inst.gains.H, inst.gains.G, inst.gains.F, inst.gains.L_SI, rho=0.0)
    gp, _ = grad_G(inst0, random_lifted(inst0, rng))
    assert np.all(gp == 0.0)


def test_grad_F_closed_form(rng):
    inst = single(H=2.0, F=0.5, G=3.0, L=0.7, rho=0.8)
    lp = point(inst, 1.2, 0.4, 0.6, 2.0, 1.0)
    gp, gq = grad_F(inst, lp)
    d1 = 1 + 2.0 * 1.2 + 0.5 * 0.4
    d2 = 1 + 3.0 * 0.4 + 0.56 * 1.2
    assert gp[0] == pytest.approx((-2.0 / d1 - 0.56 / d2) / LN2, rel=1e-13)
    assert gq[0] == pytest.approx((-0.5 / d1 - 3.0 / d2) / LN2, rel=1e-13)


def test_grad_M_values():
    assert np.all(grad_M(np.zeros(4)) == 0.0)
    assert np.all(grad_M(np.full(3, 0.5)) == 1.0)


def test_grad_M_finite_difference(rng):
    s = rng.uniform(0.1, 1.0, 20)
    fd = central_fd(lambda v: float(np.sum(v * v)), s, range(20))
    assert np.max(np.abs(fd - grad_M(s)) / np.abs(fd)) <= 1e-8


def test_surrogate_tight_at_anchor(rng):
    inst = drop(3, 0, 3, 2, 2)
    lay = Layout(inst)
    a = random_lifted(inst, rng)
    val, _ = surrogate_objective(inst, a, a, 500.0, lay)
    assert val == pytest.approx(penalized_objective(inst, a, 500.0, lay), abs=1e-9)


def test_surrogate_equals_F_without_G_and_penalty(rng):
    base = drop(4, 0, 3, 2, 2)
    g = base.gains
    inst = toy_instance(g.H, g.G, np.zeros_like(g.F), g.L_SI, rho=0.0,
                        p_dl=base.p_max_dl, p_ul=base.p_max_ul)
    lay = Layout(inst)
    x, a = random_lifted(inst, rng), random_lifted(inst, rng)
    val, _ = surrogate_objective(inst, x, a, 0.0, lay)
    assert val == eval_dc_parts(inst, x, lay)[0]


def test_surrogate_gradient_layout(rng):
    inst = drop(5, 0, 2, 2, 2)
    lay = Layout(inst)
    x, a = random_lifted(inst, rng), random_lifted(inst, rng)
    _, grad = surrogate_objective(inst, x, a, 7.0, lay)
    av = a.to_vector(lay)
    assert np.all(grad[lay.sl_p] == 0.0) and np.all(grad[lay.sl_q] == 0.0)
    assert np.allclose(grad[lay.sl_s], 7.0 * (1.0 - 2.0 * av[lay.sl_s]), rtol=0, atol=1e-14)
    gp, gq = grad_F(inst, x, lay)
    ggp, ggq = grad_G(inst, a, lay)
    assert np.array_equal(grad[lay.sl_pt], gp - ggp)
    assert np.array_equal(grad[lay.sl_qt], gq - ggq)


def test_surrogate_hessian_matches_gradient_fd(rng):
    inst = drop(6, 0, 2, 2, 1)
    lay = Layout(inst)
    sur = Surrogate(inst, lay, random_lifted(inst, rng).to_vector(lay), 10.0)
    x = random_lifted(inst, rng).to_vector(lay)
    H = sur.hess(x).toarray()
    for i in range(lay.dim):
        fd = central_fd(lambda v: sur.fun(v)[1] @ np.eye(lay.dim)[i], x, range(lay.dim))
        assert np.allclose(fd, H[i], rtol=1e-5, atol=1e-9 * max(1.0, np.abs(H).max()))


def test_lift_unlift_round_trip():
    inst = toy_instance(np.ones((2, 1)), np.ones((2, 2)), np.ones((2, 2, 1)), np.ones(2))
    s = np.zeros((2, 1, 2), dtype=int)
    s[0, 0, 1] = 1
    alloc = Allocation(np.array([[2.0], [5.0]]), np.array([[0.3, 0.7], [0.1, 0.2]]), s)
    lp = lift(inst, alloc)
    assert lp.p_tilde[0, 0, 1] == 2.0 and lp.q_tilde[0, 0, 1] == 0.7
    assert lp.p_tilde[1, 0, 0] == 0.0
    back = unlift(inst, lp)
    assert np.array_equal(back.s, s)
    assert back.p[0, 0] == 2.0 and back.q[0, 1] == 0.7
    # inactive subcarrier powers are immaterial and come back as zero
    assert back.p[1, 0] == 0.0 and np.all(back.q[1] == 0.0)
    assert system_objective(inst, back) == system_objective(inst, alloc)


def test_unlift_rejects_fractional():
    inst = single()
    with pytest.raises(RoundingError) as err:
        unlift(inst, point(inst, 0.0, 0.0, 0.4, 0.0, 0.0), rounding_tol=1e-3)
    assert err.value.max_deviation == pytest.approx(0.4)


def test_binary_equivalence(rng):
    inst = drop(7, 0, 4, 2, 3)
    n, k, j = inst.shape
    lay = Layout(inst)
    cons = build_constraints(inst, lay)
    for _ in range(10):
        s = np.zeros((n, k, j), dtype=int)
        for i in range(n):
            c = rng.integers(0, k * j + 1)
            if c < k * j:
                s[i].flat[c] = 1
        p = rng.uniform(0, 1, (n, k)) * inst.p_max_dl / (2 * n * k)
        q = rng.uniform(0, 1, (n, j)) * inst.p_max_ul[None, :] / (2 * n)
        alloc = Allocation(p, q, s)
        lp = lift(inst, alloc)
        assert cons.max_violation(lp.to_vector(lay)) <= 1e-12
        F, G, H, M = eval_dc_parts(inst, lp, lay)
        assert F - G == pytest.approx(-system_objective(inst, alloc), rel=1e-12)
        assert H - M == 0.0


def test_midpoint_convexity(rng):
    inst = drop(8, 0, 3, 2, 2)
    lay = Layout(inst)
    for _ in range(50):
        x, y = random_lifted(inst, rng).to_vector(lay), random_lifted(inst, rng).to_vector(lay)
        fx, fy, fm = (eval_dc_parts(inst, v, lay) for v in (x, y, 0.5 * (x + y)))
        for idx in (0, 1, 3):  # F, G, M
            assert fm[idx] <= 0.5 * (fx[idx] + fy[idx]) + 1e-9


def test_penalty_positive_on_fractional(rng):
    s = rng.uniform(1e-6, 1 - 1e-6, 50)
    assert np.all(s - s * s > 0)


def test_flattening_order():
    inst = toy_instance(np.ones((2, 2)), np.ones((2, 2)), np.ones((2, 2, 2)), np.ones(2))
    lay = Layout(inst)
    assert [tuple(v) for v in lay.slots][:4] == [(0, 0, 0), (0, 0, 1), (0, 1, 0), (0, 1, 1)]
    assert math.isclose(lay.dim, 3 * 8 + 4 + 4)
