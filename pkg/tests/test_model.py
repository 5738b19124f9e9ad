import math

import numpy as np
import pytest

from fdmc_alloc.channel import ParameterError
from fdmc_alloc.model import (
    Allocation,
    ProblemInstance,
    check_feasibility,
    subcarrier_utility,
    system_objective,
    utility_grid,
)

from conftest import toy_instance


def unit_instance(n=1, k=1, j=1, rho=1.0, **kw):
    return toy_instance(np.ones((n, k)), np.ones((n, j)), np.ones((n, j, k)), np.ones(n),
                        rho=rho, **kw)


def test_utility_zero_power():
    assert subcarrier_utility(unit_instance(), 0, 0, 0, 0.0, 0.0) == 0.0


def test_utility_hand_value():
    # log2(1 + 3/2) + log2(1 + 1/4)
    u = subcarrier_utility(unit_instance(), 0, 0, 0, 3.0, 1.0)
    assert u == pytest.approx(math.log2(2.5) + math.log2(1.25), abs=1e-12)
    assert u == pytest.approx(1.6439, abs=1e-4)


def test_utility_interference_free():
    inst = toy_instance([[1.0]], [[3.0]], [[[0.0]]], [1.0], rho=0.0)
    assert subcarrier_utility(inst, 0, 0, 0, 1.0, 1.0) == pytest.approx(3.0, abs=1e-12)


def test_utility_weights_and_negative_power():
    inst = unit_instance(w=[0.5], mu=[0.0])
    assert subcarrier_utility(inst, 0, 0, 0, 3.0, 1.0) == pytest.approx(0.5 * math.log2(2.5))
    with pytest.raises(ParameterError):
        subcarrier_utility(inst, 0, 0, 0, -1.0, 0.0)


def test_utility_grid_matches_scalar(rng):
    n, k, j = 3, 2, 4
    inst = toy_instance(rng.uniform(0, 5, (n, k)), rng.uniform(0, 5, (n, j)),
                        rng.uniform(0, 5, (n, j, k)), rng.uniform(0, 5, n), rho=0.3,
                        w=rng.uniform(0, 1, k), mu=rng.uniform(0, 1, j))
    p, q = rng.uniform(0, 1, (n, k)), rng.uniform(0, 1, (n, j))
    grid = utility_grid(inst, p, q)
    for i in range(n):
        for m in range(k):
            for r in range(j):
                assert grid[i, m, r] == pytest.approx(
                    subcarrier_utility(inst, i, m, r, p[i, m], q[i, r]), rel=1e-13)


def test_system_objective_examples():
    inst = unit_instance(n=2)
    assert system_objective(inst, Allocation.zeros(inst.shape)) == 0.0
    s = np.zeros((2, 1, 1), dtype=int)
    s[0, 0, 0] = 1
    alloc = Allocation(np.array([[3.0], [5.0]]), np.array([[1.0], [2.0]]), s)
    assert system_objective(inst, alloc) == pytest.approx(1.6439, abs=1e-4)


def test_system_objective_dimension_mismatch():
    inst = unit_instance(n=2)
    with pytest.raises(ParameterError):
        system_objective(inst, Allocation.zeros((3, 1, 1)))


def test_feasibility_clean_and_violations():
    inst = unit_instance(n=2, k=2, j=1)
    s = np.zeros((2, 2, 1))
    s[0, 0, 0] = 1
    ok = Allocation(np.array([[0.5, 9.0], [0.0, 0.0]]), np.array([[0.9], [0.0]]), s)
    # power on inactive slots does not count towards the budgets
    assert check_feasibility(inst, ok).feasible

    s_bad = np.zeros((2, 2, 1))
    s_bad[0, 0, 0] = s_bad[0, 1, 0] = 1.0
    s_bad[1, 0, 0] = 0.5
    bad = Allocation(np.array([[0.8, 0.8], [-0.1, 0.0]]), np.array([[1.5], [0.0]]), s_bad)
    rep = check_feasibility(inst, bad)
    names = {v.constraint for v in rep.violations}
    assert {"C1", "C2", "C3", "C5", "C6"} <= names
    assert rep.by_constraint("C1")[0].residual == pytest.approx(0.6)
    assert rep.by_constraint("C6")[0].index == (0,)


def test_instance_validation():
    with pytest.raises(ParameterError):
        unit_instance(w=[1.5])
    with pytest.raises(ParameterError):
        unit_instance(rho=2.0)
    with pytest.raises(ParameterError):
        toy_instance([[1.0]], [[1.0]], [[[1.0]]], [1.0], p_dl=0.0)
    inst = unit_instance()
    assert isinstance(inst, ProblemInstance)
    with pytest.raises(ValueError):
        inst.w[0] = 0.0
