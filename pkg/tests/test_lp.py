import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from seslease.lp import (INFEASIBLE, OPTIMAL, UNBOUNDED, ConvexProgram, ProgramBuilder, infeasible_families,
                         priced_program, solve, solve_differentiable)


def scalar(lb=-np.inf, ub=np.inf, cost=0.0, eps=0.0):
    b = ProgramBuilder()
    b.var("x", 1, lb=lb, ub=ub, cost=cost)
    return b.build().replace(eps=eps)


def test_lower_bound_lp():
    b = ProgramBuilder()
    x = b.var("x", cost=1.0)
    b.ge({x: 1.0}, 1.0)
    sol = solve(b.build())
    assert sol.status == OPTIMAL
    assert sol.x[x] == pytest.approx(1.0, abs=1e-8) and sol.objective == pytest.approx(1.0, abs=1e-8)


def test_upper_bound_binding():
    sol = solve(scalar(0.0, 3.0, -1.0))
    assert sol.ok and sol.x[0] == pytest.approx(3.0, abs=1e-8)


def test_regularized_quadratic():
    sol = solve(scalar(cost=-4.0, eps=2.0).replace(const=4.0))
    assert sol.ok and sol.x[0] == pytest.approx(2.0, abs=1e-8)
    assert sol.objective == pytest.approx(0.0, abs=1e-8)
    assert sol.kkt["gap"] <= 1e-7 and sol.kkt["stationarity"] <= 1e-7


def test_infeasible_and_unbounded_are_certified():
    b = ProgramBuilder()
    x = b.var("x", lb=0.0, ub=1.0)
    b.ge({x: 1.0}, 2.0, tag="a0.demand")
    sol = solve(b.build())
    assert sol.status == INFEASIBLE and sol.x is None
    fam = infeasible_families(sol)
    assert "demand" in fam
    assert solve(scalar(cost=-1.0)).status == UNBOUNDED


def test_fixed_variables():
    sol = solve(scalar(2.5, 2.5, 1.0))
    assert sol.ok and sol.x[0] == 2.5


def random_lp(rng, n=5, m=7):
    A = rng.normal(size=(m, n))
    x0 = rng.uniform(-1, 1, n)
    b = A @ x0 + rng.uniform(0.1, 1.0, m)
    c = rng.normal(size=n)
    return ConvexProgram(c, sp.csr_matrix(A), b, sp.csr_matrix((0, n)), np.zeros(0),
                         np.full(n, -5.0), np.full(n, 5.0))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_strong_duality_and_row_scaling(seed):
    rng = np.random.default_rng(seed)
    prog = random_lp(rng)
    sol = solve(prog, 1e-8)
    assert sol.ok
    assert abs(sol.kkt["primal_objective"] - sol.kkt["dual_objective"]) <= 1e-6 * (1 + abs(sol.objective))
    d = rng.uniform(0.1, 10.0, prog.b_ub.size)
    scaled = prog.replace(A_ub=sp.csr_matrix(sp.diags(d) @ prog.A_ub), b_ub=d * prog.b_ub)
    s2 = solve(scaled, 1e-8)
    assert s2.ok and s2.objective == pytest.approx(sol.objective, abs=1e-6 * (1 + abs(sol.objective)))


def test_triplet_round_trip():
    prog = random_lp(np.random.default_rng(1))
    back = ConvexProgram.from_triplets(prog.to_triplets())
    assert solve(back).objective == pytest.approx(solve(prog).objective, abs=1e-9)


# -- differentiable solve --------------------------------------------------

def test_scalar_interior_derivative():
    prog = scalar(-10.0, 10.0)
    ds = solve_differentiable(prog, [0], [2.0], eps=1.0, tol=1e-9)
    assert ds.solution.x[0] == pytest.approx(2.0, abs=1e-7)
    assert ds.jacobian[0, 0] == pytest.approx(1.0, abs=1e-9)


def test_scalar_bound_derivative():
    ds = solve_differentiable(scalar(-10.0, 10.0), [0], [20.0], eps=1.0, tol=1e-9)
    assert ds.solution.x[0] == pytest.approx(10.0, abs=1e-7)
    assert ds.jacobian[0, 0] == pytest.approx(0.0, abs=1e-12)


def test_needs_positive_eps():
    with pytest.raises(ValueError):
        solve_differentiable(scalar(-1.0, 1.0), [0], [1.0], eps=0.0)


def random_qp(rng, n=6, m=5, k=3):
    A = rng.normal(size=(m, n))
    b = A @ rng.uniform(-0.5, 0.5, n) + rng.uniform(0.2, 1.0, m)
    E = rng.normal(size=(1, n))
    return ConvexProgram(rng.normal(size=n), sp.csr_matrix(A), b, sp.csr_matrix(E), E @ np.zeros(n),
                         np.full(n, -2.0), np.full(n, 2.0)), np.arange(k)


@pytest.mark.parametrize("seed", range(5))
def test_random_qp_jacobian_vs_finite_differences(seed):
    rng = np.random.default_rng(seed)
    prog, cols = random_qp(rng)
    lam = rng.normal(size=cols.size)
    eps, h = 0.5, 1e-5
    ds = solve_differentiable(prog, cols, lam, eps=eps, tol=1e-9)
    fd = np.empty_like(ds.jacobian)
    for j in range(cols.size):
        e = np.zeros(cols.size)
        e[j] = h
        xp = solve(priced_program(prog, cols, lam + e, eps), 1e-9).x
        xm = solve(priced_program(prog, cols, lam - e, eps), 1e-9).x
        fd[:, j] = (xp - xm) / (2 * h)
    err = np.linalg.norm(ds.jacobian - fd) / max(np.linalg.norm(fd), 1e-12)
    assert err <= 1e-4


def test_small_eps_recovers_lp_value():
    prog = random_lp(np.random.default_rng(4))
    exact = solve(prog, 1e-9)
    for eps in (1e-2, 1e-3):
        reg = solve(prog.replace(eps=eps), 1e-9)
        assert abs(reg.objective - exact.objective) <= eps * (1 + float(exact.x @ exact.x))


def test_diagnosis_names_the_limiting_family():
    b = ProgramBuilder()
    x = b.var("x", lb=0.0)
    y = b.var("y")
    b.eq({y: 1.0, x: -1.0}, 0.0, tag="a0.define")
    b.le({y: 1.0}, 1.0, tag="a0.cap")
    b.ge({x: 1.0}, 2.0, tag="a0.demand")
    sol = solve(b.build())
    from seslease.lp import diagnose_infeasibility
    assert set(diagnose_infeasibility(sol)) == {"define", "cap", "demand"}
    assert set(diagnose_infeasibility(sol, skip={"define"})) == {"cap", "demand"}


def test_polish_lands_on_vertex():
    # max x + y  s.t. x + 2y <= 4, 3x + y <= 6: vertex (1.6, 1.2)
    b = ProgramBuilder()
    x = b.var("x", lb=0.0, cost=-1.0)
    y = b.var("y", lb=0.0, cost=-1.0)
    b.le({x: 1.0, y: 2.0}, 4.0)
    b.le({x: 3.0, y: 1.0}, 6.0)
    sol = solve(b.build(), 1e-9, polish=True)
    assert sol.ok and sol.kkt.get("polished")
    assert np.max(np.abs(sol.x - [1.6, 1.2])) <= 1e-14
