import numpy as np
import pytest

from seslease.lp import solve
from seslease.models import (DerPortfolio, DerUnit, LeaseTerms, SesAsset, build_aggregator_program,
                             build_combined_program, build_utility_program, lease_price_floor, offer_pairs)
from seslease.outcome import solve_centralized
from seslease.security import GridModel, InfeasibleSecurity, check_nsor, vertex_voltages, widen_nsor
from seslease.uncertainty import DnBox, PriceBox

from conftest import chain, invariant_residuals


def test_lease_floor_one_year():
    _, _, k_r = lease_price_floor(0.1, 1, 1.0, 1.0)
    assert k_r == pytest.approx(1.1 / 365, rel=1e-12)


def test_lease_floor_ten_years():
    lam_e, lam_p, k_r = lease_price_floor(0.08, 10, 100.0, 0.0)
    assert k_r == pytest.approx(4.083e-4, rel=1e-3)
    assert lam_e == pytest.approx(100 * k_r) and lam_p == 0.0


def test_lease_floor_zero_investment():
    for r, y in ((0.05, 3), (0.2, 30)):
        assert lease_price_floor(r, y, 0.0, 5.0)[0] == 0.0


def one_dg(T=1, p_max=1.0, cost=10.0):
    return DerPortfolio((DerUnit("dg", 2, np.zeros(T), np.full(T, p_max)),), c_dg=cost)


def aggregator_optimum(port, price, delta=0.0, lease=None):
    prog = build_aggregator_program(port, lease, PriceBox(price, delta))
    sol = solve(prog, 1e-9)
    assert sol.ok
    return sol, prog.meta["aggregators"][0]["handles"]


def test_profitable_toy():
    sol, h = aggregator_optimum(one_dg(), [20.0])
    assert sol.x[h["p_award"]][0] == pytest.approx(1.0, abs=1e-8)
    assert -sol.objective == pytest.approx(10.0, abs=1e-8)


def test_loss_making_price_is_avoided():
    sol, h = aggregator_optimum(one_dg(), [5.0])
    assert sol.x[h["p_award"]][0] == pytest.approx(0.0, abs=1e-8)
    assert -sol.objective == pytest.approx(0.0, abs=1e-8)


def test_empty_resources_award_zero():
    lease = SesAsset(0.0, 0.0).lease_terms()
    sol, h = aggregator_optimum(one_dg(T=3, p_max=0.0), [30.0, 40.0, 50.0], 5.0, lease)
    assert np.allclose(sol.x[h["p_award"]], 0.0, atol=1e-9)
    assert abs(sol.objective) <= 1e-8


def test_robust_revenue_is_worst_case():
    # selling 1 MW in a [15, 25] box is valued at the low corner
    sol, h = aggregator_optimum(one_dg(cost=0.0), [20.0], 5.0)
    assert -sol.objective == pytest.approx(15.0, abs=1e-8)


def test_pairs_cover_cost_classes(desk2):
    pairs = offer_pairs(desk2.portfolio, desk2.lease(True))
    names = [p.name for p in pairs]
    assert set(names) == {"dg", "dr", "des_ch", "des_dis", "ses"}
    means = [p.cost.mean() for p in pairs]
    assert means == sorted(means)


def test_der_validation():
    with pytest.raises(ValueError):
        DerUnit("dg", 2, [1.0], [0.5])
    with pytest.raises(ValueError):
        DerUnit("des", 2, [0.1], [0.5])
    with pytest.raises(ValueError):
        DerUnit("pv", 2, [0.0], [1.0])


def two_bus_grid(T, v_max=1.0201):
    net = chain(2, v_min=0.81, v_max=v_max)
    box = DnBox((), np.zeros((0, T)), np.zeros((0, T)), 1.0, 1.0, 1)
    return GridModel(net, np.zeros((2, T)), box, [[0.0, 1.0]])


def test_max_secure_injection_two_bus():
    T = 2
    grid = two_bus_grid(T)
    nsor = widen_nsor(grid, np.array([[[-2.0, 2.0]] * T]), np.zeros((1, T)), np.zeros((1, T)))
    assert nsor[0, :, 1] == pytest.approx([1.005, 1.005], abs=1e-9)
    assert check_nsor(grid, nsor, np.zeros((1, T))).feasible
    bad = np.array([[[0.0, 1.006]] * T])
    verdict = check_nsor(grid, bad, np.zeros((1, T)))
    assert not verdict.feasible and verdict.bus == 2
    with pytest.raises(InfeasibleSecurity):
        build_utility_program(SesAsset(1.0, 0.5), grid, PriceBox(np.full(T, 30.0), 0.0), bad,
                              pin={"p_g": np.zeros((1, T)), "lease": np.zeros((1, T)), "nsor": bad})


def test_discharge_loss_epigraph():
    T = 2
    grid = two_bus_grid(T)
    asset = SesAsset(4.0, 2.0, eta_c=0.922, eta_d=0.922, c_om=1.0, soc_min=0.1)
    zero = np.zeros((1, T))
    prog = build_utility_program(asset, grid, PriceBox([50.0, 20.0], 0.0), np.zeros((1, T, 2)),
                                 pin={"p_g": zero, "lease": zero})
    h = prog.meta["utility"]["handles"]
    lb, ub = prog.lb.copy(), prog.ub.copy()
    lb[h["pd"][0]] = ub[h["pd"][0]] = 1.0
    lb[h["pc"][0]] = ub[h["pc"][0]] = 0.0
    sol = solve(prog.replace(lb=lb, ub=ub), 1e-9)
    assert sol.ok
    assert sol.x[h["loss"][0]] == pytest.approx(1 / 0.922 - 1, abs=1e-8)


def test_decoupled_device_arbitrage():
    # no award, no lease: the utility only arbitrages its device
    T = 4
    grid = two_bus_grid(T)
    asset = SesAsset(4.0, 2.0, c_om=0.0)
    zero = np.zeros((1, T))
    prog = build_utility_program(asset, grid, PriceBox([10.0, 10.0, 80.0, 80.0], 0.0), np.zeros((1, T, 2)),
                                 pin={"p_g": zero, "lease": zero})
    sol = solve(prog, 1e-9)
    h = prog.meta["utility"]["handles"]
    assert sol.ok and sol.objective < 0
    assert np.all(sol.x[h["p_es"]][:2] <= 1e-8) and np.all(sol.x[h["p_es"]][2:] >= -1e-8)


@pytest.mark.parametrize("name", ["desk2", "case69"])
def test_zero_capacity_decouples(name, request):
    sc = request.getfixturevalue(name)
    central, _ = solve_centralized(sc, enabled=False)
    port, lease = sc.aggregators(False)[0]
    alone = solve(build_aggregator_program(port, lease, sc.prices), 1e-9)
    assert alone.ok
    assert abs(central.aggregator_objective - alone.objective) <= 1e-8 * max(1.0, abs(alone.objective))


def test_combined_objective_is_sum_of_parts(desk2):
    out, sol = solve_centralized(desk2)
    assert out.objective == pytest.approx(out.aggregator_objective + out.utility_objective, abs=1e-9)


@pytest.mark.parametrize("name", ["desk2", "case69"])
@pytest.mark.parametrize("enabled", [True, False])
def test_model_invariants(name, enabled, request):
    sc = request.getfixturevalue(name)
    prog = build_combined_program(sc.aggregators(enabled), sc.asset, sc.grid, sc.prices)
    sol = solve(prog, sc.tol)
    assert sol.ok
    res = invariant_residuals(prog, sol.x)
    assert max(res.values()) <= 1e-8, res


def test_all_vertices_secure(desk2):
    out, _ = solve_centralized(desk2)
    out.finalize(desk2.grid)
    grid = desk2.grid
    for t in range(desk2.T):
        _, v = vertex_voltages(grid, out.nsor[None], out.pes_b[None], t)
        assert np.all(v[1:] <= grid.net.v_max[1:, None] + 1e-9)
        assert np.all(v[1:] >= grid.net.v_min[1:, None] - 1e-9)


def test_lease_terms_respect_floor(desk2):
    lt = desk2.lease(True)
    lam_e, lam_p, _ = lease_price_floor(desk2.asset.r, desk2.asset.y, desk2.asset.c_e, desk2.asset.c_p)
    assert lt.lambda_e >= lam_e and lt.lambda_p >= lam_p
    assert isinstance(lt, LeaseTerms) and lt.enabled
