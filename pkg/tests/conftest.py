import numpy as np
import pytest

from seslease.config import load_scenario
from seslease.network import load_network


@pytest.fixture(scope="session")
def desk2():
    return load_scenario("desk2")


@pytest.fixture(scope="session")
def case69():
    return load_scenario("case69")


def chain(n, r=0.01, x=0.02, v_min=0.9025, v_max=1.1025):
    """Radial chain 1 - 2 - ... - n with identical branches."""
    return load_network({"buses": [{"id": i + 1, "v_min": v_min, "v_max": v_max} for i in range(n)],
                         "branches": [{"parent": i + 1, "child": i + 2, "r": r, "x": x} for i in range(n - 1)]})


def assert_close(a, b, tol):
    assert np.max(np.abs(np.asarray(a, float) - np.asarray(b, float))) <= tol


def epigraph_bound(prices, P):
    """Largest z allowed by the robust epigraph rows with the quantities fixed at P."""
    from seslease.lp import ProgramBuilder, solve
    from seslease.uncertainty import robust_price_epigraph

    P = np.asarray(P, float)
    b = ProgramBuilder()
    q = b.var("P", P.size, lb=P, ub=P)
    a = b.var("a", P.size, lb=0.0)
    z = b.var("z", cost=-1.0)
    for coeffs, rhs in robust_price_epigraph(prices, q, z, a):
        b.le(coeffs, rhs)
    sol = solve(b.build(), 1e-9, polish=True)
    assert sol.ok
    return float(sol.x[z])


def vertex_minimum(prices, P):
    from seslease.uncertainty import enumerate_vertices

    V = enumerate_vertices(prices, per_interval=False)
    return float(np.min(V @ np.asarray(P, float)))


def invariant_residuals(prog, x) -> dict:
    """Largest violation of each model invariant at a combined-program solution ``x``."""
    am = prog.meta["aggregators"][0]
    um = prog.meta["utility"]
    h, uh, lease = am["handles"], um["handles"], am["lease"]
    asset = um["asset"]
    out = {}
    out["cyclic utility"] = abs(x[uh["e"]][-1] - x[uh["e0"]])
    out["cyclic lease"] = abs(x[h["e_b"]][-1] - 0.5 * x[h["cap_e"]])
    if "des_e" in h:
        e_max = prog.ub[h["des_e"][:, -1]]
        out["cyclic des"] = float(np.max(np.abs(x[h["des_e"][:, -1]] - 0.5 * e_max)))
    alpha = x[h["alpha"]]
    out["offer monotone"] = max(float(np.max(alpha[:-1] - alpha[1:], initial=0.0)), 0.0)
    out["offer floor"] = max(float(np.max(am["pair_cost"] - alpha)), 0.0)
    q, P = x[h["p_award"]], x[h["P"]]
    out["award = sum of pairs"] = float(np.max(np.abs(q - P.sum(axis=0))))
    out["award split"] = float(np.max(np.abs(q - x[h["pes_b"]] - x[h["p_ag"]])))
    net_dev = x[uh["pd"]] - x[uh["pc"]]
    out["storage balance"] = float(np.max(np.abs(net_dev - x[uh["lease"]].sum(axis=0) - x[uh["p_es"]])))
    branch = np.maximum((1 / asset.eta_d - 1) * x[uh["pd"]], (1 - asset.eta_c) * x[uh["pc"]])
    out["loss tight"] = float(np.max(np.abs(x[uh["loss"]] - branch)))
    lam_e, lam_p, k_r = __import__("seslease.models", fromlist=["x"]).lease_price_floor(
        asset.r, asset.y, asset.c_e, asset.c_p)
    out["lease floor"] = max(lam_e - lease.lambda_e, lam_p - lease.lambda_p, 0.0) if lease.enabled else 0.0
    return out
