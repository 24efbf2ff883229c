"""Profits, settlement and NSOR reporting shared by every run mode.

Sign conventions: awarded power is positive when the aggregator injects
(generation) and negative when it withdraws (demand).  Multipliers ``phi``, ``pi``
are in $/MWh and follow ``L = J - phi (pg - q) - pi (lease - pes_b)``.

Profit accounting.  The aggregator pays the posted lease charges (capacity fees
and the O&M charge on its leased throughput) and settles its leased profile at
``pi``: it pays ``pi . pes_b``, i.e. buys discharged energy and sells charged
energy at the utility's marginal value.  The security multiplier ``phi`` is a
shadow price only and moves no money.  Hence::

    profit_A = -F_Ag - pi . pes_b
    profit_U = -F_U + fees + om_lease + pi . pes_b
    profit_A + profit_U = -J + fees + om_lease
"""
from __future__ import annotations

import csv
from dataclasses import asdict, dataclass

import numpy as np

from .lp import solve
from .models import aggregator_cost, build_combined_program, part_value
from .security import monte_carlo, widen_nsor


@dataclass(frozen=True)
class Profits:
    aggregator: float
    utility: float
    aggregator_own: float
    utility_own: float
    lease_fees: float
    lease_om: float
    lease_settlement: float
    lease_revenue: float
    combined_objective: float
    energy_traded: float
    energy_sold: float
    energy_bought: float
    leased_e: float
    leased_p: float

    def as_dict(self) -> dict:
        return asdict(self)


def settle(f_ag: float, f_u: float, lease, cap_e: float, cap_p: float, pc_b, pd_b, pes_b, pi, q) -> Profits:
    fees = lease.lambda_e * cap_e + lease.lambda_p * cap_p
    om = lease.c_om * float(np.sum(pc_b) + np.sum(pd_b))
    s = float(np.dot(pi, pes_b))
    q = np.asarray(q, dtype=float)
    return Profits(
        aggregator=-f_ag - s, utility=-f_u + fees + om + s, aggregator_own=-f_ag, utility_own=-f_u,
        lease_fees=fees, lease_om=om, lease_settlement=s, lease_revenue=fees + om + s,
        combined_objective=f_ag + f_u, energy_traded=float(np.abs(q).sum()),
        energy_sold=float(q[q > 0].sum()), energy_bought=float(-q[q < 0].sum()),
        leased_e=float(cap_e), leased_p=float(cap_p))


def der_range(agg_meta: dict) -> np.ndarray:
    """(T, 2) range the DERs alone can deliver (the offer range without the lease pair)."""
    keep = [i for i, n in enumerate(agg_meta["pairs"]) if n != "ses"]
    return np.stack([agg_meta["pair_min"][keep].sum(axis=0), agg_meta["pair_max"][keep].sum(axis=0)], axis=1)


def deliverable_request(agg_meta: dict, pes_b) -> np.ndarray:
    """Offer range clipped to what DERs plus the fixed leased profile can deliver."""
    d = der_range(agg_meta)
    off = agg_meta["offer_range"]
    pes = np.asarray(pes_b, dtype=float)
    return np.stack([np.maximum(off[:, 0], d[:, 0] + pes), np.minimum(off[:, 1], d[:, 1] + pes)], axis=1)


def nsor_table(nsor, award) -> list[dict]:
    """Per-interval NSOR bounds and awarded power (MW; negative = demand)."""
    nsor = np.asarray(nsor, dtype=float)
    award = np.asarray(award, dtype=float)
    rows = []
    for t in range(award.shape[-1]):
        rows.append({"t": t + 1, "nsor_min": float(nsor[t, 0]), "nsor_max": float(nsor[t, 1]),
                     "awarded": float(award[t]), "inside": bool(nsor[t, 0] - 1e-7 <= award[t] <= nsor[t, 1] + 1e-7)})
    return rows


def write_nsor_csv(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("# MW; negative = demand (grid to aggregator), positive = generation\n")
        w = csv.DictWriter(fh, fieldnames=["t", "nsor_min", "nsor_max", "awarded", "inside"])
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


@dataclass
class Outcome:
    """Decisions and accounting of one run, independent of how it was solved."""

    mode: str
    objective: float
    aggregator_objective: float
    utility_objective: float
    award: np.ndarray
    pes_b: np.ndarray
    pc_b: np.ndarray
    pd_b: np.ndarray
    cap_e: float
    cap_p: float
    p_es: np.ndarray
    net_device: np.ndarray
    phi: np.ndarray
    pi: np.ndarray
    lease: object
    agg_meta: dict
    profits: Profits | None = None
    nsor: np.ndarray | None = None
    mc: dict | None = None
    aggregator_cost: float = 0.0

    @property
    def planned_revenue(self) -> float:
        """Market revenue the aggregator's planning objective assigned to its award."""
        return self.aggregator_cost - self.aggregator_objective

    def finalize(self, grid, mc_samples: int = 0, seed: int = 0, mc_tol: float = 1e-6) -> "Outcome":
        self.profits = settle(self.aggregator_objective, self.utility_objective, self.lease, self.cap_e,
                              self.cap_p, self.pc_b, self.pd_b, self.pes_b, self.pi, self.award)
        req = deliverable_request(self.agg_meta, self.pes_b)
        self.nsor = widen_nsor(grid, req[None], self.award[None], self.pes_b[None])[0]
        if mc_samples:
            self.mc = monte_carlo(grid, self.nsor[None], self.pes_b[None], mc_samples, seed, mc_tol)
        return self


def outcome_from_parts(mode, agg_prog, x_agg, util_prog, y, phi, pi) -> Outcome:
    """Collect an outcome from separately solved aggregator and utility vectors."""
    am = agg_prog.meta["aggregators"][0]
    h = am["handles"]
    uh = util_prog.meta["utility"]["handles"]
    fa = part_value(agg_prog, x_agg, am["cols"])
    fu = part_value(util_prog, y, util_prog.meta["utility"]["cols"])
    return Outcome(mode, fa + fu, fa, fu, x_agg[h["p_award"]], x_agg[h["pes_b"]], x_agg[h["pc_b"]],
                   x_agg[h["pd_b"]], float(x_agg[h["cap_e"]]), float(x_agg[h["cap_p"]]), y[uh["p_es"]],
                   y[uh["pd"]] - y[uh["pc"]], np.asarray(phi, float).ravel(), np.asarray(pi, float).ravel(),
                   am["lease"], am, aggregator_cost=aggregator_cost(agg_prog, x_agg, am))


def solve_centralized(scenario, enabled: bool | None = None, revenue: str = "robust", quad_price=None,
                      tol: float | None = None):
    """Solve the combined program; returns (Outcome, Solution).  Raises on failure."""
    from .lp import SolveError

    prog = build_combined_program(scenario.aggregators(enabled), scenario.asset, scenario.grid,
                                  scenario.prices, revenue, quad_price)
    sol = solve(prog, scenario.tol if tol is None else tol)
    if not sol.ok:
        raise SolveError(f"centralized program: {sol.status}", sol)
    am = prog.meta["aggregators"][0]
    um = prog.meta["utility"]
    h, uh = am["handles"], um["handles"]
    x = sol.x
    fa = part_value(prog, x, am["cols"])
    fu = part_value(prog, x, um["cols"])
    out = Outcome("centralized", sol.objective, fa, fu, x[h["p_award"]], x[h["pes_b"]], x[h["pc_b"]],
                  x[h["pd_b"]], float(x[h["cap_e"]]), float(x[h["cap_p"]]), x[uh["p_es"]],
                  x[uh["pd"]] - x[uh["pc"]], -sol.y_eq[prog.eq_tags["phi"]], -sol.y_eq[prog.eq_tags["pi"]],
                  am["lease"], am, aggregator_cost=aggregator_cost(prog, x, am))
    return out, sol
