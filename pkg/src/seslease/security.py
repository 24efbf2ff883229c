"""Network security of aggregator awards under the box uncertainty.

An aggregator's award ``P~_g = lo + u (hi - lo)`` with ``u`` in [0, 1] is delivered
by its DERs in proportion to fixed participation factors, after removing the part
served by the leased storage (which sits at the root bus and moves no voltage).
Every bus voltage is affine in the uncertain data, so checking the box corners
checks the whole box.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .lp import ProgramBuilder, solve_or_raise
from .network import DnScenario, Network, voltage_profile, voltage_sensitivities
from .uncertainty import DnBox, enumerate_vertices, sample_interior


class InfeasibleSecurity(RuntimeError):
    def __init__(self, t, vertex_id, bus, violation, vertex=None):
        super().__init__(f"voltage limit violated at bus {bus}, interval {t}, vertex {vertex_id} "
                         f"(by {violation:.3g} pu^2)")
        self.t, self.vertex_id, self.bus, self.violation, self.vertex = t, vertex_id, bus, violation, vertex


@dataclass(frozen=True, eq=False)
class GridModel:
    """Utility-side data: feeder, deterministic injections, uncertainty, DER connection factors.

    ``p_base``: (n_bus, T) per-unit uncontrolled injections excluding the box
    buses' uncertain part; ``weights``: (B, n_bus) participation factors, rows sum to 1.
    """

    net: Network
    p_base: np.ndarray
    dn_box: DnBox
    weights: np.ndarray
    vertex_mode: str = "full"
    vertex_cap: int = 4096

    def __post_init__(self):
        p = np.asarray(self.p_base, dtype=float)
        w = np.atleast_2d(np.asarray(self.weights, dtype=float))
        if p.shape != (self.net.n_bus, self.dn_box.T):
            raise ValueError(f"p_base shape {p.shape} does not match the feeder and horizon")
        if w.shape[1] != self.net.n_bus or w.shape[0] != self.dn_box.n_aggregators:
            raise ValueError("weights must be (n_aggregators, n_bus)")
        if np.any(w < 0) or not np.allclose(w.sum(axis=1), 1.0):
            raise ValueError("participation factors must be nonnegative and sum to one")
        if self.vertex_mode not in ("full", "dominant"):
            raise ValueError("vertex_mode must be 'full' or 'dominant'")
        object.__setattr__(self, "p_base", p)
        object.__setattr__(self, "weights", w)

    @property
    def T(self) -> int:
        return self.dn_box.T

    @property
    def B(self) -> int:
        return self.weights.shape[0]

    @property
    def unc_index(self) -> np.ndarray:
        return np.array([self.net.index(j) for j in self.dn_box.buses], dtype=np.int64)

    def award_sensitivity(self) -> np.ndarray:
        """(n_bus, B): squared-voltage change per MW of aggregator award."""
        return voltage_sensitivities(self.net) @ self.weights.T / self.net.base_mva

    def vertices(self, t: int) -> np.ndarray:
        if self.vertex_mode == "full":
            return enumerate_vertices(_interval_box(self.dn_box, t), cap=self.vertex_cap)[0]
        lo, hi = self.dn_box.interval_bounds(t)
        return np.stack([lo, hi])

    def constants(self, t: int, pts: np.ndarray) -> np.ndarray:
        """Voltage part independent of the aggregators at each vertex, (n_v, n_bus)."""
        S = voltage_sensitivities(self.net)
        k = len(self.dn_box.buses)
        base = S @ self.p_base[:, t] + self.net.voltage_offset()
        return pts[:, k:k + 1] + base[None, :] + pts[:, :k] @ S[:, self.unc_index].T


def _interval_box(box: DnBox, t: int) -> DnBox:
    return DnBox(box.buses, box.p_inj_ex[:, t:t + 1], box.delta_g[:, t:t + 1],
                 box.v_set_min, box.v_set_max, box.n_aggregators)


def _row_sets(grid: GridModel, t: int):
    """Yield (pts, const, u, upper_mask, lower_mask) for one interval.

    In dominant mode the all-high corner carries the upper rows and the
    all-low corner the lower rows; this is exact because the sensitivities,
    participation factors and award coefficients are all nonnegative.
    """
    pts = grid.vertices(t)
    k = len(grid.dn_box.buses)
    const = grid.constants(t, pts)
    u = pts[:, k + 1:]
    n_v = pts.shape[0]
    upper = np.ones(n_v, dtype=bool)
    lower = np.ones(n_v, dtype=bool)
    if grid.vertex_mode == "dominant":
        upper[0] = False
        lower[1] = False
    return pts, const, u, upper, lower


def add_security_rows(b: ProgramBuilder, grid: GridModel, lo_cols, hi_cols, lease_cols, tag="security"):
    """Vertex rows ``v_min <= v_j <= v_max`` for every non-root bus the awards can move.

    Buses untouched by every aggregator are checked as constants and raise
    :class:`InfeasibleSecurity` if already violated.
    """
    net = grid.net
    sens = grid.award_sensitivity()
    vmin, vmax = net.v_min, net.v_max
    moved = np.flatnonzero(np.any(sens > 0, axis=1))
    moved = moved[moved != 0]
    fixed = np.setdiff1d(np.arange(1, net.n_bus), moved)
    B = grid.B
    n_rows = 0
    for t in range(grid.T):
        pts, const, u, upper, lower = _row_sets(grid, t)
        if fixed.size:
            over = np.maximum(const[:, fixed] - vmax[fixed], vmin[fixed] - const[:, fixed])
            i, j = np.unravel_index(np.argmax(over), over.shape)
            if over[i, j] > 1e-9:
                raise InfeasibleSecurity(t, int(i), net.buses[fixed[j]].id, float(over[i, j]), pts[i])
        if not moved.size:
            continue
        s = sens[moved]                                 # (m, B)
        cols = np.concatenate([np.broadcast_to(lo_cols[:, t], (B,)), np.broadcast_to(hi_cols[:, t], (B,)),
                               np.broadcast_to(lease_cols[:, t], (B,))])
        for mask, sign, bound in ((upper, 1.0, vmax), (lower, -1.0, vmin)):
            uu = u[mask]                                # (n, B)
            c = const[mask][:, moved]                   # (n, m)
            n = uu.shape[0]
            coef = np.concatenate([
                (1.0 - uu)[:, None, :] * s[None, :, :],
                uu[:, None, :] * s[None, :, :],
                -np.broadcast_to(s[None, :, :], (n,) + s.shape),
            ], axis=2) * sign                           # (n, m, 3B)
            rhs = sign * (bound[moved][None, :] - c)
            b.le_block(np.broadcast_to(cols, coef.shape).reshape(-1, 3 * B), coef.reshape(-1, 3 * B),
                       rhs.ravel(), tag=tag)
            n_rows += rhs.size
    return n_rows


@dataclass(frozen=True)
class Verdict:
    feasible: bool
    t: int = -1
    vertex_id: int = -1
    bus: int = -1
    violation: float = 0.0

    def as_dict(self) -> dict:
        if self.feasible:
            return {"status": "feasible"}
        return {"status": "violation", "t": self.t, "vertex": self.vertex_id, "bus": self.bus,
                "amount": self.violation}


def vertex_voltages(grid: GridModel, nsor: np.ndarray, lease: np.ndarray, t: int,
                    pts: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Vertex scenarios and their squared voltages for interval t by a full tree sweep.

    ``nsor``: (B, T, 2) MW, ``lease``: (B, T) MW.  Returns (pts, v) with v of
    shape (n_bus, n_v).  Independent of the sensitivity matrix.
    """
    pts = grid.vertices(t) if pts is None else pts
    return pts, scenario_voltages(grid, nsor, lease, t, pts)


def scenario_voltages(grid: GridModel, nsor, lease, t: int, pts: np.ndarray) -> np.ndarray:
    net = grid.net
    k = len(grid.dn_box.buses)
    n_v = pts.shape[0]
    p = np.repeat(grid.p_base[:, t:t + 1], n_v, axis=1)
    p[grid.unc_index] += pts[:, :k].T
    u = pts[:, k + 1:]                                       # (n_v, B)
    lo, hi = nsor[:, t, 0], nsor[:, t, 1]
    award = lo[None, :] + u * (hi - lo)[None, :]             # (n_v, B) MW
    der = (award - lease[:, t][None, :]) / net.base_mva      # delivered by DERs
    p += grid.weights.T @ der.T
    return voltage_profile(net, DnScenario(p, v_set=pts[:, k]))


def check_nsor(grid: GridModel, nsor, lease, tol: float = 1e-9) -> Verdict:
    """Worst vertex violation of fixed NSOR bounds (the combinatorial route)."""
    worst = Verdict(True)
    vmin, vmax = grid.net.v_min[1:], grid.net.v_max[1:]
    for t in range(grid.T):
        pts, v = vertex_voltages(grid, np.asarray(nsor, float), np.asarray(lease, float), t)
        over = np.maximum(v[1:] - vmax[:, None], vmin[:, None] - v[1:])
        j, i = np.unravel_index(np.argmax(over), over.shape)
        if over[j, i] > tol and over[j, i] > worst.violation:
            worst = Verdict(False, t, int(i), grid.net.buses[j + 1].id, float(over[j, i]))
    return worst


def widen_nsor(grid: GridModel, requested, p_g, lease) -> np.ndarray:
    """Widest secure NSOR inside ``requested`` (B, T, 2) that still contains ``p_g``."""
    B, T = grid.B, grid.T
    b = ProgramBuilder()
    req = np.asarray(requested, float)
    pg = np.asarray(p_g, float)
    lo = b.var("lo", (B, T), lb=np.minimum(req[:, :, 0], pg), ub=pg, cost=1.0)
    hi = b.var("hi", (B, T), lb=pg, ub=np.maximum(req[:, :, 1], pg), cost=-1.0)
    L = b.var("lease", (B, T), lb=lease, ub=lease)
    add_security_rows(b, grid, lo, hi, L)
    sol = solve_or_raise(b.build(), what="NSOR widening")
    out = np.stack([sol.x[lo], sol.x[hi]], axis=2)
    # the interior point iterate may sit a hair off p_g; keep the containment exact
    out[:, :, 0] = np.minimum(out[:, :, 0], pg)
    out[:, :, 1] = np.maximum(out[:, :, 1], pg)
    return out


def monte_carlo(grid: GridModel, nsor, lease, n: int = 1000, seed: int = 0, tol: float = 1e-6) -> dict:
    """Sample the box interior (injections, root voltage, award fractions) and count violations."""
    nsor = np.asarray(nsor, float)
    lease = np.asarray(lease, float)
    vmin, vmax = grid.net.v_min[1:], grid.net.v_max[1:]
    flagged = np.zeros(n, dtype=bool)
    worst = 0.0
    for t in range(grid.T):
        lo, hi = grid.dn_box.interval_bounds(t)
        pts = sample_interior(lo, hi, n, seed + 7919 * t)
        v = scenario_voltages(grid, nsor, lease, t, pts)
        over = np.maximum(v[1:] - vmax[:, None], vmin[:, None] - v[1:])
        flagged |= np.any(over > tol, axis=0)
        worst = max(worst, float(over.max()))
    # a sample is one full-horizon scenario; each interval draws its own coordinates
    return {"samples": n, "violations": int(flagged.sum()), "max_violation": worst, "tolerance": tol}
