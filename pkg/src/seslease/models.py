"""Aggregator and utility programs, the lease-price floor and the combined model.

Units: power in MW, energy in MWh, prices in $/MWh (capacity prices in $/MWh and
$/MW per day), one interval = one hour.  Every program is a minimization; the
aggregator term is its negated worst-case profit and the utility term is its
device cost net of market revenue of its own share of the storage.  Lease fees
and the O&M charge on the leased profile are counted once, on the paying side,
so the two parts add up to the combined objective without double counting.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .lp import ConvexProgram, ProgramBuilder
from .uncertainty import PriceBox, robust_price_epigraph

KINDS = ("dg", "dr", "des")
# rows that only define a variable; dropping one frees it rather than relaxing a limit
DEFINITIONAL_TAGS = frozenset({"pair_def", "award_sum", "der_sum", "der_bus", "award_split", "lease_net",
                               "balance", "nsor", "phi", "pi", "robust"})


def lease_price_floor(r: float, y: float, c_e: float, c_p: float) -> tuple[float, float, float]:
    """Daily-amortized floors ``(lambda_E_min, lambda_P_min, k_r)``."""
    if not r > 0:
        raise ValueError("discount rate must be positive")
    if y < 1:
        raise ValueError("lifetime must be at least one year")
    g = (1.0 + r) ** y
    k_r = r * g / (365.0 * (g - 1.0))
    return k_r * c_e, k_r * c_p, k_r


@dataclass(frozen=True, eq=False)
class DerUnit:
    """One DER at one bus.  ``p_min``/``p_max`` are per-interval injection limits.

    For ``des`` units ``-p_min`` is the charge rate and ``p_max`` the discharge rate.
    """

    kind: str
    bus: int
    p_min: np.ndarray
    p_max: np.ndarray
    e_max: float = 0.0
    soc_min: float = 0.0
    eta_c: float = 1.0
    eta_d: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown DER kind {self.kind!r}")
        lo = np.atleast_1d(np.asarray(self.p_min, dtype=float))
        hi = np.broadcast_to(np.asarray(self.p_max, dtype=float), lo.shape).copy()
        if np.any(lo > hi + 1e-12):
            raise ValueError(f"DER at bus {self.bus}: p_min exceeds p_max")
        if self.kind == "des" and (np.any(lo > 0) or np.any(hi < 0)):
            raise ValueError("storage limits must straddle zero")
        if self.kind == "dg" and np.any(lo < 0):
            raise ValueError("generation lower limit must be nonnegative")
        if not (0 < self.eta_c <= 1 and 0 < self.eta_d <= 1):
            raise ValueError("efficiencies must lie in (0, 1]")
        object.__setattr__(self, "p_min", lo)
        object.__setattr__(self, "p_max", hi)


@dataclass(frozen=True, eq=False)
class DerPortfolio:
    units: tuple
    c_dg: float = 0.0
    c_dr: float = 0.0
    c_des: float = 0.0
    alpha_min: float = -1000.0
    alpha_max: float = 1000.0
    weights: dict | None = None

    @property
    def T(self) -> int:
        return self.units[0].p_min.size if self.units else 0

    def of_kind(self, kind):
        return [u for u in self.units if u.kind == kind]

    @property
    def buses(self) -> list[int]:
        return sorted({u.bus for u in self.units})

    def bus_weights(self) -> dict[int, float]:
        """Participation factors used to spread the aggregate over connection buses."""
        if self.weights is not None:
            w = {int(k): float(v) for k, v in self.weights.items()}
        else:
            w = {j: 0.0 for j in self.buses}
            for u in self.units:
                w[u.bus] += float(np.sum(u.p_max - u.p_min))
        total = sum(w.values())
        if total <= 0:
            n = max(len(w), 1)
            return {j: 1.0 / n for j in w}
        return {j: v / total for j, v in w.items()}


@dataclass(frozen=True)
class SesAsset:
    e_max: float
    p_max: float
    eta_c: float = 0.922
    eta_d: float = 0.922
    c_om: float = 10.0
    c_e: float = 0.0
    c_p: float = 0.0
    r: float = 0.08
    y: float = 10.0
    k_c: float = 0.5
    k_d: float = 0.5
    k: float = 0.5
    soc_min: float = 0.1

    def __post_init__(self):
        if self.e_max < 0 or self.p_max < 0:
            raise ValueError("storage capacities must be nonnegative")
        if not (0 < self.eta_c <= 1 and 0 < self.eta_d <= 1):
            raise ValueError("efficiencies must lie in (0, 1]")

    def lease_terms(self, enabled: bool = True) -> "LeaseTerms":
        lam_e, lam_p, _ = lease_price_floor(self.r, self.y, self.c_e, self.c_p)
        return LeaseTerms(lam_e, lam_p, self.c_om, self.eta_c, self.eta_d, self.k_c, self.k_d, self.k,
                          self.e_max if enabled else 0.0, self.p_max if enabled else 0.0, self.soc_min)


@dataclass(frozen=True)
class LeaseTerms:
    """What an aggregator is told about the leasable storage."""

    lambda_e: float
    lambda_p: float
    c_om: float
    eta_c: float
    eta_d: float
    k_c: float
    k_d: float
    k: float
    e_cap: float
    p_cap: float
    soc_min: float = 0.1

    @property
    def enabled(self) -> bool:
        return self.e_cap > 0 and self.p_cap > 0


@dataclass(frozen=True)
class Pair:
    name: str
    cost: np.ndarray
    p_min: np.ndarray
    p_max: np.ndarray


def offer_pairs(port: DerPortfolio, lease: LeaseTerms | None) -> list[Pair]:
    """Price-quantity pairs in merit order.

    Each pair collects one cost class (generation, flexible demand, DES charging,
    DES discharging, leased storage), so assigning the class cost to the pair
    makes the pair cost equal the DER cost in every solution.
    """
    T = port.T
    pairs = []
    dg, dr, des = port.of_kind("dg"), port.of_kind("dr"), port.of_kind("des")
    full = lambda v: np.full(T, float(v))
    if dg:
        pairs.append(Pair("dg", full(port.c_dg), sum(u.p_min for u in dg), sum(u.p_max for u in dg)))
    if dr:
        pairs.append(Pair("dr", full(port.c_dr), sum(u.p_min for u in dr), sum(u.p_max for u in dr)))
    if des:
        pairs.append(Pair("des_ch", full(-port.c_des), sum(u.p_min for u in des), np.zeros(T)))
        pairs.append(Pair("des_dis", full(port.c_des), np.zeros(T), sum(u.p_max for u in des)))
    if lease is not None and lease.enabled:
        pairs.append(Pair("ses", np.zeros(T), full(-lease.p_cap), full(lease.p_cap)))
    order = sorted(range(len(pairs)), key=lambda i: (float(pairs[i].cost.mean()), i))
    return [pairs[i] for i in order]


def offer_range(pairs: list[Pair]) -> np.ndarray:
    """Initial offer range per interval, shape (T, 2)."""
    return np.stack([sum(p.p_min for p in pairs), sum(p.p_max for p in pairs)], axis=1)


def add_aggregator(b: ProgramBuilder, port: DerPortfolio, lease: LeaseTerms | None,
                   prices: PriceBox | None, prefix: str = "a0.", revenue: str = "robust",
                   quad_price: tuple | None = None) -> dict:
    """Append the aggregator block to ``b`` and return its column handles.

    ``revenue``: ``robust`` (worst case over the price box, exact epigraph),
    ``expected`` (linear at lambda_ex), ``quadratic`` (revenue sum_t (a_t + b_t q_t) q_t
    with ``quad_price = (a, b)``, b <= 0) or ``none`` (cost terms only).
    """
    T = port.T
    if T == 0:
        raise ValueError("portfolio has no units")
    if lease is None:
        lease = LeaseTerms(0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0)
    pairs = offer_pairs(port, lease)
    S = len(pairs)
    v = lambda name, *a, **k: b.var(prefix + name, *a, **k)
    start = b.n

    cost = np.stack([p.cost for p in pairs])
    lo = np.stack([p.p_min for p in pairs])
    hi = np.stack([p.p_max for p in pairs])
    if np.any(lo > hi + 1e-12):
        raise ValueError("pair lower bound exceeds upper bound")
    if np.any(cost > port.alpha_max):
        raise ValueError("pair cost above the offer price cap; offer floor infeasible")
    P = v("P", (S, T), lb=lo, ub=hi, cost=cost)
    alpha = v("alpha", (S, T), lb=np.maximum(port.alpha_min, cost), ub=port.alpha_max)
    for s in range(S - 1):
        for t in range(T):
            b.le({alpha[s, t]: 1.0, alpha[s + 1, t]: -1.0}, 0.0, tag=prefix + "offer_monotone")
    q = v("p_award", T)
    p_ag = v("p_ag", T)

    units = {k: port.of_kind(k) for k in KINDS}
    cols = {}
    if units["dg"]:
        cols["dg"] = v("dg", (len(units["dg"]), T), lb=np.stack([u.p_min for u in units["dg"]]),
                       ub=np.stack([u.p_max for u in units["dg"]]))
    if units["dr"]:
        cols["dr"] = v("dr", (len(units["dr"]), T), lb=np.stack([u.p_min for u in units["dr"]]),
                       ub=np.stack([u.p_max for u in units["dr"]]))
    if units["des"]:
        des = units["des"]
        n = len(des)
        cols["des_c"] = v("des_c", (n, T), lb=0.0, ub=np.stack([-u.p_min for u in des]))
        cols["des_d"] = v("des_d", (n, T), lb=0.0, ub=np.stack([u.p_max for u in des]))
        cols["des_e"] = v("des_e", (n, T), lb=np.array([[u.soc_min * u.e_max] for u in des]),
                          ub=np.array([[u.e_max] for u in des]))
        for i, u in enumerate(des):
            e, c, d = cols["des_e"][i], cols["des_c"][i], cols["des_d"][i]
            e0 = 0.5 * u.e_max
            for t in range(T):
                row = {e[t]: 1.0, c[t]: -u.eta_c, d[t]: 1.0 / u.eta_d}
                if t:
                    row[e[t - 1]] = -1.0
                b.eq(row, e0 if t == 0 else 0.0, tag=prefix + "des_dyn")
            b.eq({e[T - 1]: 1.0}, e0, tag=prefix + "des_cyclic")

    def unit_terms(t):
        row = {}
        for k in ("dg", "dr"):
            if k in cols:
                for i in range(cols[k].shape[0]):
                    row[cols[k][i, t]] = 1.0
        if "des_c" in cols:
            for i in range(cols["des_c"].shape[0]):
                row[cols["des_d"][i, t]] = 1.0
                row[cols["des_c"][i, t]] = -1.0
        return row

    names = [p.name for p in pairs]
    for t in range(T):
        for s, name in enumerate(names):
            if name == "ses":
                continue
            row = {P[s, t]: 1.0}
            if name in ("dg", "dr"):
                for i in range(cols[name].shape[0]):
                    row[cols[name][i, t]] = -1.0
            elif name == "des_ch":
                for i in range(cols["des_c"].shape[0]):
                    row[cols["des_c"][i, t]] = 1.0
            elif name == "des_dis":
                for i in range(cols["des_d"].shape[0]):
                    row[cols["des_d"][i, t]] = -1.0
            b.eq(row, 0.0, tag=prefix + "pair_def")
        row = {q[t]: 1.0}
        for s in range(S):
            row[P[s, t]] = -1.0
        b.eq(row, 0.0, tag=prefix + "award_sum")
        row = {p_ag[t]: 1.0}
        row.update({k: -val for k, val in unit_terms(t).items()})
        b.eq(row, 0.0, tag=prefix + "der_sum")

    # proportional dispatch over connection buses (the last bus follows from der_sum)
    w = port.bus_weights()
    buses = sorted(set(w) | set(port.buses))
    last = max(j for j in buses if w.get(j, 0.0) > 0) if any(v > 0 for v in w.values()) else buses[-1]
    for j in buses:
        if j == last:
            continue
        for t in range(T):
            row = {}
            for k in ("dg", "dr"):
                for i, u in enumerate(units[k]):
                    if u.bus == j:
                        row[cols[k][i, t]] = 1.0
            for i, u in enumerate(units["des"]):
                if u.bus == j:
                    row[cols["des_d"][i, t]] = 1.0
                    row[cols["des_c"][i, t]] = -1.0
            row[p_ag[t]] = -w.get(j, 0.0)
            b.eq(row, 0.0, tag=prefix + "der_bus")

    # leased storage
    pc = v("pc_b", T, lb=0.0, ub=lease.p_cap)
    pd = v("pd_b", T, lb=0.0, ub=lease.p_cap)
    pes = v("pes_b", T)
    e_b = v("e_b", T, lb=0.0)
    cap_e = v("cap_e", lb=0.0, ub=lease.e_cap, cost=lease.lambda_e)
    cap_p = v("cap_p", lb=0.0, ub=lease.p_cap, cost=lease.lambda_p)
    b.add_cost(pc, lease.c_om)
    b.add_cost(pd, lease.c_om)
    for t in range(T):
        b.le({pc[t]: 1.0, cap_p: -1.0}, 0.0, tag=prefix + "lease_rate")
        b.le({pd[t]: 1.0, cap_p: -1.0}, 0.0, tag=prefix + "lease_rate")
        b.le({pc[t]: 1.0, cap_e: -lease.k_c}, 0.0, tag=prefix + "lease_ratio")
        b.le({pd[t]: 1.0, cap_e: -lease.k_d}, 0.0, tag=prefix + "lease_ratio")
        b.eq({pes[t]: 1.0, pd[t]: -1.0, pc[t]: 1.0}, 0.0, tag=prefix + "lease_net")
        row = {e_b[t]: 1.0, pc[t]: -lease.eta_c, pd[t]: 1.0 / lease.eta_d}
        row[e_b[t - 1] if t else cap_e] = -1.0 if t else -0.5
        b.eq(row, 0.0, tag=prefix + "lease_dyn")
        b.le({e_b[t]: 1.0, cap_e: -1.0}, 0.0, tag=prefix + "lease_energy")
        b.le({e_b[t]: -1.0, cap_e: lease.soc_min}, 0.0, tag=prefix + "lease_energy")
    b.eq({e_b[T - 1]: 1.0, cap_e: -0.5}, 0.0, tag=prefix + "lease_cyclic")
    b.le({cap_p: 1.0, cap_e: -lease.k}, 0.0, tag=prefix + "lease_prop")
    # without a lease the split is implied by the pair rows, and a redundant row hurts
    if lease.enabled:
        for t in range(T):
            b.eq({q[t]: 1.0, pes[t]: -1.0, p_ag[t]: -1.0}, 0.0, tag=prefix + "award_split")

    handles = {"P": P, "alpha": alpha, "p_award": q, "p_ag": p_ag, "pc_b": pc, "pd_b": pd,
               "pes_b": pes, "e_b": e_b, "cap_e": cap_e, "cap_p": cap_p, **cols}
    rev_start = b.n
    if revenue == "robust":
        if prices is None:
            raise ValueError("robust revenue needs a price box")
        z = v("z", cost=-1.0)
        a = v("a", T, lb=0.0)
        for coeffs, rhs in robust_price_epigraph(prices, q, z, a):
            b.le(coeffs, rhs, tag=prefix + "robust")
        handles.update(z=z, a=a)
    elif revenue == "expected":
        b.add_cost(q, -prices.lambda_ex)
    elif revenue == "quadratic":
        qa, qb = (np.asarray(x, dtype=float) for x in quad_price)
        if np.any(qb > 0):
            raise ValueError("price slope must be nonpositive for a concave revenue")
        b.add_cost(q, -qa)
        b.add_diag_quad(q, -qb)
    elif revenue != "none":
        raise ValueError(f"unknown revenue model {revenue!r}")

    b.meta.setdefault("aggregators", []).append({
        "prefix": prefix, "cols": (start, b.n), "pairs": names, "pair_cost": cost,
        "pair_min": lo, "pair_max": hi, "offer_range": offer_range(pairs), "lease": lease,
        "revenue": revenue, "weights": w, "handles": handles, "rev_start": rev_start,
    })
    return handles


def build_aggregator_program(port: DerPortfolio, lease: LeaseTerms | None, prices: PriceBox | None,
                             revenue: str = "robust", quad_price=None, prefix: str = "a0.") -> ConvexProgram:
    b = ProgramBuilder()
    add_aggregator(b, port, lease, prices, prefix, revenue, quad_price)
    return b.build()


def aggregator_cost(prog: ConvexProgram, x: np.ndarray, agg_meta: dict) -> float:
    """DER, lease fee and O&M cost of one aggregator, without any market revenue term."""
    s, e = agg_meta["cols"][0], agg_meta["rev_start"]
    c = prog.c[s:e].copy()
    c[np.asarray(agg_meta["handles"]["p_award"]) - s] = 0.0
    return float(c @ x[s:e])


def part_value(prog: ConvexProgram, x: np.ndarray, cols: tuple[int, int]) -> float:
    """Objective contribution of a contiguous column range (its own cost terms only)."""
    s, e = cols
    val = float(prog.c[s:e] @ x[s:e])
    if prog.P is not None:
        Pb = prog.P[s:e, s:e]
        val += 0.5 * float(x[s:e] @ (Pb @ x[s:e]))
    return val


def add_utility(b: ProgramBuilder, asset: SesAsset, grid, prices: PriceBox, requested,
                prefix: str = "u.", pin: dict | None = None) -> dict:
    """Append the utility block (device dispatch, loss epigraph, NSOR security).

    ``requested``: (B, T, 2) NSOR request bounds.  ``pin`` optionally fixes the
    aggregator-facing values: ``p_g`` (B, T), ``lease`` (B, T) and ``nsor``
    (B, T, 2).  A pinned NSOR that is insecure raises ``InfeasibleSecurity``.
    """
    from .security import InfeasibleSecurity, add_security_rows, check_nsor

    B, T = grid.B, grid.T
    req = np.asarray(requested, dtype=float).reshape(B, T, 2)
    if pin and "nsor" in pin:
        verdict = check_nsor(grid, pin["nsor"], pin["lease"])
        if not verdict.feasible:
            raise InfeasibleSecurity(verdict.t, verdict.vertex_id, verdict.bus, verdict.violation)
    start = b.n
    v = lambda name, *a, **k: b.var(prefix + name, *a, **k)
    fix = lambda key, default: (pin[key], pin[key]) if pin and key in pin else default
    pg = v("pg", (B, T), *fix("p_g", (-np.inf, np.inf)))
    if pin and "nsor" in pin:
        lo = v("nsor_lo", (B, T), pin["nsor"][:, :, 0], pin["nsor"][:, :, 0])
        hi = v("nsor_hi", (B, T), pin["nsor"][:, :, 1], pin["nsor"][:, :, 1])
    else:
        lo = v("nsor_lo", (B, T), lb=req[:, :, 0], ub=req[:, :, 1])
        hi = v("nsor_hi", (B, T), lb=req[:, :, 0], ub=req[:, :, 1])
    lease = v("lease", (B, T), *fix("lease", (-asset.p_max, asset.p_max)))
    pc = v("pc", T, lb=0.0, ub=asset.p_max, cost=asset.c_om)
    pd = v("pd", T, lb=0.0, ub=asset.p_max, cost=asset.c_om)
    p_es = v("p_es", T, cost=-prices.lambda_ex)
    e_lo = asset.soc_min * asset.e_max
    e = v("e", T, lb=e_lo, ub=asset.e_max)
    e0 = v("e0", lb=e_lo, ub=asset.e_max)
    loss = v("loss", T, lb=0.0)
    for t in range(T):
        for i in range(B):
            b.le({lo[i, t]: 1.0, pg[i, t]: -1.0}, 0.0, tag=prefix + "nsor")
            b.le({pg[i, t]: 1.0, hi[i, t]: -1.0}, 0.0, tag=prefix + "nsor")
        row = {pd[t]: 1.0, pc[t]: -1.0, p_es[t]: -1.0}
        row.update({lease[i, t]: -1.0 for i in range(B)})
        b.eq(row, 0.0, tag=prefix + "balance")
        b.eq({e[t]: 1.0, e[t - 1] if t else e0: -1.0, pc[t]: -1.0, pd[t]: 1.0, loss[t]: 1.0}, 0.0,
             tag=prefix + "dyn")
        b.ge({loss[t]: 1.0, pd[t]: -(1.0 / asset.eta_d - 1.0)}, 0.0, tag=prefix + "loss")
        b.ge({loss[t]: 1.0, pc[t]: -(1.0 - asset.eta_c)}, 0.0, tag=prefix + "loss")
    b.eq({e[T - 1]: 1.0, e0: -1.0}, 0.0, tag=prefix + "cyclic")
    n_sec = add_security_rows(b, grid, lo, hi, lease, tag=prefix + "security")
    handles = {"pg": pg, "nsor_lo": lo, "nsor_hi": hi, "lease": lease, "pc": pc, "pd": pd,
               "p_es": p_es, "e": e, "e0": e0, "loss": loss}
    b.meta["utility"] = {"prefix": prefix, "cols": (start, b.n), "handles": handles, "asset": asset,
                         "requested": req, "security_rows": n_sec}
    return handles


def build_utility_program(asset: SesAsset, grid, prices: PriceBox, requested, pin: dict | None = None,
                          prefix: str = "u.") -> ConvexProgram:
    b = ProgramBuilder()
    add_utility(b, asset, grid, prices, requested, prefix, pin)
    return b.build()


def build_combined_program(aggregators, asset: SesAsset, grid, prices: PriceBox, revenue: str = "robust",
                           quad_price=None) -> ConvexProgram:
    """Single program summing every aggregator term and the utility term.

    ``aggregators`` is a list of (DerPortfolio, LeaseTerms | None).  The coupling
    rows ``pg - p_award = 0`` (tag ``phi``) and ``lease - pes_b = 0`` (tag ``pi``)
    carry the multipliers of the distributed scheme.
    """
    b = ProgramBuilder()
    hs = []
    for i, (port, lease) in enumerate(aggregators):
        hs.append(add_aggregator(b, port, lease, prices, f"a{i}.", revenue, quad_price))
    requested = np.stack([m["offer_range"] for m in b.meta["aggregators"]])
    uh = add_utility(b, asset, grid, prices, requested)
    T = grid.T
    for i, h in enumerate(hs):
        for t in range(T):
            b.eq({uh["pg"][i, t]: 1.0, h["p_award"][t]: -1.0}, 0.0, tag="phi")
        for t in range(T):
            b.eq({uh["lease"][i, t]: 1.0, h["pes_b"][t]: -1.0}, 0.0, tag="pi")
    return b.build()
