"""Distributed mode 1: Gauss-Seidel ADMM over the combined model.

The aggregator owns its award ``q = sum_s P_s`` and leased profile ``pes_b``; the
utility keeps copies ``pg`` and ``lease`` and enforces security and the device
balance locally.  The two consensus rows are::

    pg - q = 0        (multiplier phi)
    lease - pes_b = 0 (multiplier pi)

For one aggregator the second row is exactly the device balance gap
``P^d - P^c - P_ES,b - P_ES`` because the utility's balance row is internal.
Multipliers are kept in scaled money units (objective times ``scale``).
"""
from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .lp import ConvexProgram, SolveError, solve
from .models import DerPortfolio, LeaseTerms, SesAsset, build_aggregator_program, build_utility_program, part_value
from .outcome import Outcome, outcome_from_parts
from .uncertainty import PriceBox


class NonConvergence(RuntimeError):
    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result


@dataclass
class AdmmSettings:
    rho: float = 0.01
    eps_pri: float = 1e-4
    eps_dual: float = 1e-4
    k_max: int = 500
    scale: float = 1e-3
    tol: float = 1e-8

    def __post_init__(self):
        if self.rho <= 0 or self.eps_pri <= 0 or self.eps_dual <= 0 or self.scale <= 0:
            raise ValueError("rho, tolerances and scale must be positive")
        if self.k_max < 1:
            raise ValueError("k_max must be at least 1")


@dataclass
class Augmentation:
    """Objective terms ``lin . x + 1/2 sum quad x^2 + const`` on a set of columns."""

    cols: np.ndarray
    lin: np.ndarray
    quad: np.ndarray
    const: float

    def value(self, x_cols) -> float:
        x = np.asarray(x_cols, dtype=float)
        return float(self.lin @ x + 0.5 * self.quad @ (x * x) + self.const)


def augmented_lagrangian_terms(cols, own_sign: float, frozen, dual, rho: float) -> Augmentation:
    """``-dual . gap + rho/2 |gap|^2`` with ``gap = own_sign * x - own_sign * frozen``.

    The aggregator side uses ``own_sign = -1`` (gap = copy - own), the utility side
    ``+1`` (gap = own - counterpart), matching ``pg - q`` and ``lease - pes_b``.
    """
    cols = np.asarray(cols).ravel()
    f = np.asarray(frozen, dtype=float).ravel()
    y = np.asarray(dual, dtype=float).ravel()
    a = own_sign
    b0 = -own_sign * f
    lin = -y * a + rho * a * b0
    quad = np.full(cols.size, rho)
    const = float(-y @ b0 + 0.5 * rho * b0 @ b0)
    return Augmentation(cols, lin, quad, const)


def augment(prog: ConvexProgram, terms: list[Augmentation], scale: float) -> ConvexProgram:
    c = scale * prog.c
    n = prog.n
    P = scale * prog.P if prog.P is not None else sp.csc_matrix((n, n))
    diag = np.zeros(n)
    const = scale * prog.const
    for t in terms:
        np.add.at(c, t.cols, t.lin)
        np.add.at(diag, t.cols, t.quad)
        const += t.const
    return prog.replace(c=c, P=sp.csc_matrix(P + sp.diags(diag)), const=const)


class AggregatorAgent:
    """Aggregator side: private DER/offer data, its own duals and the update of Step 5."""

    def __init__(self, portfolio: DerPortfolio, lease: LeaseTerms | None, prices: PriceBox | None,
                 settings: AdmmSettings, revenue: str = "robust", quad_price=None, index: int = 0):
        self.settings = settings
        self.index = index
        self.prog = build_aggregator_program(portfolio, lease, prices, revenue, quad_price, prefix=f"a{index}.")
        self.meta = self.prog.meta["aggregators"][0]
        self.h = self.meta["handles"]
        self.T = portfolio.T
        self.phi = np.zeros(self.T)
        self.pi = np.zeros(self.T)
        self.x = None

    @property
    def requested_nsor(self) -> np.ndarray:
        return self.meta["offer_range"]

    def terms(self, pg, lease, rho):
        return [augmented_lagrangian_terms(self.h["p_award"], -1.0, pg, self.phi, rho),
                augmented_lagrangian_terms(self.h["pes_b"], -1.0, lease, self.pi, rho)]

    def step(self, pg, lease) -> np.ndarray:
        s = self.settings
        sol = solve(augment(self.prog, self.terms(pg, lease, s.rho), s.scale), s.tol)
        if not sol.ok:
            raise SolveError(f"aggregator {self.index} subproblem: {sol.status}", sol)
        self.x = sol.x
        return sol.x

    def coupling(self, x=None) -> dict:
        x = self.x if x is None else x
        h = self.h
        return {"p_award": x[h["p_award"]], "pes_b": x[h["pes_b"]], "pc_b": x[h["pc_b"]],
                "pd_b": x[h["pd_b"]], "cap_e": float(x[h["cap_e"]]), "cap_p": float(x[h["cap_p"]])}

    def update_duals(self, pg, lease):
        c = self.coupling()
        rho = self.settings.rho
        old = (self.phi.copy(), self.pi.copy())
        self.phi = self.phi - rho * (np.asarray(pg) - c["p_award"])
        self.pi = self.pi - rho * (np.asarray(lease) - c["pes_b"])
        return old

    def objective(self, x=None) -> float:
        x = self.x if x is None else x
        return part_value(self.prog, x, self.meta["cols"])


class UtilityAgent:
    """Utility side: network, device and the security check; sees only coupling values."""

    def __init__(self, asset: SesAsset, grid, prices: PriceBox, requested, settings: AdmmSettings):
        self.settings = settings
        self.prog = build_utility_program(asset, grid, prices, requested)
        self.meta = self.prog.meta["utility"]
        self.h = self.meta["handles"]
        self.grid = grid
        self.requested = np.asarray(requested, dtype=float)
        self.y = None

    def terms(self, q, pes, phi, pi, rho):
        return [augmented_lagrangian_terms(self.h["pg"], 1.0, q, phi, rho),
                augmented_lagrangian_terms(self.h["lease"], 1.0, pes, pi, rho)]

    def step(self, q, pes, phi, pi) -> np.ndarray:
        s = self.settings
        sol = solve(augment(self.prog, self.terms(q, pes, phi, pi, s.rho), s.scale), s.tol)
        if not sol.ok:
            raise SolveError(f"utility subproblem: {sol.status}", sol)
        self.y = sol.x
        return sol.x

    def coupling(self, y=None) -> dict:
        y = self.y if y is None else y
        h = self.h
        return {"pg": y[h["pg"]], "lease": y[h["lease"]], "net_device": y[h["pd"]] - y[h["pc"]],
                "p_es": y[h["p_es"]]}

    def residual_vector(self, y=None) -> np.ndarray:
        c = self.coupling(y)
        return np.concatenate([c["pg"].ravel(), c["net_device"], c["p_es"]])

    def objective(self, y=None) -> float:
        y = self.y if y is None else y
        return part_value(self.prog, y, self.meta["cols"])


@dataclass
class AdmmState:
    k: int
    x: list
    y: np.ndarray | None
    phi: np.ndarray
    pi: np.ndarray
    rho: float
    eps_pri: float
    eps_dual: float
    k_max: int
    history: list = field(default_factory=list)


def dual_update(phi, pi, rho, pg, q, net_device, pes_sum, p_es):
    """Multiplier steps as printed: phi - rho (P_g - sum_s P_s), pi - rho (P^d - P^c - sum_b P_ES,b - P_ES)."""
    phi_new = np.asarray(phi) - rho * (np.asarray(pg) - np.asarray(q))
    pi_new = np.asarray(pi) - rho * (np.asarray(net_device) - np.asarray(pes_sum) - np.asarray(p_es))
    return phi_new, pi_new


def residuals_and_converged(phi_old, phi_new, pi_old, pi_new, y_old, y_new, eps_pri, eps_dual):
    r = float(np.sqrt(np.sum((np.asarray(phi_new) - phi_old) ** 2) + np.sum((np.asarray(pi_new) - pi_old) ** 2)))
    s = float(np.linalg.norm(np.asarray(y_new, dtype=float) - np.asarray(y_old, dtype=float)))
    return r, s, (r <= eps_pri and s <= eps_dual)


@dataclass
class EquilibriumResult:
    mode: str
    converged: bool
    iterations: int
    x: list
    y: np.ndarray | None
    phi: np.ndarray
    pi: np.ndarray
    objective: float
    aggregator_objective: list
    utility_objective: float
    history: list
    coupling: dict
    runtime: float = 0.0
    outcome: Outcome | None = None
    extra: dict = field(default_factory=dict)

    @property
    def residual_trace(self) -> list[tuple[float, float]]:
        return [(h["r_norm"], h["s_norm"]) for h in self.history]


LOG_FIELDS = ["k", "r_norm", "s_norm", "aggregator_obj", "utility_obj", "total_obj", "gap_phi", "gap_pi"]


def write_log(history: list, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        w.writeheader()
        for row in history:
            w.writerow({k: repr(float(row[k])) if k != "k" else row[k] for k in LOG_FIELDS})


def run_loop(aggs: list[AggregatorAgent], util: UtilityAgent, settings: AdmmSettings, mode: str = "mode1",
             exchange=None) -> EquilibriumResult:
    """Gauss-Seidel ADMM between aggregators and utility.  ``exchange`` lets a
    transport intercept each half-iteration (used by the two-process harness); by
    default the agents talk directly."""
    B = len(aggs)
    T = aggs[0].T
    pg = np.zeros((B, T))
    lease = np.zeros((B, T))
    y_prev_vec = np.zeros(B * T + 2 * T)
    history = []
    converged = False
    t0 = time.perf_counter()
    k = 0
    for k in range(1, settings.k_max + 1):
        for i, a in enumerate(aggs):
            a.step(pg[i], lease[i])
        q = np.stack([a.coupling()["p_award"] for a in aggs])
        pes = np.stack([a.coupling()["pes_b"] for a in aggs])
        phi = np.stack([a.phi for a in aggs])
        pi = np.stack([a.pi for a in aggs])
        util.step(q, pes, phi, pi)
        uc = util.coupling()
        pg, lease = uc["pg"], uc["lease"]
        old = [a.update_duals(pg[i], lease[i]) for i, a in enumerate(aggs)]
        phi_old = np.stack([o[0] for o in old]); pi_old = np.stack([o[1] for o in old])
        phi_new = np.stack([a.phi for a in aggs]); pi_new = np.stack([a.pi for a in aggs])
        y_vec = util.residual_vector()
        r, s, done = residuals_and_converged(phi_old, phi_new, pi_old, pi_new, y_prev_vec, y_vec,
                                             settings.eps_pri, settings.eps_dual)
        y_prev_vec = y_vec
        fa = [a.objective() for a in aggs]
        fu = util.objective()
        history.append({"k": k, "r_norm": r, "s_norm": s, "aggregator_obj": sum(fa), "utility_obj": fu,
                        "total_obj": sum(fa) + fu, "gap_phi": float(np.linalg.norm(pg - q)),
                        "gap_pi": float(np.linalg.norm(lease - pes))})
        if exchange is not None:
            exchange(k, aggs, util, history[-1])
        if done:
            converged = True
            break
    return collect_result(aggs, util, settings, mode, converged, k, history, time.perf_counter() - t0)


def collect_result(aggs, util, settings: AdmmSettings, mode: str, converged: bool, k: int, history: list,
                   runtime: float) -> EquilibriumResult:
    fa = [a.objective() for a in aggs]
    fu = util.objective()
    uc = util.coupling()
    scale = settings.scale
    q = np.stack([a.coupling()["p_award"] for a in aggs])
    pes = np.stack([a.coupling()["pes_b"] for a in aggs])
    coupling = {"p_award": q, "pes_b": pes, "pg": uc["pg"], "lease": uc["lease"],
                "p_es": uc["p_es"], "net_device": uc["net_device"]}
    phi = np.stack([a.phi for a in aggs]) / scale
    pi = np.stack([a.pi for a in aggs]) / scale
    res = EquilibriumResult(mode, converged, k, [a.x for a in aggs], util.y, phi, pi,
                            sum(fa) + fu, fa, fu, history, coupling, runtime)
    if len(aggs) == 1:
        res.outcome = outcome_from_parts(mode, aggs[0].prog, aggs[0].x, util.prog, util.y, phi[0], pi[0])
    return res


def make_agents(scenario, enabled=None, settings: AdmmSettings | None = None, revenue: str = "robust",
                quad_price=None):
    settings = settings or scenario.admm
    port, lease = scenario.aggregators(enabled)[0]
    agg = AggregatorAgent(port, lease, scenario.prices, settings, revenue, quad_price)
    util = UtilityAgent(scenario.asset, scenario.grid, scenario.prices, agg.requested_nsor[None], settings)
    return agg, util


def run_mode1(scenario, enabled: bool | None = None, settings: AdmmSettings | None = None,
              revenue: str = "robust", quad_price=None, exchange=None, raise_on_fail: bool = True,
              finalize: bool = True, mc_samples: int = 0, mode: str = "mode1") -> EquilibriumResult:
    """Mode-1 ADMM on a scenario.  Non-convergence raises :class:`NonConvergence`
    carrying the result (with its residual trace) unless ``raise_on_fail`` is off."""
    settings = settings or scenario.admm
    agg, util = make_agents(scenario, enabled, settings, revenue, quad_price)
    res = run_loop([agg], util, settings, mode, exchange)
    if finalize:
        res.outcome.finalize(scenario.grid, mc_samples, scenario.seed, scenario.mc_tol)
    if not res.converged and raise_on_fail:
        tail = ", ".join(f"({r:.2e}, {s:.2e})" for r, s in res.residual_trace[-3:])
        raise NonConvergence(f"ADMM did not converge in {res.iterations} iterations; last (r, s): {tail}", res)
    return res


def best_response_gaps(scenario, outcome: Outcome, enabled: bool | None = None, revenue: str = "robust",
                       quad_price=None, tol: float = 1e-8) -> dict:
    """Relative improvement each side can get by re-optimizing against frozen prices.

    With ``phi``, ``pi`` frozen the aggregator minimizes ``F_Ag + phi.q + pi.pes_b``
    over its own region and the utility ``F_U - phi.pg - pi.lease`` over its own;
    a point is an equilibrium when neither can improve.  The improvement is
    normalized by the magnitude of the current priced objective (floored at $1).
    """
    port, lease = scenario.aggregators(enabled)[0]
    o = outcome
    ap = build_aggregator_program(port, lease, scenario.prices, revenue, quad_price)
    h = ap.meta["aggregators"][0]["handles"]
    c = ap.c.copy()
    c[h["p_award"]] += o.phi
    c[h["pes_b"]] += o.pi
    br = solve(ap.replace(c=c), tol)
    if not br.ok:
        raise SolveError(f"aggregator best response: {br.status}", br)
    va = o.aggregator_objective + o.phi @ o.award + o.pi @ o.pes_b

    up = build_utility_program(scenario.asset, scenario.grid, scenario.prices, o.agg_meta["offer_range"][None])
    uh = up.meta["utility"]["handles"]
    c = up.c.copy()
    c[uh["pg"][0]] -= o.phi
    c[uh["lease"][0]] -= o.pi
    bu = solve(up.replace(c=c), tol)
    if not bu.ok:
        raise SolveError(f"utility best response: {bu.status}", bu)
    vu = o.utility_objective - o.phi @ o.award - o.pi @ o.pes_b
    return {"aggregator": (va - br.objective) / max(abs(va), 1.0),
            "utility": (vu - bu.objective) / max(abs(vu), 1.0),
            "aggregator_value": va, "aggregator_best": br.objective,
            "utility_value": vu, "utility_best": bu.objective}
