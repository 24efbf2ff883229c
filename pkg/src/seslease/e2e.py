"""Mode 2: decision-focused price surrogate inside the ADMM loop.

The surrogate is affine per interval,

    lam_hat_t = th0_t + thq_t * q_t + thp_t * prev_t,

with ``q_t`` the aggregator's offered quantity and ``prev_t`` the previous-day
price (the per-interval intercept plays the role of an hour-of-day one-hot).
Training minimizes the regret of decisions taken under lam_hat; at decision
time the aggregator plugs its own award into the ``q`` feature, which turns its
revenue into the concave quadratic ``(a + b q) q``.
"""
from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field

import numpy as np

from .lp import ConvexProgram, priced_program, solve, solve_differentiable, SolveError
from .market import HistoryDataset, MarketConfig, generate_history, sample_day
from .models import build_aggregator_program

FEATURES = ("const", "offered_mw", "prev_price")


class TrainingDiverged(RuntimeError):
    def __init__(self, message, trace):
        super().__init__(message)
        self.trace = trace


def schema_hash(T: int) -> str:
    return hashlib.sha256(f"{','.join(FEATURES)}|T={T}".encode()).hexdigest()[:16]


@dataclass
class Surrogate:
    theta: np.ndarray            # (3, T): intercept, own-quantity slope, previous-price weight

    def __post_init__(self):
        th = np.asarray(self.theta, dtype=float)
        if th.ndim != 2 or th.shape[0] != len(FEATURES):
            raise ValueError(f"theta must have shape ({len(FEATURES)}, T)")
        if not np.all(np.isfinite(th)):
            raise ValueError("theta must be finite")
        self.theta = th

    @property
    def T(self) -> int:
        return self.theta.shape[1]

    @classmethod
    def constant(cls, lam) -> "Surrogate":
        lam = np.asarray(lam, dtype=float)
        return cls(np.stack([lam, np.zeros_like(lam), np.zeros_like(lam)]))

    def quad_price(self, prev) -> tuple[np.ndarray, np.ndarray]:
        """``(a, b)`` of the revenue ``sum_t (a_t + b_t q_t) q_t``; b is clipped to <= 0."""
        th = self.theta
        return th[0] + th[2] * np.asarray(prev, dtype=float), np.minimum(th[1], 0.0)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(f"schema {schema_hash(self.T)}\nT {self.T}\nfeatures {' '.join(FEATURES)}\n")
            for name, row in zip(FEATURES, self.theta):
                fh.write(name + " " + " ".join(repr(float(v)) for v in row) + "\n")

    @classmethod
    def load(cls, path) -> "Surrogate":
        lines = [ln.split() for ln in open(path).read().splitlines() if ln.strip()]
        head = {ln[0]: ln[1:] for ln in lines[:3]}
        T = int(head["T"][0])
        if head["schema"][0] != schema_hash(T) or tuple(head["features"]) != FEATURES:
            raise ValueError("checkpoint feature schema does not match this build")
        rows = {ln[0]: [float(v) for v in ln[1:]] for ln in lines[3:]}
        return cls(np.array([rows[f] for f in FEATURES]))


def predict(s: Surrogate, offers, prev) -> np.ndarray:
    """Price forecast for one day (T,) or a batch (n, T)."""
    q = np.asarray(offers, dtype=float)
    p = np.asarray(prev, dtype=float)
    if q.shape[-1] != s.T or p.shape[-1] != s.T:
        raise ValueError(f"features must have {s.T} intervals")
    th = s.theta
    return th[0] + th[1] * q + th[2] * p


def _design(data: HistoryDataset, t: int) -> np.ndarray:
    return np.stack([np.ones(data.n), data.offers[:, t], data.prev[:, t]], axis=1)


def fit_least_squares(data: HistoryDataset, ridge: float = 1e-6) -> Surrogate:
    """Predict-then-optimize baseline: per-interval least squares on the prices."""
    th = np.empty((3, data.T))
    for t in range(data.T):
        X = _design(data, t)
        A = X.T @ X + ridge * np.eye(3)
        th[:, t] = np.linalg.solve(A, X.T @ data.prices[:, t])
    return Surrogate(th)


# -- decision loss ---------------------------------------------------------

@dataclass
class DecisionProblem:
    """Aggregator region with cost vector ``c`` and priced columns ``q``.

    ``scale`` divides the objective so that ``eps`` acts relative to the price level.
    """

    prog: ConvexProgram
    price_cols: np.ndarray
    scale: float = 1.0

    @classmethod
    def from_scenario(cls, scenario, enabled=None, scale: float | None = None) -> "DecisionProblem":
        port, lease = scenario.aggregators(enabled)[0]
        prog = build_aggregator_program(port, lease, None, revenue="none")
        q = prog.meta["aggregators"][0]["handles"]["p_award"]
        s = float(np.mean(np.abs(scenario.prices.lambda_ex))) if scale is None else scale
        return cls(prog, q, max(s, 1e-9))

    def _scaled(self) -> ConvexProgram:
        P = None if self.prog.P is None else self.prog.P / self.scale
        return self.prog.replace(c=self.prog.c / self.scale, P=P)

    def value(self, x, lam) -> float:
        """Objective ``c.x + x'Px/2 - lam.q`` in money units."""
        v = float(self.prog.c @ x - np.asarray(lam) @ x[self.price_cols])
        if self.prog.P is not None:
            v += 0.5 * float(x @ (self.prog.P @ x))
        return v

    def value_grad(self, x, lam) -> np.ndarray:
        g = self.prog.c.copy()
        if self.prog.P is not None:
            g += self.prog.P @ x
        np.subtract.at(g, self.price_cols, lam)
        return g

    def optimum(self, lam, tol: float = 1e-8):
        sol = solve(priced_program(self.prog, self.price_cols, lam), tol, polish=True)
        if not sol.ok:
            raise SolveError(f"decision problem: {sol.status}", sol)
        return sol.x, sol.objective

    def decide(self, lam_hat, eps: float = 0.0, tol: float = 1e-8):
        """x*(lam_hat); with eps > 0 also the Jacobian d x*/d lam_hat (money units)."""
        if eps <= 0:
            return self.optimum(lam_hat, tol)[0], None
        ds = solve_differentiable(self._scaled(), self.price_cols, np.asarray(lam_hat) / self.scale, eps, tol)
        return ds.solution.x, ds.jacobian / self.scale


def decision_loss(lam_hat, lam_true, problem: DecisionProblem, eps: float = 0.0, f_star: float | None = None,
                  tol: float = 1e-8):
    """Regret ``c.x*(lam_hat) - lam_true.q(x*) - f*(lam_true)`` and the decision.

    ``f*`` is the exact (eps = 0) optimum, so the loss is nonnegative for every
    eps and vanishes at ``lam_hat = lam_true`` when eps = 0.
    """
    x, _ = problem.decide(lam_hat, eps, tol)
    if f_star is None:
        f_star = problem.optimum(lam_true, tol)[1]
    return problem.value(x, lam_true) - f_star, x


def loss_and_grad(s: Surrogate, data: HistoryDataset, idx, problem: DecisionProblem, eps: float,
                  f_star: np.ndarray, tol: float = 1e-9):
    """Mean batch loss and its gradient with respect to theta (chain rule through the KKT system)."""
    grad = np.zeros_like(s.theta)
    total = 0.0
    for i in idx:                          # fixed order keeps the reduction deterministic
        lam_hat = predict(s, data.offers[i], data.prev[i])
        x, J = problem.decide(lam_hat, eps, tol)
        lam = data.prices[i]
        total += problem.value(x, lam) - f_star[i]
        g = J.T @ problem.value_grad(x, lam)      # d loss / d lam_hat, (T,)
        grad[0] += g
        grad[1] += g * data.offers[i]
        grad[2] += g * data.prev[i]
    k = max(len(idx), 1)
    return total / k, grad / k


@dataclass
class TrainResult:
    surrogate: Surrogate
    trace: list = field(default_factory=list)     # (epoch, mean loss, grad norm)

    def write_trace(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "mean_loss", "grad_norm"])
            for e, l, g in self.trace:
                w.writerow([e, repr(l), repr(g)])


class _Standardizer:
    """Affine map between theta and coordinates on standardized features.

    In these coordinates ``lam_hat = scale * (u0 + uq q' + up p')`` with
    ``q', p'`` the z-scored features, which keeps one learning rate reasonable
    for every parameter.  The map is exact, so the model class is unchanged.
    """

    def __init__(self, data: HistoryDataset, scale: float):
        self.mq, self.sq = data.offers.mean(axis=0), data.offers.std(axis=0) + 1e-9
        self.mp, self.sp = data.prev.mean(axis=0), data.prev.std(axis=0) + 1e-9
        self.scale = scale

    def to_u(self, th):
        uq, up = th[1] * self.sq, th[2] * self.sp
        return np.stack([th[0] + th[1] * self.mq + th[2] * self.mp, uq, up]) / self.scale

    def to_theta(self, u):
        u = u * self.scale
        tq, tp = u[1] / self.sq, u[2] / self.sp
        return np.stack([u[0] - tq * self.mq - tp * self.mp, tq, tp])

    def grad_u(self, g_theta):
        # theta is linear in u, so the gradient maps through the transpose
        g0, gq, gp = g_theta
        s = self.scale
        return np.stack([g0 * s, (gq - g0 * self.mq) * s / self.sq, (gp - g0 * self.mp) * s / self.sp])


def train(data: HistoryDataset, problem: DecisionProblem, epochs: int = 50, batch: int = 32,
          learning_rate: float = 0.01, eps: float = 1e-3, init: Surrogate | None = None, seed: int = 0,
          tol: float = 1e-9) -> TrainResult:
    """Mini-batch gradient descent on the decision loss.

    Starts from the least-squares fit unless ``init`` is given.  Steps are
    taken on standardized features with the loss measured in units of the
    price level, and the slope on the own-quantity feature is projected onto
    <= 0 so the decision-time revenue stays concave.  Aborts with
    :class:`TrainingDiverged` when the epoch loss exceeds ten times the
    initial loss for three epochs in a row.
    """
    if data.n < 1:
        raise ValueError("empty dataset")
    if eps <= 0:
        raise ValueError("training needs eps > 0")
    std = _Standardizer(data, problem.scale)
    th = (init or fit_least_squares(data)).theta.copy()
    th[1] = np.minimum(th[1], 0.0)
    u = std.to_u(th)
    f_star = np.array([problem.optimum(data.prices[i], tol)[1] for i in range(data.n)])
    rng = np.random.default_rng(seed)
    initial = None
    bad = 0
    out = TrainResult(Surrogate(th))
    for epoch in range(1, epochs + 1):
        order = rng.permutation(data.n)
        losses, norms = [], []
        for start in range(0, data.n, batch):
            idx = order[start:start + batch]
            loss, g = loss_and_grad(Surrogate(std.to_theta(u)), data, idx, problem, eps, f_star, tol)
            gu = std.grad_u(g) / problem.scale
            losses.append(loss * len(idx))
            norms.append(float(np.linalg.norm(gu)))
            u = u - learning_rate * gu
            u[1] = np.minimum(u[1], 0.0)
            if not np.all(np.isfinite(u)):
                break
        mean = float(np.sum(losses) / data.n)
        out.trace.append((epoch, mean, float(np.mean(norms))))
        if initial is None:
            initial = max(mean, 1e-12)
        bad = bad + 1 if mean > 10.0 * initial else 0
        if bad >= 3 or not np.all(np.isfinite(u)):
            raise TrainingDiverged(f"training diverged at epoch {epoch}", out.trace)
        out.surrogate = Surrogate(std.to_theta(u))
    return out


def mean_decision_loss(s: Surrogate, data: HistoryDataset, problem: DecisionProblem, tol: float = 1e-9) -> float:
    vals = []
    for i in range(data.n):
        lam_hat = predict(s, data.offers[i], data.prev[i])
        vals.append(decision_loss(lam_hat, data.prices[i], problem, 0.0, tol=tol)[0])
    return float(np.mean(vals))


# -- mode 2 orchestration --------------------------------------------------

def run_mode2(scenario, surrogate: Surrogate, prev, enabled: bool | None = None, settings=None,
              exchange=None, raise_on_fail: bool = True, mc_samples: int = 0):
    """ADMM with the aggregator pricing its award through the surrogate.

    The utility still works with the scenario's point forecast.  No ADMM
    convergence guarantee is claimed for this mode; non-convergence is reported.
    """
    from .admm import run_mode1

    return run_mode1(scenario, enabled, settings, revenue="quadratic", quad_price=surrogate.quad_price(prev),
                     exchange=exchange, raise_on_fail=raise_on_fail, mc_samples=mc_samples, mode="mode2")


def centralized_mode2(scenario, surrogate: Surrogate, prev, enabled: bool | None = None):
    from .outcome import solve_centralized

    return solve_centralized(scenario, enabled, revenue="quadratic", quad_price=surrogate.quad_price(prev))


def realized_profit(outcome, market: MarketConfig, demand=None, shift: float = 0.0,
                    spikes=None) -> tuple[float, np.ndarray]:
    """Aggregator profit when its award clears against the market.

    Realized revenue replaces the planned one; DER costs, lease charges and
    the ``pi`` settlement of the leased profile are kept from the plan.
    """
    award = np.asarray(outcome.award, dtype=float)
    lam = market.clear_day(award, demand, shift)
    if spikes is not None:
        lam = np.minimum(lam + spikes, market.cap)
    settlement = float(np.dot(outcome.pi, outcome.pes_b))
    return float(lam @ award) - outcome.aggregator_cost - settlement, lam


def affine_law_dataset(theta, n: int, offer_scale: float = 3.0, prev_mean=None, prev_sd: float = 5.0,
                       spike_prob: float = 0.0, spike_size: float = 0.0, seed: int = 0,
                       offer_center=None, noise: float = 0.0) -> HistoryDataset:
    """Records whose prices follow a known affine law plus optional Gaussian noise
    (standard deviation ``noise``) and one-sided spikes."""
    th = np.asarray(theta, dtype=float)
    T = th.shape[1]
    rng = np.random.default_rng(seed)
    center = np.zeros(T) if offer_center is None else np.broadcast_to(offer_center, (T,))
    offers = center + offer_scale * (2.0 * rng.random((n, T)) - 1.0)
    mean = th[0] if prev_mean is None else np.broadcast_to(prev_mean, (T,))
    prev = mean + prev_sd * rng.standard_normal((n, T))
    lam = th[0] + th[1] * offers + th[2] * prev
    lam = lam + np.where(rng.random((n, T)) < spike_prob, spike_size, 0.0)
    if noise:
        lam = lam + noise * rng.standard_normal((n, T))
    return HistoryDataset(offers, prev, lam)


@dataclass(frozen=True)
class StudyRow:
    seed: int
    mode1_profit: float
    mode2_profit: float
    mode2_gap: float              # relative objective gap of mode 2 against the same-surrogate centralized solve
    mode1_iterations: int
    mode2_iterations: int


@dataclass
class Mode2Setup:
    scenario: object          # scenario with the least-squares point forecast as lambda_ex
    surrogate: Surrogate
    least_squares: Surrogate
    prev: np.ndarray
    market: MarketConfig
    history: HistoryDataset
    training: TrainResult


def prepare_mode2(scenario, market: MarketConfig, seed: int, n_days: int = 64, offer_scale: float = 3.0,
                  epochs: int = 5, learning_rate: float = 0.01, eps: float = 1e-2, batch: int = 32,
                  enabled: bool | None = None) -> Mode2Setup:
    """History, least-squares baseline, point forecast and trained surrogate for one seed.

    The point forecast (used by the utility, and by mode 1 inside its price
    box) is the least-squares prediction at the average historical offer, so
    it carries no own-impact term.
    """
    from dataclasses import replace as dc_replace

    from .uncertainty import PriceBox

    mk = dc_replace(market, seed=int(seed))
    hist = generate_history(mk, n_days, offer_scale, seed=int(seed))
    ls = fit_least_squares(hist)
    prev = hist.prices[-1]
    forecast = np.maximum(ls.theta[0] + ls.theta[1] * hist.offers.mean(axis=0) + ls.theta[2] * prev, 0.0)
    sc = scenario.with_prices(PriceBox(forecast, scenario.prices.delta_mp))
    problem = DecisionProblem.from_scenario(sc, enabled)
    tr = train(hist, problem, epochs, batch=batch, learning_rate=learning_rate, eps=eps, init=ls, seed=int(seed))
    return Mode2Setup(sc, tr.surrogate, ls, prev, mk, hist, tr)


def market_study(scenario, market: MarketConfig, seeds, n_days: int = 64, offer_scale: float = 3.0,
                 epochs: int = 5, learning_rate: float = 0.01, eps: float = 1e-2, enabled: bool | None = None,
                 settings=None) -> list[StudyRow]:
    """Mode 1 against mode 2 on the synthetic market, one fresh history and test day per seed.

    Mode 1 plans against the least-squares forecast without its own-impact
    term, inside the scenario's price box.  Mode 2 plans with the
    decision-trained surrogate including the impact.  Both are scored by
    clearing their awards against the same realized day.
    """
    from .admm import run_mode1

    rows = []
    for seed in seeds:
        st = prepare_mode2(scenario, market, seed, n_days, offer_scale, epochs, learning_rate, eps,
                           enabled=enabled)
        sc, sur, prev, mk = st.scenario, st.surrogate, st.prev, st.market
        r1 = run_mode1(sc, enabled, settings, mode="mode1")
        r2 = run_mode2(sc, sur, prev, enabled, settings)
        central, _ = centralized_mode2(sc, sur, prev, enabled)
        gap = abs(r2.outcome.objective - central.objective) / max(abs(central.objective), 1e-9)
        dem, shift, spikes = sample_day(mk, np.random.default_rng(10_000 + int(seed)))
        p1, _ = realized_profit(r1.outcome, mk, dem, shift, spikes)
        p2, _ = realized_profit(r2.outcome, mk, dem, shift, spikes)
        rows.append(StudyRow(int(seed), p1, p2, gap, r1.iterations, r2.iterations))
    return rows
