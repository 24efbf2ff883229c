"""Box uncertainty sets, corner enumeration and the robust price epigraph."""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np


class VertexCapExceeded(RuntimeError):
    pass


@dataclass(frozen=True)
class PriceBox:
    """Per-interval clearing price interval ``lambda_ex +/- delta_mp`` ($/MWh)."""

    lambda_ex: np.ndarray
    delta_mp: np.ndarray

    def __post_init__(self):
        lam = np.atleast_1d(np.asarray(self.lambda_ex, dtype=float))
        d = np.broadcast_to(np.asarray(self.delta_mp, dtype=float), lam.shape).copy()
        if np.any(d < 0):
            raise ValueError("price half-widths must be nonnegative")
        object.__setattr__(self, "lambda_ex", lam)
        object.__setattr__(self, "delta_mp", d)

    @property
    def T(self) -> int:
        return self.lambda_ex.size

    @property
    def lower(self) -> np.ndarray:
        return self.lambda_ex - self.delta_mp

    @property
    def upper(self) -> np.ndarray:
        return self.lambda_ex + self.delta_mp


@dataclass(frozen=True)
class DnBox:
    """Network uncertainty: uncontrolled injections at the listed buses, root voltage
    and one award fraction per aggregator.

    ``p_inj_ex`` and ``delta_g`` have shape (n_uncertain, T) in per-unit; the
    award fractions always range over [0, 1].
    """

    buses: tuple[int, ...]
    p_inj_ex: np.ndarray
    delta_g: np.ndarray
    v_set_min: float
    v_set_max: float
    n_aggregators: int = 1

    def __post_init__(self):
        p = np.asarray(self.p_inj_ex, dtype=float)
        if p.ndim != 2:
            p = p.reshape(len(self.buses), -1)
        if p.shape[0] != len(self.buses):
            raise ValueError("p_inj_ex needs one row per uncertain bus")
        d = np.broadcast_to(np.asarray(self.delta_g, dtype=float), p.shape).copy()
        if np.any(d < 0):
            raise ValueError("injection half-widths must be nonnegative")
        if self.v_set_min > self.v_set_max:
            raise ValueError("v_set_min must not exceed v_set_max")
        object.__setattr__(self, "buses", tuple(int(b) for b in self.buses))
        object.__setattr__(self, "p_inj_ex", p)
        object.__setattr__(self, "delta_g", d)

    @property
    def T(self) -> int:
        return self.p_inj_ex.shape[1]

    def interval_bounds(self, t: int) -> tuple[np.ndarray, np.ndarray]:
        """Lower/upper corners of the interval-t box, ordered as
        (injections..., v_set, u_1..u_B)."""
        lo = np.concatenate([self.p_inj_ex[:, t] - self.delta_g[:, t], [self.v_set_min],
                             np.zeros(self.n_aggregators)])
        hi = np.concatenate([self.p_inj_ex[:, t] + self.delta_g[:, t], [self.v_set_max],
                             np.ones(self.n_aggregators)])
        return lo, hi

    def split(self, point: np.ndarray) -> tuple[np.ndarray, float, np.ndarray]:
        """Split an interval point into (injections, v_set, award fractions)."""
        k = len(self.buses)
        return point[:k], float(point[k]), point[k + 1:]


def _corners(lo: np.ndarray, hi: np.ndarray, cap: int) -> np.ndarray:
    free = np.flatnonzero(hi > lo)
    count = 2 ** free.size
    if count > cap:
        raise VertexCapExceeded(f"{count} vertices exceed cap {cap}")
    out = np.repeat(lo[None, :], count, axis=0)
    for row, bits in enumerate(itertools.product((0, 1), repeat=free.size)):
        out[row, free] = np.where(bits, hi[free], lo[free])
    return out


def enumerate_vertices(box: PriceBox | DnBox, per_interval: bool = True, cap: int = 4096):
    """Extreme scenarios of a box.

    Zero-width coordinates collapse, so a degenerate box yields one vertex.

    PriceBox, ``per_interval=False``: array (n_vertices, T) over all intervals.
    PriceBox, ``per_interval=True``: list over t of arrays (n_t, 1).
    DnBox: always per interval (the DistFlow constraints are static in t); a list
    over t of arrays (n_t, n_uncertain + 1 + B), columns as in
    :meth:`DnBox.interval_bounds`.  ``per_interval=False`` builds the joint
    cross-interval product instead, which grows as the power of T.
    """
    if cap < 1:
        raise ValueError("cap must be at least 1")
    if isinstance(box, PriceBox):
        if per_interval:
            return [_corners(box.lower[t:t + 1], box.upper[t:t + 1], cap) for t in range(box.T)]
        return _corners(box.lower, box.upper, cap)
    per_t = [_corners(*box.interval_bounds(t), cap) for t in range(box.T)]
    if per_interval:
        return per_t
    total = int(np.prod([len(v) for v in per_t], dtype=float))
    if total > cap:
        raise VertexCapExceeded(f"{total} joint vertices exceed cap {cap}")
    return [np.stack(combo) for combo in itertools.product(*per_t)]


def worst_case_revenue(prices: PriceBox, quantity: np.ndarray) -> float:
    """Closed form of ``min over the box of lambda . P``."""
    q = np.asarray(quantity, dtype=float)
    return float(prices.lambda_ex @ q - prices.delta_mp @ np.abs(q))


def robust_price_epigraph(prices: PriceBox, quantity_index, z_index: int, abs_index) -> list:
    """Linear rows encoding ``z <= sum_t lambda_ex,t P_t - delta_t |P_t|``.

    ``quantity_index`` and ``abs_index`` are the variable columns of P_t and of
    the epigraph variables a_t >= |P_t|.  Returns ``(coeffs, rhs)`` pairs for rows
    of the form ``coeffs . x <= rhs`` where ``coeffs`` is a {col: value} dict.
    Maximizing z drives each a_t onto |P_t|, so the bound is exact.
    """
    rows = []
    for p_col, a_col in zip(quantity_index, abs_index):
        rows.append(({p_col: 1.0, a_col: -1.0}, 0.0))
        rows.append(({p_col: -1.0, a_col: -1.0}, 0.0))
    z_row = {z_index: 1.0}
    for t, (p_col, a_col) in enumerate(zip(quantity_index, abs_index)):
        z_row[p_col] = z_row.get(p_col, 0.0) - prices.lambda_ex[t]
        z_row[a_col] = z_row.get(a_col, 0.0) + prices.delta_mp[t]
    rows.append((z_row, 0.0))
    return rows


def sample_interior(lower, upper, n: int, seed: int) -> np.ndarray:
    """``n`` uniform samples in the box [lower, upper], shape (n, dim).

    Draws are taken from the open interval so samples sit strictly inside any
    non-degenerate coordinate; zero-width coordinates return their center.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    lo = np.asarray(lower, dtype=float)
    hi = np.asarray(upper, dtype=float)
    rng = np.random.default_rng(seed)
    u = rng.random((n,) + lo.shape)
    u = np.where(u == 0.0, 0.5, u)
    return lo + u * (hi - lo)
