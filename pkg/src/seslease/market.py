"""Synthetic wholesale market: merit-order clearing and a seeded history generator.

The background stack is a ladder of thin price blocks, so the clearing price is
close to affine in residual demand; aggregator quantity enters as a
price-taking injection, which gives offers a visible price impact.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import kernels, profiles


def clear(blocks, demand: float, cap: float | None = None):
    """Merit-order clearing of one interval.

    ``blocks``: (n, 2) array of (price, quantity).  Returns ``(price, awards)``
    with awards in input order.  Blocks priced at the marginal price share the
    remaining demand pro rata.  Demand beyond the stack clears at ``cap`` with
    every block fully awarded; zero demand clears at the lowest block price.
    """
    b = np.asarray(blocks, dtype=float).reshape(-1, 2)
    price, qty = b[:, 0], b[:, 1]
    if np.any(qty < 0):
        raise ValueError("block quantities must be nonnegative")
    awards = np.zeros(len(b))
    if len(b) == 0:
        return (float(cap) if cap is not None else np.nan), awards
    if demand <= 0:
        return float(price.min()), awards
    if demand > qty.sum() + 1e-12:
        awards[:] = qty
        return (float(cap) if cap is not None else float(price.max())), awards
    order = np.argsort(price, kind="stable")
    p, aw = kernels.merit_order_fill(price[order], qty[order], float(demand))
    awards[order] = aw
    return float(p), awards


@dataclass
class MarketConfig:
    """Background supply ladder plus an inelastic demand profile per interval.

    ``stack``: (n, 2) (price, MW) blocks sorted by price; ``demand``: (T,) MW.
    ``demand_noise`` is a relative standard deviation, ``price_noise`` a $/MWh
    standard deviation applied to every block on a day.
    """

    stack: np.ndarray
    demand: np.ndarray
    cap: float = 300.0
    demand_noise: float = 0.0
    price_noise: float = 0.0
    spike_prob: float = 0.0
    spike_size: float = 0.0
    seed: int = 0

    def __post_init__(self):
        s = np.asarray(self.stack, dtype=float).reshape(-1, 2)
        if np.any(np.diff(s[:, 0]) < 0):
            raise ValueError("stack blocks must be sorted by price")
        if np.any(s[:, 0] > self.cap):
            raise ValueError("block prices must not exceed the cap")
        self.stack = s
        self.demand = np.atleast_1d(np.asarray(self.demand, dtype=float))

    @property
    def T(self) -> int:
        return self.demand.size

    @classmethod
    def ladder(cls, T: int, p_low: float = 15.0, p_high: float = 80.0, capacity: float = 12.0,
               n_blocks: int = 60, peak: float = 9.0, **kw) -> "MarketConfig":
        """Evenly spaced ladder; the slope is (p_high - p_low) / capacity $/MWh per MW."""
        prices = np.linspace(p_low, p_high, n_blocks)
        stack = np.stack([prices, np.full(n_blocks, capacity / n_blocks)], axis=1)
        return cls(stack, peak * profiles.load_shape(T), **kw)

    @classmethod
    def from_dict(cls, d: dict, T: int) -> "MarketConfig":
        d = dict(d or {})
        if "stack" in d:
            d["demand"] = profiles.resolve(d["demand"], T)
            return cls(**d)
        return cls.ladder(T, **d)

    def clear_day(self, injection, demand=None, shift: float = 0.0) -> np.ndarray:
        """Clearing prices when the aggregator injects ``injection`` (MW, negative = buys)."""
        inj = np.broadcast_to(np.asarray(injection, dtype=float), (self.T,))
        dem = self.demand if demand is None else demand
        st = self.stack.copy()
        st[:, 0] = np.minimum(st[:, 0] + shift, self.cap)
        out = np.empty(self.T)
        for t in range(self.T):
            # a price-taking injection is the same as lowering residual demand
            out[t] = clear(st, dem[t] - inj[t], self.cap)[0]
        return out

    def slope(self) -> float:
        """Average price change per MW of residual demand on the ladder."""
        s = self.stack
        return float((s[-1, 0] - s[0, 0]) / max(s[:-1, 1].sum(), 1e-12))


@dataclass
class HistoryDataset:
    """Daily records: features per interval and realized prices.

    ``offers``: (n, T) aggregator offered quantity, ``prev``: (n, T) previous-day
    price, ``prices``: (n, T) realized price.
    """

    offers: np.ndarray
    prev: np.ndarray
    prices: np.ndarray
    demand: np.ndarray = field(default=None)

    def __post_init__(self):
        if not (self.offers.shape == self.prev.shape == self.prices.shape):
            raise ValueError("dataset arrays must be aligned")

    @property
    def n(self) -> int:
        return self.prices.shape[0]

    @property
    def T(self) -> int:
        return self.prices.shape[1]

    def subset(self, idx) -> "HistoryDataset":
        idx = np.asarray(idx)
        dem = None if self.demand is None else self.demand[idx]
        return HistoryDataset(self.offers[idx], self.prev[idx], self.prices[idx], dem)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["day", "interval", "offered_mw", "prev_price", "price"])
            for i in range(self.n):
                for t in range(self.T):
                    w.writerow([i, t + 1, repr(float(self.offers[i, t])), repr(float(self.prev[i, t])),
                                repr(float(self.prices[i, t]))])


def sample_day(cfg: MarketConfig, rng: np.random.Generator):
    dem = cfg.demand * (1.0 + cfg.demand_noise * rng.standard_normal(cfg.T))
    shift = cfg.price_noise * rng.standard_normal()
    spikes = np.where(rng.random(cfg.T) < cfg.spike_prob, cfg.spike_size, 0.0)
    return np.maximum(dem, 0.0), shift, spikes


def generate_history(cfg: MarketConfig, n_days: int, offer_scale: float = 1.0, seed: int | None = None,
                     offer_center=None) -> HistoryDataset:
    """Seeded history with random aggregator offers (uniform in +/- ``offer_scale`` MW
    about ``offer_center``) cleared against a perturbed market."""
    if n_days < 1:
        raise ValueError("n_days must be at least 1")
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    T = cfg.T
    center = np.zeros(T) if offer_center is None else np.broadcast_to(offer_center, (T,))
    offers = np.empty((n_days, T))
    prices = np.empty((n_days, T))
    demand = np.empty((n_days, T))
    prev = cfg.clear_day(center)
    prevs = np.empty((n_days, T))
    for i in range(n_days):
        dem, shift, spikes = sample_day(cfg, rng)
        q = center + offer_scale * (2.0 * rng.random(T) - 1.0)
        lam = np.minimum(cfg.clear_day(q, dem, shift) + spikes, cfg.cap)
        offers[i], prices[i], demand[i], prevs[i] = q, lam, dem, prev
        prev = lam
    return HistoryDataset(offers, prevs, prices, demand)
