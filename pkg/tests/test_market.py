import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from seslease.market import HistoryDataset, MarketConfig, clear, generate_history

STACK = [(10.0, 5.0), (20.0, 5.0)]


def test_clear_by_hand():
    price, aw = clear(STACK, 7.0, cap=300.0)
    assert price == 20.0 and np.allclose(aw, [5.0, 2.0])


def test_clear_zero_demand():
    price, aw = clear(STACK, 0.0, cap=300.0)
    assert price == 10.0 and np.all(aw == 0.0)


def test_cheap_aggregator_block_shifts_margin():
    price, aw = clear(STACK + [(0.0, 3.0)], 7.0, cap=300.0)
    assert price == 10.0 and np.allclose(aw, [4.0, 0.0, 3.0])


def test_shortage_clears_at_cap():
    price, aw = clear(STACK, 12.0, cap=300.0)
    assert price == 300.0 and np.allclose(aw, [5.0, 5.0])


def test_marginal_tie_is_pro_rata():
    price, aw = clear([(10.0, 2.0), (10.0, 6.0)], 4.0)
    assert price == 10.0 and np.allclose(aw, [1.0, 3.0])


blocks = st.lists(st.tuples(st.floats(0, 200), st.floats(0, 10)), min_size=1, max_size=12)


@settings(max_examples=100, deadline=None)
@given(blocks, st.floats(0, 80))
def test_clearing_invariants(bl, demand):
    b = np.array(bl)
    price, aw = clear(b, demand, cap=300.0)
    assert b[:, 0].min() - 1e-12 <= price <= 300.0
    assert aw.sum() == pytest.approx(min(demand, b[:, 1].sum()), abs=1e-9)
    assert np.all(aw <= b[:, 1] + 1e-12) and np.all(aw >= -1e-12)
    # blocks priced below the clearing price are fully awarded
    below = b[:, 0] < price
    assert np.allclose(aw[below], b[below, 1], atol=1e-9)


@settings(max_examples=100, deadline=None)
@given(blocks, st.floats(0, 80), st.floats(0, 200), st.floats(0, 10))
def test_cheap_supply_never_raises_price(bl, demand, p_new, q_new):
    b = np.array(bl)
    p0, _ = clear(b, demand, cap=300.0)
    p1, _ = clear(np.vstack([b, [min(p_new, p0), q_new]]), demand, cap=300.0)
    assert p1 <= p0 + 1e-12


def noisy(T=4, **kw):
    return MarketConfig.ladder(T, demand_noise=0.05, price_noise=2.0, **kw)


def test_history_shape_and_reproducible():
    cfg = noisy(seed=5)
    a, b = generate_history(cfg, 30, 2.0), generate_history(cfg, 30, 2.0)
    assert a.prices.shape == (30, 4) and a.prices.size == 30 * cfg.T
    assert np.array_equal(a.prices, b.prices) and np.array_equal(a.offers, b.offers)
    assert np.all(a.prices <= cfg.cap)


def test_zero_noise_days_identical():
    h = generate_history(MarketConfig.ladder(4), 10, offer_scale=0.0)
    assert np.all(h.prices == h.prices[0])
    assert np.all(h.prev == h.prices[0])


def test_doubling_offers_lowers_mean_price():
    cfg = noisy()
    one = generate_history(cfg, 100, 0.0, seed=1, offer_center=1.5)
    two = generate_history(cfg, 100, 0.0, seed=1, offer_center=3.0)
    assert two.prices.mean() <= one.prices.mean()


def test_injection_lowers_price():
    cfg = MarketConfig.ladder(4)
    assert np.all(cfg.clear_day(np.full(4, 2.0)) <= cfg.clear_day(np.zeros(4)))
    assert cfg.slope() > 0


def test_config_validation():
    with pytest.raises(ValueError):
        MarketConfig(np.array([[20.0, 1.0], [10.0, 1.0]]), [5.0])
    with pytest.raises(ValueError):
        MarketConfig(np.array([[400.0, 1.0]]), [5.0], cap=300.0)
    with pytest.raises(ValueError):
        generate_history(MarketConfig.ladder(2), 0)
    with pytest.raises(ValueError):
        HistoryDataset(np.zeros((2, 3)), np.zeros((2, 3)), np.zeros((3, 3)))


def test_csv_export(tmp_path):
    h = generate_history(noisy(T=2), 3, 1.0)
    h.to_csv(tmp_path / "h.csv")
    lines = (tmp_path / "h.csv").read_text().splitlines()
    assert lines[0] == "day,interval,offered_mw,prev_price,price"
    assert len(lines) == 1 + 3 * 2
    assert float(lines[1].split(",")[4]) == h.prices[0, 0]
