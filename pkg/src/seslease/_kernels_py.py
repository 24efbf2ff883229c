"""Pure numpy versions of the compiled kernels (same signatures as ``_kernels``)."""
import numpy as np


def distflow_sweep(parent, order, r, x, p, q, v_set):
    """Batched linear DistFlow.

    ``p`` and ``q`` are (n_rows, n_bus) injections, ``v_set`` is (n_rows,).
    Returns squared voltages of shape (n_rows, n_bus).
    """
    p_sub = np.array(p, dtype=float, copy=True)
    q_sub = np.array(q, dtype=float, copy=True)
    for j in order[:0:-1]:
        i = parent[j]
        p_sub[:, i] += p_sub[:, j]
        q_sub[:, i] += q_sub[:, j]
    v = np.empty_like(p_sub)
    v[:, order[0]] = v_set
    for j in order[1:]:
        v[:, j] = v[:, parent[j]] + 2.0 * (r[j] * p_sub[:, j] + x[j] * q_sub[:, j])
    return v


def merit_order_fill(prices, quantities, demand):
    """Clear one interval: ``prices``/``quantities`` already sorted by price.

    Returns (clearing_price, awards).  Blocks at the marginal price share the
    remaining demand pro rata.
    """
    prices = np.asarray(prices, dtype=float)
    quantities = np.asarray(quantities, dtype=float)
    n = prices.size
    awards = np.zeros(n)
    if n == 0:
        return np.nan, awards
    remaining = demand
    if remaining <= 0.0:
        return prices[0], awards
    i = 0
    price = prices[-1]
    while i < n:
        j = i
        cap = 0.0
        while j < n and prices[j] == prices[i]:
            cap += quantities[j]
            j += 1
        if cap >= remaining:
            if cap > 0.0:
                awards[i:j] = quantities[i:j] * (remaining / cap)
            price = prices[i]
            remaining = 0.0
            break
        awards[i:j] = quantities[i:j]
        remaining -= cap
        i = j
    return price, awards
