"""Synthetic daily shapes (PV, residential demand, wholesale price) on any horizon.

Interval t covers hour ``(t + 0.5) * 24 / T`` of the day, so shapes stay
comparable between a 4-interval desk case and an hourly day.
"""
from __future__ import annotations

import numpy as np


def hours(T: int) -> np.ndarray:
    return (np.arange(T) + 0.5) * 24.0 / T


def pv_shape(T: int) -> np.ndarray:
    h = hours(T)
    return np.clip(np.sin(np.pi * (h - 6.0) / 12.0), 0.0, None)


def load_shape(T: int) -> np.ndarray:
    h = hours(T)
    s = 0.55 + 0.25 * np.exp(-0.5 * ((h - 8.0) / 1.8) ** 2) + 0.45 * np.exp(-0.5 * ((h - 19.0) / 2.2) ** 2)
    return s / s.max()


def price_shape(T: int, base: float = 28.0) -> np.ndarray:
    h = hours(T)
    return (base + 12.0 * np.exp(-0.5 * ((h - 8.0) / 1.8) ** 2) + 30.0 * np.exp(-0.5 * ((h - 18.5) / 2.0) ** 2)
            - 8.0 * pv_shape(T))


SHAPES = {"pv": pv_shape, "load": load_shape, "price": price_shape}


def resolve(spec, T: int) -> np.ndarray:
    """A literal list, a scalar, or ``{"shape": name, "scale": s, "offset": o}``."""
    if isinstance(spec, dict):
        shape = SHAPES[spec["shape"]](T)
        return float(spec.get("offset", 0.0)) + float(spec.get("scale", 1.0)) * shape
    arr = np.asarray(spec, dtype=float)
    if arr.ndim == 0:
        return np.full(T, float(arr))
    if arr.shape != (T,):
        raise ValueError(f"profile has {arr.size} entries, expected {T}")
    return arr
