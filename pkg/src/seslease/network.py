"""Radial feeder model and linearized DistFlow evaluation.

Squared voltages obey ``v_parent - v_child = 2 (r P + x Q)`` on every branch, with
branch flows equal to the (negated) total injection of the child's subtree.  All
quantities are per-unit; powers in MW are divided by ``Network.base_mva`` at the
boundary (see :meth:`Network.to_pu`).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels


class NetworkError(ValueError):
    """Raised for malformed feeder descriptions."""


@dataclass(frozen=True)
class Bus:
    id: int
    v_min: float
    v_max: float
    q_inj_fixed: float = 0.0
    p_inj_fixed: float = 0.0


@dataclass(frozen=True)
class Branch:
    parent: int
    child: int
    r: float
    x: float
    # not enforced by the security check; kept so thermal limits can be added later
    s_max: float | None = None


@dataclass(frozen=True)
class DnScenario:
    """One realization of the uncontrolled network state.

    ``p_inj_uncontrolled`` has shape (n_bus, T) in per-unit (positive = injection),
    ``v_set`` is the squared root voltage (scalar or per interval) and
    ``u_award`` holds one award fraction in [0, 1] per aggregator.
    """

    p_inj_uncontrolled: np.ndarray
    v_set: float | np.ndarray = 1.0
    u_award: tuple[float, ...] = ()

    def __post_init__(self):
        p = np.asarray(self.p_inj_uncontrolled, dtype=float)
        if not np.all(np.isfinite(p)) or not np.all(np.isfinite(self.v_set)):
            raise ValueError("scenario values must be finite")
        if any(not 0.0 <= u <= 1.0 for u in self.u_award):
            raise ValueError("award fractions must lie in [0, 1]")
        object.__setattr__(self, "p_inj_uncontrolled", p)


@dataclass(frozen=True, eq=False)
class Network:
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    base_mva: float = 1.0
    # derived, index-based views (root has index 0)
    parent: np.ndarray = field(repr=False, default=None)
    order: np.ndarray = field(repr=False, default=None)
    r: np.ndarray = field(repr=False, default=None)
    x: np.ndarray = field(repr=False, default=None)

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @property
    def bus_ids(self) -> list[int]:
        return [b.id for b in self.buses]

    def index(self, bus_id: int) -> int:
        try:
            return self._index[bus_id]
        except KeyError:
            raise KeyError(f"unknown bus {bus_id}") from None

    @property
    def v_min(self) -> np.ndarray:
        return np.array([b.v_min for b in self.buses])

    @property
    def v_max(self) -> np.ndarray:
        return np.array([b.v_max for b in self.buses])

    @property
    def q_fixed(self) -> np.ndarray:
        return np.array([b.q_inj_fixed for b in self.buses])

    @property
    def p_fixed(self) -> np.ndarray:
        return np.array([b.p_inj_fixed for b in self.buses])

    def to_pu(self, mw):
        return np.asarray(mw, dtype=float) / self.base_mva

    def voltage_offset(self) -> np.ndarray:
        """Constant squared-voltage shift caused by the fixed reactive injections."""
        return reactive_sensitivities(self) @ self.q_fixed


def load_network(spec: dict) -> Network:
    """Validate a feeder description and return a :class:`Network`.

    ``spec`` holds ``buses`` (dicts with id, v_min, v_max and optional q_fixed /
    p_fixed), ``branches`` (parent, child, r, x) and an optional ``base_mva``.
    The first listed bus is the root.  Branch orientation is normalized so that
    every branch points away from the root.
    """
    raw_buses = spec.get("buses") or []
    if not raw_buses:
        raise NetworkError("feeder has no buses")
    buses = []
    seen = set()
    for b in raw_buses:
        bus = Bus(int(b["id"]), float(b["v_min"]), float(b["v_max"]),
                  float(b.get("q_fixed", 0.0)), float(b.get("p_fixed", 0.0)))
        if bus.id in seen:
            raise NetworkError(f"duplicate bus {bus.id}")
        if not 0.0 < bus.v_min < bus.v_max:
            raise NetworkError(f"bus {bus.id}: voltage bounds must satisfy 0 < v_min < v_max")
        seen.add(bus.id)
        buses.append(bus)
    index = {b.id: i for i, b in enumerate(buses)}
    n = len(buses)

    adj: dict[int, list[tuple[int, float, float]]] = {i: [] for i in range(n)}
    pairs = set()
    for br in spec.get("branches") or []:
        a, c = int(br["parent"]), int(br["child"])
        r, x = float(br["r"]), float(br["x"])
        if a not in index or c not in index:
            raise NetworkError(f"branch ({a},{c}) references an unknown bus")
        if a == c:
            raise NetworkError(f"branch ({a},{c}) is a self loop")
        key = frozenset((a, c))
        if key in pairs:
            raise NetworkError(f"duplicate branch ({a},{c}) would close a cycle")
        if r < 0 or x < 0:
            raise NetworkError(f"branch ({a},{c}) has negative impedance")
        pairs.add(key)
        adj[index[a]].append((index[c], r, x))
        adj[index[c]].append((index[a], r, x))
    if len(pairs) != n - 1:
        kind = "cycle detected" if len(pairs) > n - 1 else "disconnected bus"
        raise NetworkError(f"{kind}: {n} buses need exactly {n - 1} branches, got {len(pairs)}")

    parent = np.full(n, -1, dtype=np.int64)
    r_in = np.zeros(n)
    x_in = np.zeros(n)
    order = [0]
    visited = np.zeros(n, dtype=bool)
    visited[0] = True
    head = 0
    while head < len(order):
        i = order[head]
        head += 1
        for j, r, x in adj[i]:
            if visited[j]:
                if parent[i] != j:
                    raise NetworkError("cycle detected")
                continue
            visited[j] = True
            parent[j] = i
            r_in[j], x_in[j] = r, x
            order.append(j)
    if not visited.all():
        missing = [buses[i].id for i in np.flatnonzero(~visited)]
        raise NetworkError(f"disconnected bus(es): {missing}")

    branches = tuple(Branch(buses[parent[j]].id, buses[j].id, r_in[j], x_in[j]) for j in order[1:])
    net = Network(tuple(buses), branches, float(spec.get("base_mva", 1.0)),
                  parent, np.asarray(order, dtype=np.int64), r_in, x_in)
    object.__setattr__(net, "_index", index)
    return net


def read_feeder(path: str | Path) -> Network:
    """Parse a feeder file.

    Record format, whitespace separated, ``#`` starts a comment::

        base_mva <MVA>
        bus <id> <v_min_sq> <v_max_sq> [q_fixed] [p_fixed]
        branch <parent> <child> <r> <x>
    """
    spec: dict = {"buses": [], "branches": []}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.split()
        try:
            if tok[0] == "base_mva":
                spec["base_mva"] = float(tok[1])
            elif tok[0] == "bus":
                rec = {"id": int(tok[1]), "v_min": float(tok[2]), "v_max": float(tok[3])}
                if len(tok) > 4:
                    rec["q_fixed"] = float(tok[4])
                if len(tok) > 5:
                    rec["p_fixed"] = float(tok[5])
                spec["buses"].append(rec)
            elif tok[0] == "branch":
                spec["branches"].append({"parent": int(tok[1]), "child": int(tok[2]),
                                         "r": float(tok[3]), "x": float(tok[4])})
            else:
                raise NetworkError(f"unknown record '{tok[0]}'")
        except (IndexError, ValueError) as exc:
            raise NetworkError(f"{path}:{lineno}: {exc}") from None
    return load_network(spec)


def write_feeder(net: Network, path: str | Path) -> None:
    f = lambda v: repr(float(v))
    lines = [f"base_mva {f(net.base_mva)}"]
    lines += [f"bus {b.id} {f(b.v_min)} {f(b.v_max)} {f(b.q_inj_fixed)} {f(b.p_inj_fixed)}" for b in net.buses]
    lines += [f"branch {br.parent} {br.child} {f(br.r)} {f(br.x)}" for br in net.branches]
    Path(path).write_text("\n".join(lines) + "\n")


def _path_sensitivity(net: Network, w: np.ndarray) -> np.ndarray:
    # M[j, m] = 2 * sum of w over branches shared by the root paths of j and m;
    # branch "into k" lies on j's path iff k is j or one of its ancestors
    n = net.n_bus
    anc = np.zeros((n, n))
    for j in net.order:
        if j:
            anc[j] = anc[net.parent[j]]
        anc[j, j] = 1.0
    anc[:, 0] = 0.0
    return 2.0 * (anc * w) @ anc.T


def voltage_sensitivities(net: Network) -> np.ndarray:
    """Matrix S with ``v = v_set + S p + (reactive offset)`` for per-unit injections p."""
    S = getattr(net, "_s_cache", None)
    if S is None:
        S = _path_sensitivity(net, net.r)
        S.setflags(write=False)
        object.__setattr__(net, "_s_cache", S)
    return S


def reactive_sensitivities(net: Network) -> np.ndarray:
    Sq = getattr(net, "_sq_cache", None)
    if Sq is None:
        Sq = _path_sensitivity(net, net.x)
        Sq.setflags(write=False)
        object.__setattr__(net, "_sq_cache", Sq)
    return Sq


def voltage_profile(net: Network, scenario: DnScenario, controllable=None) -> np.ndarray:
    """Squared bus voltages, shape (n_bus, T), from a backward/forward tree sweep."""
    p = scenario.p_inj_uncontrolled
    squeeze = p.ndim == 1
    p = np.atleast_2d(p.T).T if squeeze else p
    if p.shape[0] != net.n_bus:
        raise ValueError(f"expected {net.n_bus} bus rows, got {p.shape[0]}")
    if controllable is not None:
        c = np.asarray(controllable, dtype=float)
        c = c.reshape(p.shape) if c.size == p.size else c
        if c.shape != p.shape:
            raise ValueError(f"controllable injections shape {c.shape} != {p.shape}")
        p = p + c
    T = p.shape[1]
    v_set = np.broadcast_to(np.asarray(scenario.v_set, dtype=float), (T,))
    q = np.repeat(net.q_fixed[:, None], T, axis=1)
    v = kernels.distflow_sweep(net.parent, net.order, net.r, net.x,
                               np.ascontiguousarray(p.T), np.ascontiguousarray(q.T),
                               np.ascontiguousarray(v_set)).T
    return v[:, 0] if squeeze else v
