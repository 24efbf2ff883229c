"""Scenario configuration: YAML in, validated model objects out.

Every validation error is a :class:`ConfigError` carrying the dotted field path,
so the command line can name the offending entry.  Powers are given in MW and
converted to per-unit at the network boundary.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from . import profiles
from .admm import AdmmSettings
from .models import DerPortfolio, DerUnit, LeaseTerms, SesAsset
from .network import Network, NetworkError, load_network, read_feeder
from .security import GridModel
from .uncertainty import DnBox, PriceBox

MODES = ("centralized", "mode1", "mode2", "no-ses", "duet")


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass(frozen=True, eq=False)
class Scenario:
    name: str
    T: int
    seed: int
    net: Network
    grid: GridModel
    portfolio: DerPortfolio
    asset: SesAsset
    prices: PriceBox
    lease_enabled: bool = True
    admm: AdmmSettings = field(default_factory=AdmmSettings)
    tol: float = 1e-7
    mc_samples: int = 1000
    mc_tol: float = 1e-6
    market: dict = field(default_factory=dict)
    e2e: dict = field(default_factory=dict)
    source: str = ""

    def lease(self, enabled: bool | None = None) -> LeaseTerms:
        on = self.lease_enabled if enabled is None else enabled
        return self.asset.lease_terms(on)

    def aggregators(self, enabled: bool | None = None) -> list:
        return [(self.portfolio, self.lease(enabled))]

    def with_prices(self, prices: PriceBox) -> "Scenario":
        return _replace(self, prices=prices)

    def with_portfolio(self, portfolio: DerPortfolio) -> "Scenario":
        return _replace(self, portfolio=portfolio)

    def with_seed(self, seed: int) -> "Scenario":
        return _replace(self, seed=int(seed))


def _replace(sc: Scenario, **kw) -> Scenario:
    d = {k: getattr(sc, k) for k in sc.__dataclass_fields__}
    d.update(kw)
    return Scenario(**d)


# -- small typed readers ---------------------------------------------------

def _get(d: dict, key: str, path: str, default=..., kind=None):
    if not isinstance(d, dict):
        raise ConfigError(path, "expected a mapping")
    if key not in d or d[key] is None:
        if default is ...:
            raise ConfigError(f"{path}.{key}" if path else key, "missing")
        return default
    v = d[key]
    if kind is float:
        try:
            v = float(v)
        except (TypeError, ValueError):
            raise ConfigError(f"{path}.{key}", f"expected a number, got {v!r}") from None
        if not np.isfinite(v):
            raise ConfigError(f"{path}.{key}", "must be finite")
    elif kind is int:
        if isinstance(v, bool) or not isinstance(v, (int, np.integer)):
            raise ConfigError(f"{path}.{key}", f"expected an integer, got {v!r}")
        v = int(v)
    elif kind is bool and not isinstance(v, bool):
        raise ConfigError(f"{path}.{key}", f"expected true/false, got {v!r}")
    return v


def _series(spec, T: int, path: str) -> np.ndarray:
    try:
        arr = profiles.resolve(spec, T)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(path, f"bad profile ({exc})") from None
    if not np.all(np.isfinite(arr)):
        raise ConfigError(path, "profile values must be finite")
    return arr


def _positive(v: float, path: str, strict=True):
    if (v <= 0) if strict else (v < 0):
        raise ConfigError(path, "must be positive" if strict else "must be nonnegative")
    return v


def _efficiency(v: float, path: str):
    if not 0 < v <= 1:
        raise ConfigError(path, "efficiency must lie in (0, 1]")
    return v


# -- sections --------------------------------------------------------------

def resolve_path(name: str, base: Path | None) -> Path:
    """Config-relative path, falling back to the bundled data directory."""
    p = Path(name)
    if p.is_absolute() and p.exists():
        return p
    if base is not None and (base / p).exists():
        return base / p
    bundled = resources.files("seslease") / "data" / p.name
    if bundled.is_file():
        return Path(str(bundled))
    raise ConfigError("network.feeder", f"file not found: {name}")


def _network(d: dict, base: Path | None) -> Network:
    try:
        if "feeder" in d:
            return read_feeder(resolve_path(d["feeder"], base))
        if "buses" in d:
            return load_network(d)
    except NetworkError as exc:
        raise ConfigError("network", str(exc)) from None
    raise ConfigError("network", "give either 'feeder' (file) or inline 'buses'/'branches'")


def _prices(d: dict, T: int) -> PriceBox:
    lam = _series(_get(d, "expected", "prices"), T, "prices.expected")
    delta = _series(_get(d, "delta", "prices", 0.0), T, "prices.delta")
    if np.any(delta < 0):
        raise ConfigError("prices.delta", "half-widths must be nonnegative")
    return PriceBox(lam, delta)


def _portfolio(d: dict, T: int, net: Network) -> DerPortfolio:
    path = "aggregator"
    costs = _get(d, "costs", path, {})
    units = []
    raw = _get(d, "units", path)
    if not isinstance(raw, list) or not raw:
        raise ConfigError(f"{path}.units", "expected a nonempty list")
    for i, u in enumerate(raw):
        p = f"{path}.units[{i}]"
        kind = _get(u, "kind", p)
        bus = _get(u, "bus", p, kind=int)
        try:
            net.index(bus)
        except KeyError:
            raise ConfigError(f"{p}.bus", f"bus {bus} not in the feeder") from None
        if bus == net.buses[0].id:
            raise ConfigError(f"{p}.bus", "aggregator units cannot sit at the root bus")
        if kind == "dg":
            hi = _series(_get(u, "p_max", p), T, f"{p}.p_max")
            lo = _series(_get(u, "p_min", p, 0.0), T, f"{p}.p_min")
            if np.any(lo < 0) or np.any(lo > hi):
                raise ConfigError(f"{p}.p_min", "need 0 <= p_min <= p_max")
            units.append(DerUnit("dg", bus, lo, hi))
        elif kind == "dr":
            dem = _series(_get(u, "demand", p), T, f"{p}.demand")
            if np.any(dem < 0):
                raise ConfigError(f"{p}.demand", "demand must be nonnegative")
            flex = _get(u, "flex", p, [1.0, 1.0])
            if not (isinstance(flex, list) and len(flex) == 2) or not 0 <= float(flex[0]) <= float(flex[1]):
                raise ConfigError(f"{p}.flex", "expected [low, high] multipliers with 0 <= low <= high")
            units.append(DerUnit("dr", bus, -float(flex[1]) * dem, -float(flex[0]) * dem))
        elif kind == "des":
            pmax = _positive(_get(u, "p_max", p, kind=float), f"{p}.p_max", strict=False)
            emax = _positive(_get(u, "e_max", p, kind=float), f"{p}.e_max", strict=False)
            eta = _efficiency(_get(u, "eta", p, 0.95, kind=float), f"{p}.eta")
            soc = _get(u, "soc_min", p, 0.1, kind=float)
            if not 0 <= soc <= 0.5:
                raise ConfigError(f"{p}.soc_min", "must lie in [0, 0.5] (storage starts half full)")
            units.append(DerUnit("des", bus, np.full(T, -pmax), np.full(T, pmax), emax, soc, eta, eta))
        else:
            raise ConfigError(f"{p}.kind", f"unknown DER kind {kind!r} (dg, dr, des)")
    amin, amax = _get(d, "alpha", path, [-1000.0, 1000.0])
    if not float(amin) < float(amax):
        raise ConfigError(f"{path}.alpha", "need alpha_min < alpha_max")
    w = _get(d, "weights", path, None)
    return DerPortfolio(tuple(units), _get(costs, "dg", f"{path}.costs", 0.0, float),
                        _get(costs, "dr", f"{path}.costs", 0.0, float),
                        _get(costs, "des", f"{path}.costs", 0.0, float), float(amin), float(amax), w)


def _asset(d: dict) -> tuple[SesAsset, bool]:
    p = "ses"
    kw = {}
    for key in ("e_max", "p_max", "c_om", "c_e", "c_p"):
        kw[key] = _positive(_get(d, key, p, 0.0, float), f"{p}.{key}", strict=False)
    for key in ("eta_c", "eta_d"):
        kw[key] = _efficiency(_get(d, key, p, 0.922, float), f"{p}.{key}")
    kw["r"] = _positive(_get(d, "r", p, 0.08, float), f"{p}.r")
    kw["y"] = _get(d, "y", p, 10.0, float)
    if kw["y"] < 1:
        raise ConfigError(f"{p}.y", "lifetime must be at least one year")
    for key in ("k_c", "k_d", "k"):
        kw[key] = _positive(_get(d, key, p, 0.5, float), f"{p}.{key}")
    kw["soc_min"] = _get(d, "soc_min", p, 0.1, float)
    if not 0 <= kw["soc_min"] <= 0.5:
        raise ConfigError(f"{p}.soc_min", "must lie in [0, 0.5]")
    return SesAsset(**kw), _get(d, "enabled", p, True, bool)


def _grid(d: dict, unc: dict, T: int, net: Network, port: DerPortfolio) -> GridModel:
    """Deterministic injections, the network box and participation factors."""
    p = "network"
    shape = _series(_get(d, "load_profile", p, 1.0), T, f"{p}.load_profile")
    scale = _positive(_get(d, "load_scale", p, 1.0, float), f"{p}.load_scale", strict=False)
    base = np.outer(net.p_fixed * scale, shape)                  # per-unit, negative = load
    served = _get(d, "served_by_aggregator", p, [])
    for j in served:
        try:
            base[net.index(int(j))] = 0.0
        except KeyError:
            raise ConfigError(f"{p}.served_by_aggregator", f"bus {j} not in the feeder") from None
    for i, ld in enumerate(_get(d, "loads", p, [])):
        q = f"{p}.loads[{i}]"
        j = _get(ld, "bus", q, kind=int)
        try:
            k = net.index(j)
        except KeyError:
            raise ConfigError(f"{q}.bus", f"bus {j} not in the feeder") from None
        base[k] -= net.to_pu(_series(_get(ld, "mw", q), T, f"{q}.mw"))

    up = "uncertainty"
    buses, ex, dg = [], [], []
    for i, pv in enumerate(_get(unc, "pv", up, [])):
        q = f"{up}.pv[{i}]"
        j = _get(pv, "bus", q, kind=int)
        try:
            net.index(j)
        except KeyError:
            raise ConfigError(f"{q}.bus", f"bus {j} not in the feeder") from None
        mw = _series(_get(pv, "mw", q), T, f"{q}.mw")
        frac = _positive(_get(pv, "frac", q, 0.2, float), f"{q}.frac", strict=False)
        buses.append(j)
        ex.append(net.to_pu(mw))
        dg.append(net.to_pu(np.abs(mw) * frac))
    vs = _get(unc, "v_set", up, [1.0, 1.0])
    if not (isinstance(vs, list) and len(vs) == 2) or not 0 < float(vs[0]) <= float(vs[1]):
        raise ConfigError(f"{up}.v_set", "expected [low, high] root voltage magnitudes with 0 < low <= high")
    k = len(buses)
    box = DnBox(tuple(buses), np.array(ex).reshape(k, T), np.array(dg).reshape(k, T),
                float(vs[0]) ** 2, float(vs[1]) ** 2, 1)
    w = np.zeros((1, net.n_bus))
    for j, val in port.bus_weights().items():
        w[0, net.index(j)] = val
    mode = _get(unc, "vertex_mode", up, "full")
    if mode not in ("full", "dominant"):
        raise ConfigError(f"{up}.vertex_mode", "must be 'full' or 'dominant'")
    return GridModel(net, base, box, w, mode, _get(unc, "vertex_cap", up, 4096, int))


def scenario_from_dict(d: dict, base: Path | None = None, source: str = "") -> Scenario:
    if not isinstance(d, dict):
        raise ConfigError("<root>", "config must be a mapping")
    T = _get(d, "horizon", "", kind=int)
    if T < 1:
        raise ConfigError("horizon", "must be at least 1")
    seed = _get(d, "seed", "", 0, int)
    net = _network(_get(d, "network", ""), base)
    port = _portfolio(_get(d, "aggregator", ""), T, net)
    asset, enabled = _asset(_get(d, "ses", "", {}))
    prices = _prices(_get(d, "prices", ""), T)
    grid = _grid(_get(d, "network", ""), _get(d, "uncertainty", "", {}), T, net, port)
    a = _get(d, "admm", "", {})
    try:
        admm = AdmmSettings(**{k: (int(v) if k == "k_max" else float(v)) for k, v in a.items()})
    except TypeError as exc:
        raise ConfigError("admm", str(exc)) from None
    except ValueError as exc:
        raise ConfigError("admm", str(exc)) from None
    solver = _get(d, "solver", "", {})
    mc = _get(d, "mc", "", {})
    return Scenario(
        name=str(_get(d, "name", "", "scenario")), T=T, seed=seed, net=net, grid=grid, portfolio=port,
        asset=asset, prices=prices, lease_enabled=enabled, admm=admm,
        tol=_positive(_get(solver, "tol", "solver", 1e-7, float), "solver.tol"),
        mc_samples=_get(mc, "samples", "mc", 1000, int),
        mc_tol=_positive(_get(mc, "tol", "mc", 1e-6, float), "mc.tol"),
        market=_get(d, "market", "", {}), e2e=_get(d, "e2e", "", {}), source=source)


def load_scenario(path: str | Path) -> Scenario:
    """Read a YAML scenario; a bare name resolves to a bundled scenario."""
    p = Path(path)
    if not p.exists():
        bundled = resources.files("seslease") / "scenarios" / f"{p.stem}.yaml"
        if not bundled.is_file():
            raise ConfigError("config", f"file not found: {path}")
        p = Path(str(bundled))
    try:
        data = yaml.safe_load(p.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError("config", f"malformed YAML ({exc})") from None
    return scenario_from_dict(data, p.parent, str(p))


def shipped_scenarios() -> list[str]:
    root = resources.files("seslease") / "scenarios"
    return sorted(Path(str(f)).stem for f in root.iterdir() if str(f).endswith(".yaml"))
