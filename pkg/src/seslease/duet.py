"""Two-actor harness: the aggregator and the utility exchange only coupling messages.

Each actor keeps its private data (DER portfolio and offer prices on one side,
feeder model and storage asset on the other) and the pair runs the same
Gauss-Seidel iteration as :func:`seslease.admm.run_loop` in strict lockstep.

Wire format: one message per frame, ``b"<n> " + payload + b"\\n"`` where the
payload is ``n`` bytes of compact JSON with explicit field names.  Floats are
written with Python's shortest round-trip repr, so decoding is exact and the
iterates match the single-process loop bit for bit.

Aggregator message (``type = "agg"``):
    k               iteration tag
    p_g             per-interval award the aggregator proposes (MW)
    pes_b           leased-storage net profile (MW, discharge positive)
    pc_b, pd_b      its charge / discharge split
    cap_e, cap_p    requested lease capacities (MWh, MW)
    nsor_min/max    requested NSOR, the offer range (MW)
    phi, pi         current multipliers (scaled money units)
    stop            true on the closing frame

Utility message (``type = "util"``):
    k               iteration tag (echoes the request)
    pg, lease       the utility's copies of award and leased profile
    net_device      device discharge minus charge, P^d - P^c
    p_es            the utility's own storage share
    s_norm          change of its coupling vector since the previous iteration
    verdict         {"status": "feasible"} or the violating interval, vertex and bus
    lambda_e/p      posted lease prices ($/MWh/day, $/MW/day)
"""
from __future__ import annotations

import json
import queue
import socket
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from .admm import AdmmSettings, AggregatorAgent, UtilityAgent, collect_result, residuals_and_converged
from .models import lease_price_floor
from .security import check_nsor

AGG_FIELDS = ("type", "k", "p_g", "pes_b", "pc_b", "pd_b", "cap_e", "cap_p", "nsor_min", "nsor_max",
              "phi", "pi", "stop")
UTIL_FIELDS = ("type", "k", "pg", "lease", "net_device", "p_es", "s_norm", "verdict", "lambda_e", "lambda_p")
VERDICT_FIELDS = ("status", "t", "vertex", "bus", "amount")

# field tags that must never cross the boundary
FORBIDDEN = {
    "impedance": ("r", "x", "branch_r", "branch_x", "impedance", "resistance", "reactance", "z"),
    "topology": ("parent", "branches", "branch", "from_bus", "to_bus", "topology", "adjacency", "buses"),
    "bus injections": ("p_base", "q_base", "bus_injection", "loads", "p_bus", "weights"),
    "DER limits": ("p_max", "p_min", "e_max", "soc_min", "eta", "eta_c", "eta_d", "pair_min", "pair_max",
                   "units", "dg", "dr", "des", "flex"),
    "offer prices": ("alpha", "offer_price", "pair_cost", "cost", "costs", "c_dg", "c_dr", "c_des"),
}
LEXICON = {tag: family for family, tags in FORBIDDEN.items() for tag in tags}


class SchemaViolation(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


class DuetAbort(RuntimeError):
    def __init__(self, message, transcript, field_name: str | None = None):
        super().__init__(message)
        self.transcript = transcript
        self.field = field_name


def _floats(a) -> list:
    return [float(v) for v in np.asarray(a, dtype=float).ravel()]


def encode(msg: dict) -> bytes:
    return json.dumps(msg, separators=(",", ":"), allow_nan=False).encode()


def frame(payload: bytes) -> bytes:
    return str(len(payload)).encode() + b" " + payload + b"\n"


def _check_fields(msg: dict, allowed: tuple) -> None:
    for k in msg:
        if k not in allowed:
            raise SchemaViolation(k, "field not in the message schema")
    for k in allowed:
        if k not in msg:
            raise SchemaViolation(k, "required field missing")


def _check_vector(msg, name, T):
    v = msg[name]
    if not isinstance(v, list) or len(v) != T or not all(isinstance(x, (int, float)) for x in v):
        raise SchemaViolation(name, f"expected {T} numbers")


def decode(payload: bytes, T: int | None = None) -> dict:
    """Parse and validate one payload against its schema; unknown fields are rejected by name."""
    try:
        msg = json.loads(payload.decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise SchemaViolation("payload", f"not a JSON object ({e})") from None
    if not isinstance(msg, dict):
        raise SchemaViolation("payload", "not a JSON object")
    kind = msg.get("type")
    if kind == "agg":
        _check_fields(msg, AGG_FIELDS)
        vectors = ("p_g", "pes_b", "pc_b", "pd_b", "nsor_min", "nsor_max", "phi", "pi")
    elif kind == "util":
        _check_fields(msg, UTIL_FIELDS)
        vectors = ("pg", "lease", "net_device", "p_es")
        if not isinstance(msg["verdict"], dict):
            raise SchemaViolation("verdict", "expected an object")
        for k in msg["verdict"]:
            if k not in VERDICT_FIELDS:
                raise SchemaViolation(k, "field not in the verdict schema")
    else:
        raise SchemaViolation("type", f"unknown message type {kind!r}")
    if not isinstance(msg["k"], int) or msg["k"] < 1:
        raise SchemaViolation("k", "iteration tag must be a positive integer")
    T = T if T is not None else len(msg[vectors[0]]) if isinstance(msg[vectors[0]], list) else -1
    for name in vectors:
        _check_vector(msg, name, T)
    return msg


# -- transcript and audit --------------------------------------------------

@dataclass(frozen=True)
class Entry:
    direction: str          # "agg->util" or "util->agg"
    k: int
    payload: bytes


@dataclass
class Transcript:
    entries: list = field(default_factory=list)

    def add(self, direction: str, k: int, payload: bytes) -> None:
        self.entries.append(Entry(direction, k, payload))

    def __len__(self):
        return len(self.entries)

    def to_bytes(self) -> bytes:
        return b"".join(e.direction.encode() + b" " + str(e.k).encode() + b" " + frame(e.payload)
                        for e in self.entries)

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Transcript":
        t = cls()
        for line in open(path, "rb").read().splitlines():
            direction, k, n, payload = line.split(b" ", 3)
            if int(n) != len(payload):
                raise ValueError("transcript frame length mismatch")
            t.add(direction.decode(), int(k), payload)
        return t

    def check_order(self) -> bool:
        """Directions alternate (request, reply) and iteration tags never decrease."""
        last = 0
        for i, e in enumerate(self.entries):
            want = "agg->util" if i % 2 == 0 else "util->agg"
            if e.direction != want or e.k < last:
                return False
            last = e.k
        return True


@dataclass(frozen=True)
class Violation:
    index: int
    direction: str
    k: int
    field: str
    family: str


def _keys(obj):
    if isinstance(obj, dict):
        for k, v in obj.items():
            yield k
            yield from _keys(v)
    elif isinstance(obj, list):
        for v in obj:
            if isinstance(v, (dict, list)):
                yield from _keys(v)


def audit_privacy(transcript: Transcript, lexicon: dict | None = None) -> dict:
    """Scan every payload for registered private field tags; one pass over the transcript."""
    lex = LEXICON if lexicon is None else lexicon
    hits = []
    for i, e in enumerate(transcript.entries):
        try:
            obj = json.loads(e.payload.decode())
        except ValueError:
            hits.append(Violation(i, e.direction, e.k, "payload", "unparseable"))
            continue
        for key in _keys(obj):
            if key in lex:
                hits.append(Violation(i, e.direction, e.k, key, lex[key]))
    return {"messages": len(transcript), "violations": len(hits), "hits": hits}


# -- transports ------------------------------------------------------------

class InProcessChannel:
    """Two ordered queues; each end sends framed bytes and receives them intact."""

    def __init__(self, timeout: float = 60.0):
        self._q = (queue.Queue(), queue.Queue())
        self.timeout = timeout

    def end(self, side: int) -> "_QueueEnd":
        return _QueueEnd(self._q[side], self._q[1 - side], self.timeout)

    def close(self):
        pass


class _QueueEnd:
    def __init__(self, out_q, in_q, timeout):
        self.out_q, self.in_q, self.timeout = out_q, in_q, timeout

    def send(self, payload: bytes) -> None:
        self.out_q.put(frame(payload))

    def recv(self) -> bytes:
        try:
            data = self.in_q.get(timeout=self.timeout)
        except queue.Empty:
            raise ConnectionError("no message within the timeout") from None
        if data is None:
            raise ConnectionError("peer closed the channel")
        return _unframe_bytes(data)

    def close(self):
        self.out_q.put(None)


def _unframe_bytes(data: bytes) -> bytes:
    n, rest = data.split(b" ", 1)
    payload = rest[:-1]
    if len(payload) != int(n) or rest[-1:] != b"\n":
        raise ConnectionError("corrupt frame")
    return payload


class SocketChannel:
    """Localhost stream socket; side 0 connects, side 1 listens."""

    def __init__(self, timeout: float = 60.0):
        self.timeout = timeout
        self._srv = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._srv.bind(("127.0.0.1", 0))
        self._srv.listen(1)
        self._srv.settimeout(timeout)
        self.port = self._srv.getsockname()[1]

    def end(self, side: int) -> "_SocketEnd":
        if side == 0:
            s = socket.create_connection(("127.0.0.1", self.port), timeout=self.timeout)
        else:
            s, _ = self._srv.accept()
            s.settimeout(self.timeout)
        s.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        return _SocketEnd(s)

    def close(self):
        self._srv.close()


class _SocketEnd:
    def __init__(self, sock):
        self.sock = sock
        self.buf = b""

    def send(self, payload: bytes) -> None:
        self.sock.sendall(frame(payload))

    def _read(self, n: int) -> bytes:
        while len(self.buf) < n:
            chunk = self.sock.recv(1 << 16)
            if not chunk:
                raise ConnectionError("peer closed the connection")
            self.buf += chunk
        out, self.buf = self.buf[:n], self.buf[n:]
        return out

    def recv(self) -> bytes:
        while b" " not in self.buf:
            chunk = self.sock.recv(1 << 16)
            if not chunk:
                raise ConnectionError("peer closed the connection")
            self.buf += chunk
        head, self.buf = self.buf.split(b" ", 1)
        payload = self._read(int(head) + 1)
        if payload[-1:] != b"\n":
            raise ConnectionError("corrupt frame")
        return payload[:-1]

    def close(self):
        try:
            self.sock.close()
        except OSError:
            pass


# -- actors ----------------------------------------------------------------

class UtilityEndpoint:
    """Utility actor.  Builds its agent on the first request, from the requested NSOR only."""

    def __init__(self, asset, grid, prices, settings: AdmmSettings):
        self.asset, self.grid, self.prices, self.settings = asset, grid, prices, settings
        self.agent: UtilityAgent | None = None
        self.y_prev = None
        self.log = {}
        self.lambda_e, self.lambda_p, _ = lease_price_floor(asset.r, asset.y, asset.c_e, asset.c_p)

    def handle(self, msg: dict) -> dict:
        q = np.array(msg["p_g"])[None]
        pes = np.array(msg["pes_b"])[None]
        if self.agent is None:
            req = np.stack([msg["nsor_min"], msg["nsor_max"]], axis=1)[None]
            self.agent = UtilityAgent(self.asset, self.grid, self.prices, req, self.settings)
            self.y_prev = np.zeros(len(msg["p_g"]) + 2 * self.grid.T)
        if not msg["stop"]:
            self.agent.step(q, pes, np.array(msg["phi"])[None], np.array(msg["pi"])[None])
            y_vec = self.agent.residual_vector()
            s = float(np.linalg.norm(y_vec - self.y_prev))
            self.y_prev = y_vec
            self.log[msg["k"]] = {"s_norm": s, "utility_obj": self.agent.objective()}
        else:
            s = self.log[max(self.log)]["s_norm"] if self.log else 0.0
        verdict = check_nsor(self.grid, np.stack([q, q], axis=2), pes).as_dict()
        c = self.agent.coupling()
        return {"type": "util", "k": msg["k"], "pg": _floats(c["pg"]), "lease": _floats(c["lease"]),
                "net_device": _floats(c["net_device"]), "p_es": _floats(c["p_es"]), "s_norm": s,
                "verdict": {k: (float(v) if isinstance(v, float) else v) for k, v in verdict.items()},
                "lambda_e": float(self.lambda_e), "lambda_p": float(self.lambda_p)}

    def serve(self, end, errors: list) -> None:
        try:
            while True:
                msg = decode(end.recv())
                end.send(encode(self.handle(msg)))
                if msg["stop"]:
                    break
        except Exception as e:                      # reported by the coordinator
            errors.append(e)
        finally:
            end.close()


class AggregatorEndpoint:
    """Aggregator actor: runs its step, keeps the multipliers and decides when to stop."""

    def __init__(self, agent: AggregatorAgent):
        self.agent = agent
        self.log = {}

    def request(self, k: int, stop: bool = False) -> dict:
        c = self.agent.coupling()
        req = self.agent.requested_nsor
        return {"type": "agg", "k": k, "p_g": _floats(c["p_award"]), "pes_b": _floats(c["pes_b"]),
                "pc_b": _floats(c["pc_b"]), "pd_b": _floats(c["pd_b"]), "cap_e": c["cap_e"],
                "cap_p": c["cap_p"], "nsor_min": _floats(req[:, 0]), "nsor_max": _floats(req[:, 1]),
                "phi": _floats(self.agent.phi), "pi": _floats(self.agent.pi), "stop": bool(stop)}

    def check_prices(self, reply: dict) -> None:
        lt = self.agent.meta["lease"]
        for name, mine in (("lambda_e", lt.lambda_e), ("lambda_p", lt.lambda_p)):
            if abs(reply[name] - mine) > 1e-9 * max(1.0, abs(mine)):
                raise SchemaViolation(name, "posted lease price differs from the contract being priced")


def run_duet(scenario, transport: str = "inprocess", enabled: bool | None = None,
             settings: AdmmSettings | None = None, revenue: str = "robust", quad_price=None,
             mode: str = "duet", timeout: float = 60.0, tamper=None):
    """Run the ADMM exchange between two actors over ``transport`` ("inprocess" or "socket").

    Returns ``(EquilibriumResult, Transcript)``.  ``tamper`` may rewrite each
    outgoing aggregator payload (used to test schema rejection).  Any transport
    or schema failure aborts with :class:`DuetAbort` carrying the partial transcript.
    """
    settings = settings or scenario.admm
    port, lease = scenario.aggregators(enabled)[0]
    agg = AggregatorEndpoint(AggregatorAgent(port, lease, scenario.prices, settings, revenue, quad_price))
    util = UtilityEndpoint(scenario.asset, scenario.grid, scenario.prices, settings)
    chan = SocketChannel(timeout) if transport == "socket" else InProcessChannel(timeout)
    if transport not in ("socket", "inprocess"):
        raise ValueError(f"unknown transport {transport!r}")
    errors: list = []
    ends = {}
    if transport == "socket":
        acc = threading.Thread(target=lambda: ends.__setitem__(1, chan.end(1)))
        acc.start()
        ends[0] = chan.end(0)
        acc.join()
    else:
        ends[0], ends[1] = chan.end(0), chan.end(1)
    server = threading.Thread(target=util.serve, args=(ends[1], errors), daemon=True)
    server.start()
    tr = Transcript()
    T = scenario.T
    me = ends[0]
    pg = np.zeros(T)
    lease_copy = np.zeros(T)
    history = []
    converged = False
    k = 0
    t0 = time.perf_counter()

    def exchange(k, stop):
        payload = encode(agg.request(k, stop))
        if tamper is not None:
            payload = tamper(payload)
        tr.add("agg->util", k, payload)
        me.send(payload)
        try:
            raw = me.recv()
        except ConnectionError as e:
            server.join(timeout)
            cause = errors[0] if errors else e
            if isinstance(cause, SchemaViolation):
                raise DuetAbort(f"utility rejected message {k}: field {cause.field!r}", tr, cause.field) from cause
            raise DuetAbort(f"transport failure at iteration {k}: {cause}", tr) from cause
        tr.add("util->agg", k, raw)
        reply = decode(raw, T)
        if reply["k"] != k:
            raise DuetAbort(f"reply tagged {reply['k']} for request {k}", tr)
        agg.check_prices(reply)
        return reply

    try:
        for k in range(1, settings.k_max + 1):
            agg.agent.step(pg, lease_copy)
            reply = exchange(k, False)
            pg, lease_copy = np.array(reply["pg"]), np.array(reply["lease"])
            phi_old, pi_old = agg.agent.update_duals(pg, lease_copy)
            r, _, _ = residuals_and_converged(phi_old, agg.agent.phi, pi_old, agg.agent.pi, 0.0, 0.0, 1, 1)
            s = reply["s_norm"]
            done = r <= settings.eps_pri and s <= settings.eps_dual
            q = agg.agent.coupling()["p_award"]
            pes = agg.agent.coupling()["pes_b"]
            fa = agg.agent.objective()
            fu = util.log[k]["utility_obj"]                 # harness-side bookkeeping, never on the wire
            history.append({"k": k, "r_norm": r, "s_norm": s, "aggregator_obj": fa, "utility_obj": fu,
                            "total_obj": fa + fu, "gap_phi": float(np.linalg.norm(pg - q)),
                            "gap_pi": float(np.linalg.norm(lease_copy - pes))})
            if done:
                converged = True
                break
        exchange(k + 1, True)
    except SchemaViolation as e:
        me.close()
        raise DuetAbort(f"schema violation in field {e.field!r}: {e}", tr, e.field) from e
    finally:
        server.join(timeout)
        me.close()
        chan.close()
    res = collect_result([agg.agent], util.agent, settings, mode, converged, k, history,
                         time.perf_counter() - t0)
    res.extra["transcript_messages"] = len(tr)
    return res, tr
