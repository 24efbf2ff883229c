"""Convex (LP/QP) program container, certified solves and the differentiable solve.

Programs are written as::

    minimize    c.x + 1/2 x'Px + (eps/2)|x|^2 + const
    subject to  A_ub x <= b_ub,  A_eq x = b_eq,  lb <= x <= ub

The numerical work is delegated to Clarabel (interior point); optimality is
declared only after our own KKT check passes, never on the backend's word.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import clarabel
import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
UNBOUNDED = "unbounded"
NUMERICAL_ERROR = "numerical_error"


class SolveError(RuntimeError):
    def __init__(self, message, solution=None):
        super().__init__(message)
        self.solution = solution


@dataclass(frozen=True, eq=False)
class ConvexProgram:
    c: np.ndarray
    A_ub: sp.csr_matrix
    b_ub: np.ndarray
    A_eq: sp.csr_matrix
    b_eq: np.ndarray
    lb: np.ndarray
    ub: np.ndarray
    P: sp.csc_matrix | None = None
    eps: float = 0.0
    const: float = 0.0
    blocks: dict = field(default_factory=dict)
    ub_tags: dict = field(default_factory=dict)
    eq_tags: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n = self.c.size
        for name, arr in (("lb", self.lb), ("ub", self.ub)):
            if arr.shape != (n,):
                raise ValueError(f"{name} has shape {arr.shape}, expected ({n},)")
        if self.A_ub.shape != (self.b_ub.size, n) or self.A_eq.shape != (self.b_eq.size, n):
            raise ValueError("constraint matrix dimensions do not match")
        if self.P is not None and self.P.shape != (n, n):
            raise ValueError("quadratic term has wrong shape")
        finite = [self.c, self.b_ub, self.b_eq, self.A_ub.data, self.A_eq.data]
        if any(not np.all(np.isfinite(a)) for a in finite):
            raise ValueError("program coefficients must be finite")

    @property
    def n(self) -> int:
        return self.c.size

    def var(self, name):
        return self.blocks[name]

    def replace(self, **changes) -> "ConvexProgram":
        return dataclasses.replace(self, **changes)

    def objective(self, x) -> float:
        val = float(self.c @ x) + self.const
        if self.P is not None:
            val += 0.5 * float(x @ (self.P @ x))
        if self.eps:
            val += 0.5 * self.eps * float(x @ x)
        return val

    def to_triplets(self) -> dict:
        """Sparse standard form for cross-checking with an external solver."""
        def trip(M):
            M = sp.coo_matrix(M)
            return {"row": M.row.tolist(), "col": M.col.tolist(), "val": M.data.tolist(),
                    "shape": list(M.shape)}
        return {
            "n": self.n, "c": self.c.tolist(), "const": self.const, "eps": self.eps,
            "lb": [None if not np.isfinite(v) else v for v in self.lb],
            "ub": [None if not np.isfinite(v) else v for v in self.ub],
            "A_ub": trip(self.A_ub), "b_ub": self.b_ub.tolist(),
            "A_eq": trip(self.A_eq), "b_eq": self.b_eq.tolist(),
            "P": trip(self.P) if self.P is not None else None,
        }

    @classmethod
    def from_triplets(cls, d: dict) -> "ConvexProgram":
        def mat(t):
            return sp.csr_matrix((t["val"], (t["row"], t["col"])), shape=tuple(t["shape"]))
        bound = lambda vals, inf: np.array([inf if v is None else v for v in vals], dtype=float)
        return cls(np.asarray(d["c"], dtype=float), mat(d["A_ub"]), np.asarray(d["b_ub"], dtype=float),
                   mat(d["A_eq"]), np.asarray(d["b_eq"], dtype=float),
                   bound(d["lb"], -np.inf), bound(d["ub"], np.inf),
                   P=sp.csc_matrix(mat(d["P"])) if d.get("P") else None,
                   eps=float(d.get("eps", 0.0)), const=float(d.get("const", 0.0)))


class ProgramBuilder:
    """Incremental construction of a :class:`ConvexProgram` from named blocks."""

    def __init__(self):
        self._lb: list[float] = []
        self._ub: list[float] = []
        self._c: list[float] = []
        self.blocks: dict[str, np.ndarray] = {}
        self._ub_rows = ([], [], [], [])  # row, col, val, rhs
        self._eq_rows = ([], [], [], [])
        self._quad = ([], [], [])
        self.ub_tags: dict[str, list[int]] = {}
        self.eq_tags: dict[str, list[int]] = {}
        self.const = 0.0
        self.meta: dict = {}

    @property
    def n(self) -> int:
        return len(self._c)

    def var(self, name: str, shape=(), lb=-np.inf, ub=np.inf, cost=0.0) -> np.ndarray:
        if name in self.blocks:
            raise KeyError(f"variable block {name!r} already exists")
        shape = (int(shape),) if np.isscalar(shape) else tuple(shape)
        size = int(np.prod(shape)) if shape else 1
        start = self.n
        for store, val in ((self._lb, lb), (self._ub, ub), (self._c, cost)):
            store.extend(np.broadcast_to(np.asarray(val, dtype=float), shape).ravel().tolist())
        idx = np.arange(start, start + size).reshape(shape) if shape else np.int64(start)
        self.blocks[name] = idx
        return idx

    def add_cost(self, cols, vals):
        cols = np.asarray(cols).ravel()
        vals = np.broadcast_to(np.asarray(vals, dtype=float).ravel() if np.ndim(vals) else vals, cols.shape)
        for j, v in zip(cols, vals):
            self._c[int(j)] += float(v)

    def add_diag_quad(self, cols, vals):
        """Add ``sum_i vals_i x_i^2``."""
        cols = np.asarray(cols).ravel()
        vals = np.broadcast_to(np.asarray(vals, dtype=float).ravel() if np.ndim(vals) else vals, cols.shape)
        for j, v in zip(cols, vals):
            self.add_quad(j, j, float(v))

    def add_quad(self, i, j, val):
        """Add ``val * x_i * x_j`` to the objective (so ``val x_i^2`` for i == j)."""
        if i == j:
            self._quad[0].append(int(i)); self._quad[1].append(int(i)); self._quad[2].append(2.0 * val)
        else:
            self._quad[0].extend([int(i), int(j)]); self._quad[1].extend([int(j), int(i)])
            self._quad[2].extend([float(val), float(val)])

    def add_square(self, coeffs: dict, offset: float, weight: float):
        """Add ``weight * (coeffs . x + offset)^2``."""
        items = list(coeffs.items())
        for a, (i, ai) in enumerate(items):
            for j, aj in items[a:]:
                self.add_quad(i, j, weight * ai * aj * (1.0 if i == j else 2.0))
            self._c[int(i)] += 2.0 * weight * ai * offset
        self.const += weight * offset * offset

    def _row(self, store, tags, coeffs: dict, rhs: float, tag):
        r = len(store[3])
        for j, v in coeffs.items():
            if v != 0.0:
                store[0].append(r); store[1].append(int(j)); store[2].append(float(v))
        store[3].append(float(rhs))
        if tag is not None:
            tags.setdefault(tag, []).append(r)
        return r

    def le(self, coeffs: dict, rhs: float, tag=None) -> int:
        return self._row(self._ub_rows, self.ub_tags, coeffs, rhs, tag)

    def ge(self, coeffs: dict, rhs: float, tag=None) -> int:
        return self._row(self._ub_rows, self.ub_tags, {j: -v for j, v in coeffs.items()}, -rhs, tag)

    def eq(self, coeffs: dict, rhs: float, tag=None) -> int:
        return self._row(self._eq_rows, self.eq_tags, coeffs, rhs, tag)

    def le_block(self, cols, vals, rhs, tag=None):
        """Append rows ``sum_k vals[i, k] x[cols[i, k]] <= rhs[i]`` in one go."""
        self._block(self._ub_rows, self.ub_tags, cols, vals, rhs, tag)

    def eq_block(self, cols, vals, rhs, tag=None):
        self._block(self._eq_rows, self.eq_tags, cols, vals, rhs, tag)

    def _block(self, store, tags, cols, vals, rhs, tag):
        cols = np.asarray(cols, dtype=np.int64)
        vals = np.broadcast_to(np.asarray(vals, dtype=float), cols.shape)
        rhs = np.asarray(rhs, dtype=float).ravel()
        m = rhs.size
        r0 = len(store[3])
        rows = np.repeat(np.arange(r0, r0 + m), cols.shape[1])
        keep = vals.ravel() != 0.0
        store[0].extend(rows[keep].tolist())
        store[1].extend(cols.ravel()[keep].tolist())
        store[2].extend(vals.ravel()[keep].tolist())
        store[3].extend(rhs.tolist())
        if tag is not None:
            tags.setdefault(tag, []).extend(range(r0, r0 + m))

    def fix(self, col, value):
        self._lb[int(col)] = self._ub[int(col)] = float(value)

    def build(self) -> ConvexProgram:
        n = self.n
        def mat(store):
            m = len(store[3])
            return sp.csr_matrix((store[2], (store[0], store[1])), shape=(m, n)), np.asarray(store[3], dtype=float)
        A_ub, b_ub = mat(self._ub_rows)
        A_eq, b_eq = mat(self._eq_rows)
        P = None
        if self._quad[2]:
            P = sp.csc_matrix((self._quad[2], (self._quad[0], self._quad[1])), shape=(n, n))
        return ConvexProgram(np.asarray(self._c, dtype=float), A_ub, b_ub, A_eq, b_eq,
                             np.asarray(self._lb, dtype=float), np.asarray(self._ub, dtype=float),
                             P=P, const=self.const, blocks=dict(self.blocks),
                             ub_tags={k: np.asarray(v) for k, v in self.ub_tags.items()},
                             eq_tags={k: np.asarray(v) for k, v in self.eq_tags.items()},
                             meta=dict(self.meta))


@dataclass(eq=False)
class Solution:
    status: str
    x: np.ndarray | None = None
    y_ub: np.ndarray | None = None
    y_eq: np.ndarray | None = None
    y_lb: np.ndarray | None = None
    y_ubnd: np.ndarray | None = None
    objective: float = np.nan
    kkt: dict = field(default_factory=dict)
    program: ConvexProgram | None = field(default=None, repr=False)

    @property
    def ok(self) -> bool:
        return self.status == OPTIMAL

    def __getitem__(self, name):
        return self.x[self.program.blocks[name]]


def kkt_residuals(prog: ConvexProgram, x, y_ub, y_eq, y_lb, y_ubnd) -> dict:
    """Relative stationarity, primal feasibility, complementarity and duality gap."""
    Qx = prog.eps * x
    if prog.P is not None:
        Qx = Qx + prog.P @ x
    grad = prog.c + Qx
    atY = prog.A_ub.T @ y_ub + prog.A_eq.T @ y_eq
    stat = grad + atY - y_lb + y_ubnd
    scale_d = 1.0 + max(np.abs(prog.c).max(initial=0), np.abs(Qx).max(initial=0), np.abs(atY).max(initial=0))

    r_ub = prog.A_ub @ x - prog.b_ub
    r_eq = prog.A_eq @ x - prog.b_eq
    lo_fin, hi_fin = np.isfinite(prog.lb), np.isfinite(prog.ub)
    r_lb = np.where(lo_fin, prog.lb - x, 0.0)
    r_hi = np.where(hi_fin, x - prog.ub, 0.0)
    viol = max(np.maximum(r_ub, 0).max(initial=0), np.abs(r_eq).max(initial=0),
               np.maximum(r_lb, 0).max(initial=0), np.maximum(r_hi, 0).max(initial=0))
    scale_p = 1.0 + max(np.abs(prog.b_ub).max(initial=0), np.abs(prog.b_eq).max(initial=0),
                        np.abs(x).max(initial=0))

    pobj = prog.objective(x)
    comp = max(np.abs(y_ub * r_ub).max(initial=0),
               np.abs(np.where(lo_fin, y_lb * r_lb, 0.0)).max(initial=0),
               np.abs(np.where(hi_fin, y_ubnd * r_hi, 0.0)).max(initial=0))
    dobj = (-0.5 * float(x @ Qx) - prog.b_ub @ y_ub - prog.b_eq @ y_eq
            + np.where(lo_fin, prog.lb, 0.0) @ y_lb - np.where(hi_fin, prog.ub, 0.0) @ y_ubnd + prog.const)
    scale_o = 1.0 + abs(pobj)
    dual_sign = min(y_ub.min(initial=0), y_lb.min(initial=0), y_ubnd.min(initial=0))
    return {
        "stationarity": float(np.abs(stat).max(initial=0) / scale_d),
        "primal": float(viol / scale_p),
        "dual_sign": float(max(-dual_sign, 0.0) / scale_d),
        "complementarity": float(comp / scale_o),
        "gap": float(abs(pobj - dobj) / scale_o),
        "primal_objective": float(pobj),
        "dual_objective": float(dobj),
    }


_SETTINGS = dict(verbose=False, tol_gap_abs=1e-10, tol_gap_rel=1e-10, tol_feas=1e-10,
                 tol_ktratio=1e-8, max_iter=300, equilibrate_enable=True)


def _polish(prog: ConvexProgram, x, y_ub, y_lb, y_ubnd, fixed):
    """Vertex recovery for an LP: solve the active rows exactly.  None if it would hurt."""
    if prog.P is not None or prog.eps or prog.n > 2000:
        return None
    thr = 1e-7 * max(1.0, np.abs(y_ub).max(initial=0.0), np.abs(y_lb).max(initial=0.0),
                     np.abs(y_ubnd).max(initial=0.0))
    I = sp.identity(prog.n, format="csr")
    lo = np.flatnonzero((y_lb > thr) & np.isfinite(prog.lb))
    hi = np.flatnonzero((y_ubnd > thr) & np.isfinite(prog.ub))
    rows = np.flatnonzero(y_ub > thr)
    A = sp.vstack([prog.A_eq, prog.A_ub[rows], I[fixed], I[lo], I[hi]]).toarray()
    b = np.concatenate([prog.b_eq, prog.b_ub[rows], prog.lb[fixed], prog.lb[lo], prog.ub[hi]])
    if A.shape[0] == 0:
        return None
    dx = np.linalg.lstsq(A, b - A @ x, rcond=None)[0]
    xp = x + dx
    xp[fixed] = prog.lb[fixed]
    viol = lambda v: max(np.max(prog.A_ub @ v - prog.b_ub, initial=0.0),
                         np.max(np.abs(prog.A_eq @ v - prog.b_eq), initial=0.0),
                         np.max(prog.lb - v, initial=0.0), np.max(v - prog.ub, initial=0.0))
    return xp if viol(xp) <= max(viol(x), 1e-12) else None


def solve(prog: ConvexProgram, tol: float = 1e-7, polish: bool = False) -> Solution:
    """Solve and certify.  Status is ``optimal`` only if every KKT residual <= tol.

    ``polish`` re-solves the active rows of an LP exactly, which removes the
    interior point method's residual offset from a vertex optimum."""
    n = prog.n
    fixed = np.flatnonzero(prog.lb == prog.ub)
    free = np.ones(n, dtype=bool)
    free[fixed] = False
    lo_fin = np.flatnonzero(np.isfinite(prog.lb) & free)
    hi_fin = np.flatnonzero(np.isfinite(prog.ub) & free)
    I = sp.identity(n, format="csr")
    # fixed variables go to the zero cone; an interior point method dislikes empty boxes
    A = sp.vstack([prog.A_eq, I[fixed], prog.A_ub, I[hi_fin], -I[lo_fin]], format="csc")
    b = np.concatenate([prog.b_eq, prog.lb[fixed], prog.b_ub, prog.ub[hi_fin], -prog.lb[lo_fin]])
    m_eq = prog.b_eq.size + fixed.size
    cones = []
    if m_eq:
        cones.append(clarabel.ZeroConeT(m_eq))
    if b.size - m_eq:
        cones.append(clarabel.NonnegativeConeT(b.size - m_eq))
    P = prog.P if prog.P is not None else sp.csc_matrix((n, n))
    if prog.eps:
        P = P + prog.eps * sp.identity(n, format="csc")
    P = sp.triu(P, format="csc")
    settings = clarabel.DefaultSettings()
    for k, v in _SETTINGS.items():
        setattr(settings, k, v)
    solver = clarabel.DefaultSolver(P, prog.c, A, b, cones, settings)
    res = solver.solve()
    status = str(res.status)
    if "PrimalInfeasible" in status:
        z = np.array(res.z)
        cert = {"eq": z[:prog.b_eq.size], "ub": z[m_eq:m_eq + prog.b_ub.size],
                "bounds": float(np.abs(z[prog.b_eq.size:m_eq]).sum() + np.abs(z[m_eq + prog.b_ub.size:]).sum())}
        return Solution(INFEASIBLE, program=prog, kkt={"backend_status": status, "certificate": cert})
    if "DualInfeasible" in status:
        return Solution(UNBOUNDED, program=prog, kkt={"backend_status": status})

    x = np.array(res.x)
    z = np.array(res.z)
    x[fixed] = prog.lb[fixed]
    m0 = prog.b_eq.size
    y_eq = z[:m0]
    y_fix = z[m0:m_eq]
    y_ub = z[m_eq:m_eq + prog.b_ub.size]
    off = m_eq + prog.b_ub.size
    y_ubnd = np.zeros(n)
    y_ubnd[hi_fin] = z[off:off + hi_fin.size]
    y_lb = np.zeros(n)
    y_lb[lo_fin] = z[off + hi_fin.size:]
    y_ubnd[fixed] = np.maximum(y_fix, 0.0)
    y_lb[fixed] = np.maximum(-y_fix, 0.0)
    kkt = kkt_residuals(prog, x, y_ub, y_eq, y_lb, y_ubnd)
    worst = max(kkt["stationarity"], kkt["primal"], kkt["dual_sign"], kkt["complementarity"], kkt["gap"])
    if polish:
        xp = _polish(prog, x, y_ub, y_lb, y_ubnd, fixed)
        if xp is not None:
            kp = kkt_residuals(prog, xp, y_ub, y_eq, y_lb, y_ubnd)
            wp = max(kp["stationarity"], kp["primal"], kp["dual_sign"], kp["complementarity"], kp["gap"])
            if wp <= max(worst, tol):
                x, kkt, worst = xp, kp, wp
                kkt["polished"] = True
    kkt["backend_status"] = status
    state = OPTIMAL if worst <= tol else NUMERICAL_ERROR
    return Solution(state, x, y_ub, y_eq, y_lb, y_ubnd, prog.objective(x), kkt, prog)


def solve_or_raise(prog: ConvexProgram, tol: float = 1e-7, what: str = "program") -> Solution:
    sol = solve(prog, tol)
    if not sol.ok:
        raise SolveError(f"{what}: {sol.status}", sol)
    return sol


@dataclass(eq=False)
class DiffSolution:
    solution: Solution
    jacobian: np.ndarray  # d x* / d lambda_hat, shape (n, len(price_cols))
    active_ub: np.ndarray
    active_bounds: np.ndarray
    degenerate: bool


def infeasible_families(sol: Solution, rel: float = 1e-6) -> list[str]:
    """Constraint tags carrying the infeasibility certificate, heaviest first.

    Tags are reported without their per-entity prefix (``a0.``).  Variable
    bounds appear as ``"bounds"``.
    """
    cert = (sol.kkt or {}).get("certificate")
    if cert is None or sol.program is None:
        return []
    weights: dict[str, float] = {}
    for kind, tags in (("eq", sol.program.eq_tags), ("ub", sol.program.ub_tags)):
        z = np.abs(cert[kind])
        for tag, rows in tags.items():
            name = tag.split(".", 1)[1] if "." in tag else tag
            weights[name] = weights.get(name, 0.0) + float(z[np.asarray(rows, dtype=int)].sum())
    weights["bounds"] = cert["bounds"]
    top = max(weights.values(), default=0.0)
    return [k for k, v in sorted(weights.items(), key=lambda kv: -kv[1]) if top > 0 and v > rel * top]


def _drop_rows(prog: ConvexProgram, name: str) -> ConvexProgram:
    def keep(tags, m):
        mask = np.ones(m, dtype=bool)
        for tag, rows in tags.items():
            if (tag.split(".", 1)[1] if "." in tag else tag) == name:
                mask[np.asarray(rows, dtype=int)] = False
        return mask
    ku = keep(prog.ub_tags, prog.b_ub.size)
    ke = keep(prog.eq_tags, prog.b_eq.size)
    return prog.replace(A_ub=prog.A_ub[ku], b_ub=prog.b_ub[ku], A_eq=prog.A_eq[ke], b_eq=prog.b_eq[ke],
                        ub_tags={}, eq_tags={})


def diagnose_infeasibility(sol: Solution, tol: float = 1e-6, skip=()) -> list[str]:
    """Constraint families whose removal alone makes the program feasible.

    Interior point certificates spread weight over many rows, so the families
    are tried in certificate order and only those that explain the
    infeasibility are returned.  Families in ``skip`` (definitional identities)
    are not tried.  Falls back to :func:`infeasible_families` when no single
    family explains it.
    """
    fam = infeasible_families(sol)
    if sol.program is None:
        return fam
    culprits = []
    for name in fam:
        if name == "bounds" or name in skip:
            continue
        if solve(_drop_rows(sol.program, name), tol).status != INFEASIBLE:
            culprits.append(name)
    return culprits or fam


def priced_program(prog: ConvexProgram, price_cols, lam_hat, eps: float | None = None) -> ConvexProgram:
    """Copy of ``prog`` with ``-lam_hat . x[price_cols]`` added to the objective."""
    c = prog.c.copy()
    np.subtract.at(c, np.asarray(price_cols), np.asarray(lam_hat, dtype=float))
    return prog.replace(c=c, eps=prog.eps if eps is None else eps)


def solve_differentiable(prog: ConvexProgram, price_cols, lam_hat, eps: float | None = None,
                         tol: float = 1e-7, dual_threshold: float = 1e-8) -> DiffSolution:
    """Solve ``min c.x - lam_hat . x[price_cols] + (eps/2)|x|^2`` and differentiate.

    The Jacobian comes from the KKT system restricted to the active set: rows
    whose multiplier exceeds ``dual_threshold`` (weakly active rows are left out,
    i.e. the smaller active set wins ties).  Rank-deficient active sets are
    solved in the least-squares sense and flagged ``degenerate``.
    """
    eps = prog.eps if eps is None else eps
    if eps <= 0:
        raise ValueError("differentiable solves need eps > 0")
    p = priced_program(prog, price_cols, lam_hat, eps)
    sol = solve_or_raise(p, tol, "differentiable solve")
    price_cols = np.asarray(price_cols)
    n = p.n
    act_ub = np.flatnonzero(sol.y_ub > dual_threshold)
    act_b = np.flatnonzero((sol.y_lb > dual_threshold) | (sol.y_ubnd > dual_threshold) | (p.lb == p.ub))
    G = sp.vstack([p.A_eq, p.A_ub[act_ub], sp.identity(n, format="csr")[act_b]], format="csc")
    Q = eps * sp.identity(n, format="csc")
    if p.P is not None:
        Q = Q + sp.csc_matrix(p.P)
    m = G.shape[0]
    rhs = np.zeros((n + m, price_cols.size))
    rhs[price_cols, np.arange(price_cols.size)] = 1.0
    # the primal block of the solution is unique (Q is positive definite on the
    # null space of G) even when G has dependent rows; those only make the
    # duals ambiguous, which a tiny dual-block shift resolves
    degenerate = False
    K = sp.bmat([[Q, G.T], [G, None]], format="csc")
    try:
        sol_k = spla.splu(K).solve(rhs)
        if not np.all(np.isfinite(sol_k)) or np.abs(K @ sol_k - rhs).max() > 1e-8:
            raise RuntimeError("inaccurate factorization")
    except RuntimeError:
        degenerate = True
        delta = 1e-10 * max(1.0, eps)
        Kr = sp.bmat([[Q, G.T], [G, -delta * sp.identity(m, format="csc")]], format="csc")
        sol_k = spla.splu(Kr).solve(rhs)
    return DiffSolution(sol, sol_k[:n], act_ub, act_b, degenerate)
