"""Sampled certification of contraction and control-contraction inequalities,
and contraction metrics built from verified Koopman liftings.

Two metric representations are supported:

* closed form: a symmetric matrix of expressions ``M(x[, t])``;
* lifted form: ``M(x) = Phi(x)^T P Phi(x)`` for a lifting ``phi`` with Jacobian ``Phi``.

The derivative of ``M`` along the flow is exact in both cases. For lifted
metrics it is taken either from the identity ``dPhi/dt = A Phi - Phi F``
(``mdot="identity"``, valid on verified liftings) or from symbolic second
derivatives of ``phi`` (``mdot="symbolic"``).
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional

import numpy as np

from . import expr as ex
from .dynamics import SystemModel, integrate
from .errors import DimensionError, ExprSyntaxError, PreconditionError
from .grid import SampleBox, evaluate_chunked, first_argmax
from .koopman import Lifting, load_lifting, pde_residual, DEFAULT_TOL
from .linalg import lyapunov_solve, sym
from .textfmt import format_matrix, parse_bool, parse_matrix, parse_pairs

DEFAULT_EPS = 1e-9
# pointwise allowance for rounding in the evaluated matrix inequality, relative
# to the magnitude of its terms
ROUNDOFF = 64 * np.finfo(float).eps


@dataclass(frozen=True, eq=False)
class MetricField:
    n: int
    exprs: Optional[tuple] = None
    lifting: Optional[Lifting] = None
    P: Optional[np.ndarray] = None
    rho: float = 0.0
    time_varying: bool = False

    def __post_init__(self):
        if (self.exprs is None) == (self.lifting is None):
            raise ValueError("give either closed-form entries or a lifting with P")
        if self.exprs is not None:
            rows = tuple(tuple(ex.as_expr(e) for e in row) for row in self.exprs)
            if len(rows) != self.n or any(len(r) != self.n for r in rows):
                raise DimensionError(f"metric must be {self.n}x{self.n}")
            for i in range(self.n):
                for j in range(i):
                    if rows[i][j] != rows[j][i]:
                        raise ValueError(f"metric is not symmetric: M{i + 1}{j + 1} != M{j + 1}{i + 1}")
            object.__setattr__(self, "exprs", rows)
        else:
            if self.lifting.n != self.n:
                raise DimensionError("lifting and metric dimensions differ")
            P = sym(np.atleast_2d(np.asarray(self.P, dtype=float)))
            if P.shape != (self.lifting.N, self.lifting.N):
                raise DimensionError(f"P must be {self.lifting.N}x{self.lifting.N}")
            object.__setattr__(self, "P", P)
            object.__setattr__(self, "time_varying", self.lifting.time_varying)
        if self.rho < 0:
            raise ValueError("rho must be non-negative")

    @classmethod
    def closed_form(cls, entries, rho: float = 0.0, time_varying: bool = False) -> "MetricField":
        n = len(entries)
        allowed = ex.allowed_symbols(n, 0, time_varying)
        rows = tuple(tuple(ex.parse_expr(e, allowed) if isinstance(e, str) else ex.as_expr(e) for e in row)
                     for row in entries)
        return cls(n, exprs=rows, rho=rho, time_varying=time_varying)

    @classmethod
    def from_lifting(cls, L: Lifting, P, rho: float = 0.0) -> "MetricField":
        return cls(L.n, lifting=L, P=P, rho=rho)

    @property
    def lifted(self) -> bool:
        return self.lifting is not None

    @cached_property
    def _M(self):
        return ex.compile_matrix(self.exprs, self.n)

    @cached_property
    def _dM(self):
        names = ex.state_names(self.n) + (["t"] if self.time_varying else [])
        rows = [[ex.diff(e, v) for e in row for v in names] for row in self.exprs]
        fn = ex.compile_matrix(rows, self.n)
        k = len(names)

        def f(x, t=0.0):
            v = fn(x, t)
            return v.reshape(v.shape[:-2] + (self.n, self.n, k))

        return f

    def __call__(self, x, t=0.0) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.lifted:
            Phi = self.lifting.jacobian(x, t)
            return sym(np.swapaxes(Phi, -1, -2) @ self.P @ Phi)
        return self._M(x, t)

    def flow_derivative(self, x, t, fx, F, mdot: str = "identity") -> np.ndarray:
        """``dM/dt`` along ``x' = f``: ``sum_k dM/dx_k f_k (+ dM/dt)``."""
        if not self.lifted:
            d = self._dM(x, t)
            out = np.einsum("...ijk,...k->...ij", d[..., : self.n], fx)
            if self.time_varying:
                out = out + d[..., self.n]
            return out
        L = self.lifting
        Phi = L.jacobian(x, t)
        if mdot == "identity":
            Phidot = L.A @ Phi - Phi @ F
        elif mdot == "symbolic":
            Phidot = np.einsum("...ijk,...k->...ij", L.jacobian_derivatives(x, t), fx)
            if L.time_varying:
                Phidot = Phidot + L.jacobian_time_derivative(x, t)
        else:
            raise ValueError(f"unknown mdot mode {mdot!r}")
        X = np.swapaxes(Phidot, -1, -2) @ self.P @ Phi
        return X + np.swapaxes(X, -1, -2)

    def to_text(self, lifting_path: str | None = None) -> str:
        lines = [f"n = {self.n}", f"rho = {self.rho!r}"]
        if self.lifted:
            lines.append(f"lifting = {lifting_path or 'lifting.txt'}")
            lines.append(f"P = {format_matrix(self.P)}")
        else:
            if self.time_varying:
                lines.append("time_varying = true")
            for i in range(self.n):
                for j in range(i, self.n):
                    lines.append(f"M{i + 1}{j + 1} = {self.exprs[i][j]}")
        return "\n".join(lines) + "\n"


def parse_metric(source: str, base_dir: str = ".") -> MetricField:
    """Metric file: closed-form entries ``Mij`` (upper triangle suffices) or
    ``lifting = <path>`` with ``P = <matrix>`` / ``P = lyapunov``."""
    pairs = parse_pairs(source)
    n = int(pairs.pop("n"))
    rho = float(pairs.pop("rho", "0"))
    tv = parse_bool(pairs.pop("time_varying", "false"))
    if "lifting" in pairs:
        L = load_lifting(os.path.join(base_dir, pairs.pop("lifting")))
        P_text = pairs.pop("P", "lyapunov")
        if pairs:
            raise ExprSyntaxError(f"unknown keys {sorted(pairs)}", source, 0)
        P = lyapunov_solve(L.A) if P_text.strip() == "lyapunov" else parse_matrix(P_text, L.N, L.N, "P")
        return MetricField.from_lifting(L, P, rho)
    entries = [[None] * n for _ in range(n)]
    for key, value in pairs.items():
        if not (key.startswith("M") and len(key) == 3 and key[1:].isdigit()):
            raise ExprSyntaxError(f"unknown key {key!r}", source, source.find(key))
        i, j = int(key[1]) - 1, int(key[2]) - 1
        if not (0 <= i < n and 0 <= j < n):
            raise DimensionError(f"{key} outside a {n}x{n} metric")
        e = ex.parse_expr(value, ex.allowed_symbols(n, 0, tv))
        entries[i][j] = e
    for i in range(n):
        for j in range(n):
            if entries[i][j] is None:
                entries[i][j] = entries[j][i]
            if entries[i][j] is None:
                raise DimensionError(f"metric entry M{i + 1}{j + 1} missing")
    return MetricField.closed_form(entries, rho, tv)


def load_metric(path) -> MetricField:
    with open(path) as fh:
        return parse_metric(fh.read(), os.path.dirname(os.path.abspath(path)))


# ---------------------------------------------------------------------------
# reports


@dataclass
class LmiReport:
    """Outcome of a sampled matrix-inequality check.

    ``min_margin`` is the largest eigenvalue of the inequality's left-hand side
    found on the grid (the worst case); the check needs it ``<= -eps``.
    ``a1``/``a2`` are the extreme eigenvalues of ``M`` on the grid.
    """

    min_margin: float
    worst_point: list
    a1: float
    a2: float
    rho: float
    eps: float
    verdict: bool
    n_points: int
    roundoff: float = 0.0
    margins: Optional[np.ndarray] = field(default=None, repr=False)
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = {
            "min_margin": float(self.min_margin),
            "worst_point": [float(v) for v in self.worst_point],
            "a1": float(self.a1),
            "a2": float(self.a2),
            "rho": float(self.rho),
            "eps": float(self.eps),
            "roundoff_allowance": float(self.roundoff),
            "n_points": int(self.n_points),
            "uniform_bounds": "box-only",
            "verdict": "pass" if self.verdict else "fail",
        }
        d.update(self.extra)
        return d


def _scale(*mats):
    return sum(np.abs(m).max(axis=(-2, -1)) for m in mats)


def _lmi_report(top, allow, mins, maxs, coords, rho, eps, keep, extra):
    i = first_argmax(top)
    verdict = bool(np.all(top <= -eps + allow) and mins.min() > 0)
    return LmiReport(float(top[i]), list(coords[i]), float(mins.min()), float(maxs.max()), float(rho),
                     float(eps), verdict, len(top), float(allow.max()), top if keep else None, extra)


def _space_time(box, n, probes, seed, with_time):
    if box.dim != n:
        raise DimensionError(f"box has dimension {box.dim}, system has {n}")
    pts = box.points()
    extra = {}
    if probes:
        pts = np.vstack([pts, box.random_points(probes, seed)])
        extra = {"probes": int(probes), "seed": int(seed)}
    if not with_time:
        return pts, np.zeros(len(pts)), pts, extra
    ts = box.times()
    X = np.repeat(pts, len(ts), axis=0)
    T = np.tile(ts, len(pts))
    return X, T, np.column_stack([X, T]), extra


def contraction_check(sys: SystemModel, M: MetricField, box: SampleBox, rho: float | None = None,
                      eps: float = DEFAULT_EPS, *, mdot: str = "identity", threads: int = 1,
                      probes: int = 0, seed: int = 0, keep_table: bool = False) -> LmiReport:
    """Largest eigenvalue of ``dM/dt + F^T M + M F + rho M`` over the grid; pass iff ``<= -eps``
    everywhere (up to rounding) and ``M`` stays positive definite on the grid."""
    if sys.kind == "controlled":
        raise PreconditionError("use ccm_check for controlled systems")
    if sys.n != M.n:
        raise DimensionError("system and metric dimensions differ")
    rho = M.rho if rho is None else rho
    with_time = sys.kind == "time-varying" or M.time_varying
    if with_time and box.time_interval is None:
        raise PreconditionError("time-varying contraction check needs a box with a time interval")
    X, T, coords, extra = _space_time(box, sys.n, probes, seed, with_time)

    def chunk(x, t):
        fx = sys.rhs(x, t)
        F = sys.jac_x(x, t)
        Mx = M(x, t)
        Md = M.flow_derivative(x, t, fx, F, mdot)
        FtM = np.swapaxes(F, -1, -2) @ Mx
        lhs = sym(Md + FtM + np.swapaxes(FtM, -1, -2) + rho * Mx)
        evM = np.linalg.eigvalsh(Mx)
        allow = ROUNDOFF * _scale(Md, FtM, FtM, rho * Mx)
        return np.linalg.eigvalsh(lhs)[..., -1], allow, evM[..., 0], evM[..., -1]

    top, allow, mins, maxs = evaluate_chunked(chunk, X, T, threads=threads)
    return _lmi_report(top, allow, mins, maxs, coords, rho, eps, keep_table, extra)


def _gain_field(K, n, m):
    if callable(K):
        return K
    rows = [[ex.as_expr(e) for e in row] for row in np.atleast_2d(np.asarray(K, dtype=object))]
    if len(rows) != m or any(len(r) != n for r in rows):
        raise DimensionError(f"gain must be {m}x{n}")
    fn = ex.compile_matrix(rows, n)
    return lambda x, t=0.0: fn(x, t)


def ccm_terms(sys, M, K, x, u, t=0.0, mdot="identity"):
    """Left-hand side of the strong CCM inequality at state/input samples, and its rounding scale."""
    fx = sys.rhs(x, t, u)
    F = sys.jac_x(x, t, u)
    G = sys.jac_u(x, t, u)
    Mx = M(x, t)
    Md = M.flow_derivative(x, t, fx, F, mdot)
    MF = Mx @ F
    MGK = Mx @ G @ K(x, t)
    lhs = sym(Md + MF + np.swapaxes(MF, -1, -2) + MGK + np.swapaxes(MGK, -1, -2))
    return lhs, Mx, ROUNDOFF * _scale(Md, MF, MF, MGK, MGK)


def ccm_check(sys: SystemModel, M: MetricField, K, box: SampleBox, input_box: SampleBox,
              eps: float = DEFAULT_EPS, *, mdot: str = "identity", threads: int = 1, probes: int = 0,
              seed: int = 0, keep_table: bool = False) -> LmiReport:
    """Largest eigenvalue of ``dM/dt + M F + F^T M + M G K + (G K)^T M`` over state x input grid.

    ``K`` is an ``m x n`` matrix of expressions/numbers or a callable ``K(x, t)``.
    """
    if sys.kind != "controlled":
        raise PreconditionError("ccm_check needs a controlled system")
    if input_box.dim != sys.m:
        raise DimensionError("input box dimension differs from the input dimension")
    Kf = _gain_field(K, sys.n, sys.m)
    pts, _, _, extra = _space_time(box, sys.n, probes, seed, False)
    us = input_box.points()
    X = np.repeat(pts, len(us), axis=0)
    U = np.tile(us, (len(pts), 1))

    def chunk(x, u):
        lhs, Mx, allow = ccm_terms(sys, M, Kf, x, u, 0.0, mdot)
        evM = np.linalg.eigvalsh(Mx)
        return np.linalg.eigvalsh(lhs)[..., -1], allow, evM[..., 0], evM[..., -1]

    top, allow, mins, maxs = evaluate_chunked(chunk, X, U, threads=threads)
    return _lmi_report(top, allow, mins, maxs, np.column_stack([X, U]), 0.0, eps, keep_table, extra)


# ---------------------------------------------------------------------------
# metrics from liftings


def metric_from_lifting(sys: SystemModel, L: Lifting, box: SampleBox, *, residual_tol: float = DEFAULT_TOL,
                        eps: float = 0.0, mdot: str = "identity", threads: int = 1) -> tuple:
    """Contraction metric ``Phi^T P Phi`` with ``A^T P + P A = -I`` and rate ``1/lambda_max(P)``.

    The lifting must satisfy its PDE on the box (residual ``<= residual_tol``);
    rank deficiency of ``Phi`` is not a precondition and shows up as ``a1 = 0``.
    Returns ``(MetricField, LmiReport)``.
    """
    pre = pde_residual(sys, L, box, tol=residual_tol, threads=threads)
    if pre.max_abs_residual > residual_tol:
        raise PreconditionError(
            f"lifting residual {pre.max_abs_residual:.3g} exceeds {residual_tol:.3g} at {pre.argmax_point}")
    P = lyapunov_solve(L.A)
    rho = 1.0 / float(np.linalg.eigvalsh(P)[-1])
    metric = MetricField.from_lifting(L, P, rho)
    report = contraction_check(sys, metric, box, rho, eps, mdot=mdot, threads=threads)
    report.extra.update({"lifting_residual": pre.max_abs_residual, "rank_margin": pre.rank_margin})
    return metric, report


def chain_identity_error(sys: SystemModel, metric: MetricField, points, t=0.0) -> float:
    """Max over points of ``|dM/dt + F^T M + M F + Phi^T Phi|`` with ``dM/dt`` from
    symbolic second derivatives of the lifting (independent of the lifted matrix)."""
    x = np.asarray(points, dtype=float)
    F = sys.jac_x(x, t)
    Md = metric.flow_derivative(x, t, sys.rhs(x, t), F, mdot="symbolic")
    Mx = metric(x, t)
    FtM = np.swapaxes(F, -1, -2) @ Mx
    Phi = metric.lifting.jacobian(x, t)
    lhs = Md + FtM + np.swapaxes(FtM, -1, -2)
    return float(np.abs(lhs + np.swapaxes(Phi, -1, -2) @ Phi).max())


# ---------------------------------------------------------------------------
# trajectory-level check


@dataclass
class IncrementalReport:
    k0: float
    finite: bool
    empirical_rate: float
    rho: float
    bound_holds: bool

    def to_dict(self):
        return {"k0": float(self.k0), "finite": bool(self.finite), "empirical_rate": float(self.empirical_rate),
                "rho": float(self.rho), "bound_holds": bool(self.bound_holds)}


def incremental_convergence_test(sys: SystemModel, pairs, rho: float, horizon: float = 10.0,
                                 dt: float = 1e-3, rate_tol: float = 1e-6) -> IncrementalReport:
    """Fit the smallest ``k0`` with ``|X(a,t) - X(b,t)| <= k0 |a - b| exp(-rho t)`` on the time grid.

    Also reports the slowest observed Euclidean decay exponent (over the second
    half of the horizon); ``bound_holds`` requires it to be at least ``rho``.
    """
    if sys.kind == "controlled":
        raise PreconditionError("incremental test needs an uncontrolled system")
    pairs = np.asarray(pairs, dtype=float).reshape(-1, 2, sys.n)
    traj = integrate(sys, pairs.reshape(-1, sys.n), horizon=horizon, dt=dt)
    S = traj.states.reshape(len(traj.states), -1, 2, sys.n)
    d = np.linalg.norm(S[:, :, 0] - S[:, :, 1], axis=-1)
    d0 = d[0]
    live = d0 > 0
    if not np.any(live):
        return IncrementalReport(0.0, True, np.inf, rho, True)
    t = traj.times
    ratio = d[:, live] * np.exp(rho * t)[:, None] / d0[live]
    k0 = float(ratio.max())
    half = len(t) // 2
    rates = []
    for j in np.flatnonzero(live):
        a, b = d[half, j], d[-1, j]
        if a > 0 and b > 0 and t[-1] > t[half]:
            rates.append(-(np.log(b) - np.log(a)) / (t[-1] - t[half]))
        else:
            rates.append(np.inf)
    rate = float(min(rates))
    finite = bool(np.isfinite(k0))
    return IncrementalReport(k0, finite, rate, rho, finite and rate >= rho - rate_tol)
