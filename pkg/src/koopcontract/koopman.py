"""Finite Koopman liftings: residual checks of the lifting PDEs, eigenfunction
checks along flows, lifted simulation, EDMD fitting and the lifted pseudometric.

A lifting file uses the key-value text format::

    n = 2
    N = 3
    phi1 = x1
    phi2 = x2
    phi3 = x1^2
    A = [[-1, 0, 0], [0, -2, 2], [0, 0, -2]]
    B = [[0], [1], [0]]        # optional, controlled systems
    time_varying = false       # set true when phi uses t

Matrices may also be given as flat row-major lists.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.linalg

from . import expr as ex
from .dynamics import SystemModel, Trajectory, integrate, rk4_steps, step_count
from .errors import (DimensionError, ExprSyntaxError, MatrixLogError, PreconditionError,
                     RankDeficientError)
from .grid import SampleBox, evaluate_chunked, first_argmax
from .textfmt import format_matrix, parse_bool, parse_matrix, parse_pairs

DEFAULT_TOL = 1e-8
DEFAULT_RANK_TOL = 1e-6


@dataclass(frozen=True, eq=False)
class Lifting:
    """Observables ``phi`` (N expressions in x1..xn and optionally t) with lifted matrices."""

    n: int
    phi: tuple
    A: np.ndarray
    B: Optional[np.ndarray] = None
    time_varying: bool = False

    def __post_init__(self):
        object.__setattr__(self, "phi", tuple(ex.as_expr(p) for p in self.phi))
        A = np.array(self.A, dtype=float, ndmin=2)
        object.__setattr__(self, "A", A)
        N = len(self.phi)
        if N < self.n:
            raise DimensionError(f"lifting dimension N={N} is smaller than the state dimension n={self.n}")
        if A.shape != (N, N):
            raise DimensionError(f"A has shape {A.shape}, expected ({N}, {N})")
        if not np.all(np.isfinite(A)):
            raise ValueError("A has non-finite entries")
        if self.B is not None:
            B = np.array(self.B, dtype=float)
            if B.ndim == 1:
                B = B[:, None]
            if B.shape[0] != N:
                raise DimensionError(f"B has {B.shape[0]} rows, expected {N}")
            object.__setattr__(self, "B", B)
        allowed = ex.allowed_symbols(self.n, 0, time=self.time_varying)
        for i, p in enumerate(self.phi):
            extra = ex.free_symbols(p) - allowed
            if extra:
                raise ex.UnknownSymbolError(f"phi{i + 1} uses {sorted(extra)}")

    @property
    def N(self) -> int:
        return len(self.phi)

    @property
    def m(self) -> int:
        return 0 if self.B is None else self.B.shape[1]

    @cached_property
    def _phi(self):
        return ex.compile_exprs(self.phi, self.n)

    @cached_property
    def jac_exprs(self):
        return ex.jacobian(self.phi, ex.state_names(self.n))

    @cached_property
    def _jac(self):
        return ex.compile_matrix(self.jac_exprs, self.n)

    @cached_property
    def _dphi_dt(self):
        return ex.compile_exprs([ex.diff(p, "t") for p in self.phi], self.n)

    @cached_property
    def _hess(self):
        # d Phi / d x_k, stacked along a trailing axis: shape (..., N, n, n)
        names = ex.state_names(self.n)
        rows = [[ex.diff(d, k) for d in row for k in names] for row in self.jac_exprs]
        flat = ex.compile_matrix(rows, self.n)

        def fn(x, t=0.0):
            v = flat(x, t)
            return v.reshape(v.shape[:-2] + (self.N, self.n, self.n))

        return fn

    @cached_property
    def _jac_t(self):
        return ex.compile_matrix([[ex.diff(d, "t") for d in row] for row in self.jac_exprs], self.n)

    def __call__(self, x, t=0.0) -> np.ndarray:
        return self._phi(x, t)

    def jacobian(self, x, t=0.0) -> np.ndarray:
        return self._jac(x, t)

    def time_derivative(self, x, t=0.0) -> np.ndarray:
        return self._dphi_dt(x, t)

    def jacobian_derivatives(self, x, t=0.0) -> np.ndarray:
        """Second derivatives ``d Phi_ij / d x_k`` with shape ``(..., N, n, n)``."""
        return self._hess(x, t)

    def jacobian_time_derivative(self, x, t=0.0) -> np.ndarray:
        return self._jac_t(x, t)

    def with_A(self, A) -> "Lifting":
        return Lifting(self.n, self.phi, A, self.B, self.time_varying)

    def with_B(self, B) -> "Lifting":
        return Lifting(self.n, self.phi, self.A, B, self.time_varying)

    def to_text(self) -> str:
        lines = [f"n = {self.n}", f"N = {self.N}"]
        if self.time_varying:
            lines.append("time_varying = true")
        lines += [f"phi{i + 1} = {p}" for i, p in enumerate(self.phi)]
        lines.append(f"A = {format_matrix(self.A)}")
        if self.B is not None:
            lines.append(f"B = {format_matrix(self.B)}")
        return "\n".join(lines) + "\n"


def parse_lifting(source: str) -> Lifting:
    pairs = parse_pairs(source)
    try:
        n = int(pairs.pop("n"))
    except KeyError:
        raise ExprSyntaxError("missing 'n'", source, 0) from None
    tv = parse_bool(pairs.pop("time_varying", "false"))
    declared_N = pairs.pop("N", None)
    A_text = pairs.pop("A", None)
    B_text = pairs.pop("B", None)
    m_text = pairs.pop("m", None)
    phis = {}
    for key, value in pairs.items():
        if key.startswith("phi") and key[3:].isdigit():
            phis[int(key[3:])] = value
        else:
            raise ExprSyntaxError(f"unknown key {key!r}", source, source.find(key))
    N = len(phis)
    if sorted(phis) != list(range(1, N + 1)):
        raise DimensionError("observables must be numbered phi1..phiN")
    if declared_N is not None and int(declared_N) != N:
        raise DimensionError(f"N = {declared_N} but {N} observables given")
    if A_text is None:
        raise ExprSyntaxError("missing 'A'", source, 0)
    allowed = ex.allowed_symbols(n, 0, time=tv)
    phi = tuple(ex.parse_expr(phis[i + 1], allowed) for i in range(N))
    A = parse_matrix(A_text, N, N, "A")
    B = None
    if B_text is not None:
        m = int(m_text) if m_text is not None else None
        if m is None:
            raw = np.asarray(json.loads(B_text), dtype=float)
            m = raw.shape[1] if raw.ndim == 2 else raw.size // N
        B = parse_matrix(B_text, N, m, "B")
    return Lifting(n, phi, A, B, tv)


def load_lifting(path) -> Lifting:
    with open(path) as fh:
        return parse_lifting(fh.read())


# ---------------------------------------------------------------------------
# residual reports


@dataclass
class ResidualReport:
    max_abs_residual: float
    argmax_point: list
    rank_margin: float
    tol: float
    rank_tol: float
    n_points: int
    residuals: Optional[np.ndarray] = field(default=None, repr=False)
    extra: dict = field(default_factory=dict)

    @property
    def verdict(self) -> bool:
        return bool(self.max_abs_residual <= self.tol and self.rank_margin >= self.rank_tol)

    def to_dict(self) -> dict:
        d = {
            "max_abs_residual": float(self.max_abs_residual),
            "argmax_point": [float(v) for v in self.argmax_point],
            "rank_margin": float(self.rank_margin),
            "tol": float(self.tol),
            "rank_tol": float(self.rank_tol),
            "n_points": int(self.n_points),
            "verdict": "pass" if self.verdict else "fail",
        }
        d.update(self.extra)
        return d


def lifting_jacobian(L: Lifting, x, t=0.0) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != L.n:
        raise DimensionError(f"state must have dimension {L.n}")
    return L.jacobian(x, t)


def _min_singular(Phi: np.ndarray) -> np.ndarray:
    return np.linalg.svd(Phi, compute_uv=False)[..., -1]


def _report(res, sv, coords, tol, rank_tol, keep_table, extra):
    i = first_argmax(res)
    return ResidualReport(
        max_abs_residual=float(res[i]),
        argmax_point=list(coords[i]),
        rank_margin=float(sv.min()),
        tol=tol,
        rank_tol=rank_tol,
        n_points=len(res),
        residuals=res if keep_table else None,
        extra=extra,
    )


def _state_points(box: SampleBox, n: int, probes: int, seed: int):
    if box.dim != n:
        raise DimensionError(f"box has dimension {box.dim}, system has {n}")
    pts = box.points()
    extra = {}
    if probes:
        pts = np.vstack([pts, box.random_points(probes, seed)])
        extra = {"probes": int(probes), "seed": int(seed)}
    return pts, extra


def pde_residual_autonomous(sys: SystemModel, L: Lifting, box: SampleBox, tol: float = DEFAULT_TOL,
                            rank_tol: float = DEFAULT_RANK_TOL, *, threads: int = 1, probes: int = 0,
                            seed: int = 0, keep_table: bool = False) -> ResidualReport:
    """Worst ``|Phi(x) f(x) - A phi(x)|_inf`` over the box and the smallest singular value of Phi."""
    if sys.kind != "autonomous" or L.time_varying:
        raise PreconditionError("autonomous residual needs an autonomous system and a time-invariant lifting")
    _check_dims(sys, L)
    pts, extra = _state_points(box, sys.n, probes, seed)

    def chunk(x):
        Phi = L.jacobian(x)
        r = np.einsum("pij,pj->pi", Phi, sys.rhs(x)) - L(x) @ L.A.T
        return np.max(np.abs(r), axis=-1), _min_singular(Phi)

    res, sv = evaluate_chunked(chunk, pts, threads=threads)
    return _report(res, sv, pts, tol, rank_tol, keep_table, extra)


def pde_residual_tv(sys: SystemModel, L: Lifting, box: SampleBox, tol: float = DEFAULT_TOL,
                    rank_tol: float = DEFAULT_RANK_TOL, *, threads: int = 1, probes: int = 0,
                    seed: int = 0, keep_table: bool = False) -> ResidualReport:
    """Worst ``|d phi/dt + Phi f - A phi|_inf`` over the space-time grid of ``box``."""
    if sys.kind == "controlled":
        raise PreconditionError("use pde_residual_controlled for controlled systems")
    if box.time_interval is None:
        raise PreconditionError("time-varying residual needs a box with a time interval")
    _check_dims(sys, L)
    pts, extra = _state_points(box, sys.n, probes, seed)
    ts = box.times()
    X = np.repeat(pts, len(ts), axis=0)
    T = np.tile(ts, len(pts))
    coords = np.column_stack([X, T])

    def chunk(x, t):
        Phi = L.jacobian(x, t)
        r = L.time_derivative(x, t) + np.einsum("pij,pj->pi", Phi, sys.rhs(x, t)) - L(x, t) @ L.A.T
        return np.max(np.abs(r), axis=-1), _min_singular(Phi)

    res, sv = evaluate_chunked(chunk, X, T, threads=threads)
    return _report(res, sv, coords, tol, rank_tol, keep_table, extra)


def pde_residual_controlled(sys: SystemModel, L: Lifting, box: SampleBox, input_box: SampleBox,
                            tol: float = DEFAULT_TOL, rank_tol: float = DEFAULT_RANK_TOL, *,
                            threads: int = 1, probes: int = 0, seed: int = 0,
                            keep_table: bool = False) -> ResidualReport:
    """Worst ``|Phi(x) f(x,u) - A phi(x) - B u|_inf`` over state grid x input grid."""
    if sys.kind != "controlled":
        raise PreconditionError("controlled residual needs a controlled system")
    if L.B is None:
        raise PreconditionError("lifting has no input matrix B")
    _check_dims(sys, L)
    if L.m != sys.m or input_box.dim != sys.m:
        raise DimensionError("input dimensions of system, lifting and input box disagree")
    pts, extra = _state_points(box, sys.n, probes, seed)
    us = input_box.points()
    X = np.repeat(pts, len(us), axis=0)
    U = np.tile(us, (len(pts), 1))
    coords = np.column_stack([X, U])

    def chunk(x, u):
        Phi = L.jacobian(x)
        r = (np.einsum("pij,pj->pi", Phi, sys.rhs(x, 0.0, u)) - L(x) @ L.A.T - u @ L.B.T)
        return np.max(np.abs(r), axis=-1), _min_singular(Phi)

    res, sv = evaluate_chunked(chunk, X, U, threads=threads)
    return _report(res, sv, coords, tol, rank_tol, keep_table, extra)


def pde_residual(sys, L, box, input_box=None, **kw) -> ResidualReport:
    """Dispatch to the residual check matching the system kind."""
    if sys.kind == "controlled":
        return pde_residual_controlled(sys, L, box, input_box, **kw)
    if sys.kind == "time-varying" or L.time_varying:
        return pde_residual_tv(sys, L, box, **kw)
    return pde_residual_autonomous(sys, L, box, **kw)


def _check_dims(sys, L):
    if sys.n != L.n:
        raise DimensionError(f"system has n={sys.n}, lifting has n={L.n}")


# ---------------------------------------------------------------------------
# eigenfunctions


@dataclass
class EigenReport:
    deviation: float
    differential_residual: float
    tol: float

    @property
    def verdict(self) -> bool:
        return bool(self.deviation <= self.tol)

    def to_dict(self):
        return {"deviation": float(self.deviation), "differential_residual": float(self.differential_residual),
                "tol": float(self.tol), "verdict": "pass" if self.verdict else "fail"}


def eigenfunction_check(sys: SystemModel, phi, lam: complex, x0s, horizon: float, dt: float = 1e-3,
                        tol: float = 1e-8) -> EigenReport:
    """Compare ``phi(X(x0,t))`` with ``exp(lam t) phi(x0)`` along RK4 trajectories.

    ``phi`` is an expression (or string) for real eigenfunctions, or a pair
    ``(real part, imaginary part)`` for complex ones. The deviation is relative
    to ``max(1, |phi(x0)|)``. The differential residual
    ``<f, grad phi> - lam phi`` is evaluated at every visited state.
    """
    if sys.kind != "autonomous":
        raise PreconditionError("eigenfunction checks need an autonomous system")
    parts = [phi] if isinstance(phi, (str, ex.Expr)) else list(phi)
    parts = [ex.parse_expr(p, ex.allowed_symbols(sys.n, 0, False)) if isinstance(p, str) else p for p in parts]
    if len(parts) == 1:
        parts.append(ex.ZERO)
    values = ex.compile_exprs(parts, sys.n)
    grads = ex.compile_matrix(ex.jacobian(parts, sys.state_names), sys.n)

    def cvals(x):
        v = values(x)
        return v[..., 0] + 1j * v[..., 1]

    x0s = np.atleast_2d(np.asarray(x0s, dtype=float))
    traj = integrate(sys, x0s, horizon=horizon, dt=dt)
    X = traj.states  # (steps+1, K, n)
    phi0 = cvals(x0s)
    growth = np.exp(complex(lam) * traj.times)[:, None]
    dev = np.abs(cvals(X) - growth * phi0[None, :]) / np.maximum(1.0, np.abs(phi0))[None, :]
    G = grads(X)
    lie = np.einsum("...kj,...j->...k", G, sys.rhs(X))
    diff_res = np.abs(lie[..., 0] + 1j * lie[..., 1] - complex(lam) * cvals(X))
    return EigenReport(float(dev.max()), float(diff_res.max()), tol)


# ---------------------------------------------------------------------------
# lifted dynamics


def lifted_simulate(L: Lifting, z0, horizon: float, dt: float = 1e-3, input_policy: Callable | None = None,
                    t0: float = 0.0) -> Trajectory:
    """RK4 trajectory of ``z' = A z (+ B u(z, t))``."""
    z0 = np.asarray(z0, dtype=float)
    if z0.shape[-1] != L.N:
        raise DimensionError(f"z0 must have dimension {L.N}")
    A = L.A
    if input_policy is None:
        rhs = lambda z, t: z @ A.T
    else:
        if L.B is None:
            raise PreconditionError("an input policy needs a lifting with B")
        B = L.B
        rhs = lambda z, t: z @ A.T + np.asarray(input_policy(z, t), dtype=float) @ B.T
    steps, h = step_count(horizon, dt)
    states = np.empty((steps + 1,) + z0.shape)
    for k, _, z in rk4_steps(rhs, z0, t0, h, steps):
        states[k] = z
    return Trajectory(t0, h, states)


# ---------------------------------------------------------------------------
# EDMD


@dataclass(frozen=True, eq=False)
class Snapshots:
    """Data pairs: ``kind='derivative'`` holds (x, dx/dt), ``'successor'`` holds (x_k, x_{k+1})."""

    X: np.ndarray
    Y: np.ndarray
    kind: str = "derivative"
    dt: float = 0.0

    def __post_init__(self):
        if self.kind not in ("derivative", "successor"):
            raise ValueError(f"unknown snapshot kind {self.kind!r}")
        if np.shape(self.X) != np.shape(self.Y):
            raise DimensionError("snapshot arrays must have equal shapes")
        if self.kind == "successor" and not self.dt > 0:
            raise ValueError("successor snapshots need dt > 0")

    def to_csv(self, path):
        n = self.X.shape[1]
        prefix = "dx" if self.kind == "derivative" else "y"
        with open(path, "w", newline="") as fh:
            fh.write(f"# dt = {self.dt!r}\n")
            w = csv.writer(fh)
            w.writerow([f"x{i + 1}" for i in range(n)] + [f"{prefix}{i + 1}" for i in range(n)])
            for a, b in zip(self.X, self.Y):
                w.writerow(["%.17g" % v for v in np.concatenate([a, b])])


def load_snapshots(path) -> Snapshots:
    dt = 0.0
    rows = []
    header = None
    with open(path) as fh:
        for line in fh:
            s = line.strip()
            if not s:
                continue
            if s.startswith("#"):
                body = s[1:].strip()
                if body.startswith("dt"):
                    dt = float(body.split("=", 1)[1])
                continue
            if header is None:
                header = [h.strip() for h in s.split(",")]
                continue
            rows.append([float(v) for v in s.split(",")])
    if header is None:
        raise ValueError(f"{path}: no header row")
    n = len(header) // 2
    kind = "derivative" if header[n].startswith("dx") else "successor"
    data = np.asarray(rows, dtype=float).reshape(-1, 2 * n)
    return Snapshots(data[:, :n], data[:, n:], kind, dt)


def _lstsq(Z: np.ndarray, Y: np.ndarray, ridge: float) -> np.ndarray:
    K, N = Z.shape
    if ridge > 0:
        Z = np.vstack([Z, math.sqrt(ridge) * np.eye(N)])
        Y = np.vstack([Y, np.zeros((N, Y.shape[1]))])
    elif K < N:
        raise RankDeficientError(f"{K} snapshots cannot determine a {N}-dimensional lifting; use ridge > 0")
    Q, R = np.linalg.qr(Z)
    d = np.abs(np.diag(R))
    if d.min() <= 1e-12 * max(d.max(), 1e-300):
        raise RankDeficientError("dictionary is linearly dependent on the data; use ridge > 0")
    return scipy.linalg.solve_triangular(R, Q.T @ Y)


def real_logm(Ad: np.ndarray) -> np.ndarray:
    """Real principal logarithm; fails when a real eigenvalue is non-positive."""
    w = np.linalg.eigvals(Ad)
    scale = max(1.0, np.abs(w).max())
    bad = (np.abs(w.imag) <= 1e-12 * scale) & (w.real <= 0)
    if np.any(bad):
        raise MatrixLogError(f"no real logarithm: eigenvalue {w[bad][0].real:.6g} on the non-positive real axis")
    L = scipy.linalg.logm(Ad)
    if np.iscomplexobj(L):
        if np.abs(L.imag).max() > 1e-8 * max(1.0, np.abs(L.real).max()):
            raise MatrixLogError("matrix logarithm is not real")
        L = L.real
    return L


def edmd_fit(data: Snapshots, dictionary: Sequence, ridge: float = 0.0, mode: str | None = None,
             n: int | None = None) -> Lifting:
    """Least-squares lifted matrix for ``dictionary`` observables.

    Continuous mode (derivative data) regresses ``Phi(x_k) xdot_k`` on
    ``phi(x_k)``. Discrete mode (successor data) fits ``Ad`` with
    ``phi(x_{k+1}) ~ Ad phi(x_k)`` and returns ``A = log(Ad) / dt``.
    """
    if ridge < 0:
        raise ValueError("ridge must be non-negative")
    X = np.asarray(data.X, dtype=float)
    n = n or X.shape[1]
    mode = mode or ("continuous" if data.kind == "derivative" else "discrete")
    phi = tuple(ex.parse_expr(d, ex.allowed_symbols(n, 0, False)) if isinstance(d, str) else d for d in dictionary)
    lift = Lifting(n, phi, np.zeros((len(phi), len(phi))))
    Z = lift(X)
    if mode == "continuous":
        if data.kind != "derivative":
            raise PreconditionError("continuous mode needs derivative snapshots")
        target = np.einsum("kij,kj->ki", lift.jacobian(X), data.Y)
        A = _lstsq(Z, target, ridge).T
    elif mode == "discrete":
        if data.kind != "successor":
            raise PreconditionError("discrete mode needs successor snapshots")
        Ad = _lstsq(Z, lift(data.Y), ridge).T
        A = real_logm(Ad) / data.dt
    else:
        raise ValueError(f"unknown EDMD mode {mode!r}")
    return lift.with_A(A)


def regression_residual(L: Lifting, data: Snapshots) -> float:
    """RMS of the regression residual that :func:`edmd_fit` minimizes (continuous form)."""
    X = np.asarray(data.X, dtype=float)
    if data.kind == "derivative":
        r = np.einsum("kij,kj->ki", L.jacobian(X), data.Y) - L(X) @ L.A.T
    else:
        Ad = scipy.linalg.expm(L.A * data.dt)
        r = L(data.Y) - L(X) @ Ad.T
    return float(np.sqrt(np.mean(r ** 2)))


def koopman_pseudometric(L: Lifting, x1, x2, p: float = 2.0, t: float = 0.0) -> float:
    """``(sum_i |phi_i(x1) - phi_i(x2)|^p)^(1/p)``; ``p = inf`` gives the max norm."""
    if not p >= 1:
        raise ValueError("p must be at least 1")
    d = L(np.asarray(x1, dtype=float), t) - L(np.asarray(x2, dtype=float), t)
    return float(np.linalg.norm(d, ord=p, axis=-1))
