"""Nonlinear systems given as expression vectors: evaluation, Jacobians, RK4 flows.

A system file is a key-value text file (see :mod:`koopcontract.textfmt`)::

    kind = autonomous        # or time-varying / controlled; inferred if omitted
    n = 2
    m = 0                    # input dimension, controlled systems only
    f1 = -x1
    f2 = -2*(x2 - x1^2)
    equilibrium = 0, 0       # optional hint

Expressions may use ``x1..xn``, ``t`` (time-varying and controlled systems),
``u1..um`` (controlled systems), the constant ``pi`` and the functions
``sin cos tanh exp log sqrt abs``.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

from . import expr as ex
from .errors import (BlowUpError, ConvergenceError, DimensionError, ExprSyntaxError,
                     PreconditionError, UnknownSymbolError)
from .textfmt import parse_pairs, parse_vector

KINDS = ("autonomous", "time-varying", "controlled")


@dataclass(frozen=True, eq=False)
class SystemModel:
    kind: str
    n: int
    m: int
    f: tuple
    equilibrium: Optional[tuple] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown system kind {self.kind!r}")
        if len(self.f) != self.n:
            raise DimensionError(f"expected {self.n} right-hand sides, got {len(self.f)}")
        if self.kind != "controlled" and self.m != 0:
            raise DimensionError("only controlled systems have inputs")
        allowed = ex.allowed_symbols(self.n, self.m, time=self.kind != "autonomous")
        for i, fi in enumerate(self.f):
            extra = ex.free_symbols(fi) - allowed
            if extra:
                raise UnknownSymbolError(f"f{i + 1} uses {sorted(extra)} not allowed in a {self.kind} system with n={self.n}, m={self.m}")
        if self.equilibrium is not None and len(self.equilibrium) != self.n:
            raise DimensionError("equilibrium hint has the wrong dimension")

    @classmethod
    def from_strings(cls, f: Sequence[str], kind: str | None = None, m: int = 0, equilibrium=None):
        n = len(f)
        exprs = tuple(ex.parse_expr(s, ex.allowed_symbols(n, m)) for s in f)
        kind = kind or _infer_kind(exprs, m)
        eq = None if equilibrium is None else tuple(float(v) for v in equilibrium)
        return cls(kind, n, m, exprs, eq)

    @property
    def state_names(self):
        return ex.state_names(self.n)

    @cached_property
    def rhs(self) -> Callable:
        """Vectorized ``f(x, t, u)`` on arrays with trailing state axis."""
        return ex.compile_exprs(self.f, self.n, self.m)

    @cached_property
    def jac_x_exprs(self):
        return ex.jacobian(self.f, self.state_names)

    @cached_property
    def jac_x(self) -> Callable:
        return ex.compile_matrix(self.jac_x_exprs, self.n, self.m)

    @cached_property
    def jac_u_exprs(self):
        return ex.jacobian(self.f, ex.input_names(self.m))

    @cached_property
    def jac_u(self) -> Callable:
        return ex.compile_matrix(self.jac_u_exprs, self.n, self.m)

    @cached_property
    def dfdt(self) -> Callable:
        return ex.compile_exprs([ex.diff(e, "t") for e in self.f], self.n, self.m)

    def to_text(self) -> str:
        lines = [f"kind = {self.kind}", f"n = {self.n}"]
        if self.m:
            lines.append(f"m = {self.m}")
        lines += [f"f{i + 1} = {e}" for i, e in enumerate(self.f)]
        if self.equilibrium is not None:
            lines.append("equilibrium = " + ", ".join(repr(v) for v in self.equilibrium))
        return "\n".join(lines) + "\n"


def _infer_kind(exprs, m):
    if m > 0:
        return "controlled"
    syms = frozenset().union(*(ex.free_symbols(e) for e in exprs))
    return "time-varying" if "t" in syms else "autonomous"


def parse_system(source: str) -> SystemModel:
    """Parse the system text format described in the module docstring."""
    pairs = parse_pairs(source)
    if "n" not in pairs:
        raise ExprSyntaxError("missing 'n'", source, 0)
    n = int(pairs.pop("n"))
    m = int(pairs.pop("m", "0"))
    kind = pairs.pop("kind", None)
    if kind is not None and kind not in KINDS:
        raise ValueError(f"unknown system kind {kind!r}")
    eq = pairs.pop("equilibrium", None)
    fs = {}
    for key, value in pairs.items():
        if key.startswith("f") and key[1:].isdigit():
            fs[int(key[1:])] = value
        else:
            raise ExprSyntaxError(f"unknown key {key!r}", source, source.find(key))
    if sorted(fs) != list(range(1, n + 1)):
        raise DimensionError(f"expected f1..f{n}, got {['f%d' % k for k in sorted(fs)]}")
    exprs = tuple(ex.parse_expr(fs[i + 1], ex.allowed_symbols(n, m)) for i in range(n))
    kind = kind or _infer_kind(exprs, m)
    eq = None if eq is None else tuple(parse_vector(eq, n, "equilibrium"))
    return SystemModel(kind, n, m, exprs, eq)


def load_system(path) -> SystemModel:
    with open(path) as fh:
        return parse_system(fh.read())


def _check_point(sys, x, u):
    x = np.asarray(x, dtype=float)
    if x.shape[-1:] != (sys.n,):
        raise DimensionError(f"state must have dimension {sys.n}, got shape {x.shape}")
    if u is not None:
        u = np.asarray(u, dtype=float)
        if u.shape[-1:] != (sys.m,):
            raise DimensionError(f"input must have dimension {sys.m}, got shape {u.shape}")
    elif sys.m:
        u = np.zeros(x.shape[:-1] + (sys.m,))
    return x, u


def eval_f(sys: SystemModel, x, t=0.0, u=None) -> np.ndarray:
    x, u = _check_point(sys, x, u)
    return sys.rhs(x, t, u)


def jacobian_x(sys: SystemModel, x, t=0.0, u=None) -> np.ndarray:
    """Exact state Jacobian F(x, t, u) from symbolic differentiation."""
    x, u = _check_point(sys, x, u)
    return sys.jac_x(x, t, u)


def jacobian_u(sys: SystemModel, x, t=0.0, u=None) -> np.ndarray:
    if sys.kind != "controlled":
        raise PreconditionError("input Jacobian requested for a system without inputs")
    x, u = _check_point(sys, x, u)
    return sys.jac_u(x, t, u)


# ---------------------------------------------------------------------------
# integration


@dataclass(frozen=True, eq=False)
class Trajectory:
    """States on a uniform grid ``t0 + k*dt``; ``states`` has shape ``(steps+1, ..., n)``."""

    t0: float
    dt: float
    states: np.ndarray
    inputs: Optional[np.ndarray] = None

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(len(self.states))

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]

    def select(self, k: int) -> "Trajectory":
        """The ``k``-th trajectory of a batch."""
        inputs = None if self.inputs is None else self.inputs[:, k]
        return Trajectory(self.t0, self.dt, self.states[:, k], inputs)

    def to_csv(self, path, names=None):
        n = self.states.shape[-1]
        if self.states.ndim != 2:
            raise ValueError("only single trajectories can be exported")
        names = list(names) if names is not None else [f"x{i + 1}" for i in range(n)]
        header = ["t"] + names
        cols = [self.times[:, None], self.states]
        if self.inputs is not None:
            header += [f"u{j + 1}" for j in range(self.inputs.shape[-1])]
            cols.append(self.inputs)
        data = np.hstack(cols)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for row in data:
                w.writerow(["%.17g" % v for v in row])


def step_count(horizon: float, dt: float) -> tuple:
    """Number of steps and the adjusted step so the grid ends exactly at ``horizon``."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    if horizon < 0:
        raise ValueError("horizon must be non-negative")
    if horizon == 0:
        return 0, dt
    steps = max(1, int(np.ceil(horizon / dt - 1e-9)))
    return steps, horizon / steps


def rk4_steps(rhs: Callable, x0, t0: float, dt: float, steps: int) -> Iterator:
    """Yield ``(k, t_k, x_k)`` for k = 0..steps of classical RK4 on ``x' = rhs(x, t)``.

    ``dt`` may be negative for backward integration. Raises :class:`BlowUpError`
    as soon as a non-finite state appears.
    """
    x = np.array(x0, dtype=float)
    t = t0
    yield 0, t, x
    half = 0.5 * dt
    for k in range(1, steps + 1):
        k1 = rhs(x, t)
        k2 = rhs(x + half * k1, t + half)
        k3 = rhs(x + half * k2, t + half)
        k4 = rhs(x + dt * k3, t + dt)
        with np.errstate(over="ignore", invalid="ignore"):
            x = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        t = t0 + k * dt
        if not np.all(np.isfinite(x)):
            raise BlowUpError(t)
        yield k, t, x


def _closed_rhs(sys: SystemModel, input_policy):
    if sys.kind != "controlled":
        return lambda x, t: sys.rhs(x, t)
    if input_policy is None:
        zero = np.zeros(sys.m)
        return lambda x, t: sys.rhs(x, t, np.broadcast_to(zero, x.shape[:-1] + (sys.m,)))
    return lambda x, t: sys.rhs(x, t, np.asarray(input_policy(x, t), dtype=float))


def integrate(sys: SystemModel, x0, t0: float = 0.0, horizon: float = 1.0, dt: float = 1e-3,
              input_policy: Callable | None = None) -> Trajectory:
    """Fixed-step RK4 trajectory from ``x0``; batched initial states are allowed.

    ``input_policy(x, t) -> u`` closes the loop for controlled systems (evaluated
    at every RK stage); without it a controlled system is driven by ``u = 0``.
    """
    x0, _ = _check_point(sys, x0, None)
    steps, h = step_count(horizon, dt)
    rhs = _closed_rhs(sys, input_policy)
    states = np.empty((steps + 1,) + x0.shape)
    for k, _, x in rk4_steps(rhs, x0, t0, h, steps):
        states[k] = x
    inputs = None
    if sys.kind == "controlled":
        times = t0 + h * np.arange(steps + 1)
        if input_policy is None:
            inputs = np.zeros(states.shape[:-1] + (sys.m,))
        else:
            inputs = np.stack([np.asarray(input_policy(states[k], times[k]), dtype=float)
                               for k in range(steps + 1)])
    return Trajectory(t0, h, states, inputs)


# ---------------------------------------------------------------------------
# equilibria


@dataclass
class NewtonSettings:
    tol: float = 1e-10
    max_iter: int = 200
    max_halvings: int = 60
    fallback_horizon: float = 50.0
    fallback_dt: float = 1e-2


def _newton(sys, x, settings):
    fx = sys.rhs(x)
    res = np.max(np.abs(fx))
    for _ in range(settings.max_iter):
        if res <= settings.tol:
            return x, res
        J = sys.jac_x(x)
        step = np.linalg.lstsq(J, -fx, rcond=None)[0]
        if not np.any(step):
            break
        lam = 1.0
        for _ in range(settings.max_halvings + 1):
            trial = x + lam * step
            with np.errstate(all="ignore"):
                ft = sys.rhs(trial)
            r = np.max(np.abs(ft))
            if np.isfinite(r) and r < res:
                break
            lam *= 0.5
        else:
            break  # no decrease along the Newton direction
        x, fx, res = trial, ft, r
    return x, res


def find_equilibrium(sys: SystemModel, guess=None, settings: NewtonSettings | None = None) -> np.ndarray:
    """Point with ``max|f(x)| <= tol`` via damped Newton, then a simulation fallback."""
    if sys.kind != "autonomous":
        raise PreconditionError("equilibria are only searched for autonomous systems")
    settings = settings or NewtonSettings()
    if guess is None:
        guess = sys.equilibrium if sys.equilibrium is not None else np.zeros(sys.n)
    x = np.asarray(guess, dtype=float)
    x, res = _newton(sys, x, settings)
    if res <= settings.tol:
        return x
    try:
        traj = integrate(sys, x, horizon=settings.fallback_horizon, dt=settings.fallback_dt)
    except BlowUpError:
        raise ConvergenceError(f"no equilibrium found near {list(np.atleast_1d(guess))} (trajectory diverged)") from None
    x, res = _newton(sys, traj.final, settings)
    if res <= settings.tol:
        return x
    raise ConvergenceError(f"no equilibrium found near {list(np.atleast_1d(guess))}; best residual {res:.3g}")
