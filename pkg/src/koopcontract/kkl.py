"""Koopman mappings for contracting systems from the KKL-observer integral.

With ``x*`` moved to the origin, ``F* = df/dx(x*)`` Hurwitz and the remainder
``H(z) = -f(z + x*) + F* z``, the map ``T`` solving ``dT/dz f = F* T + H`` is

    T(z) = -int_0^inf exp(-F* s) H(Z(z, s)) ds,

evaluated by Simpson quadrature along RK4 trajectories. Then
``phi0(z) = z + T(z)`` satisfies ``dphi0/dz f = F* phi0``.

The sign and the negative exponent matter: ``int exp(F* s) H ds`` does not
satisfy the equation. The time-varying counterpart integrates forward from
``s = 0`` and needs no such correction.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.linalg
from scipy.interpolate import RegularGridInterpolator

from . import expr as ex
from .dynamics import SystemModel, find_equilibrium, rk4_steps, step_count
from .errors import GridTooCoarseError, NotStableError, PreconditionError, TailNotConvergedError
from .grid import SampleBox, evaluate_chunked, first_argmax
from .koopman import DEFAULT_RANK_TOL, ResidualReport, _min_singular
from .linalg import exp_growth_bound, spectral_abscissa, tail_bound

VANISH_TOL = 1e-9
DEFAULT_TAIL_TOL = 1e-8
KKL_TOL = 1e-4
NOISE_FACTOR = 64 * np.finfo(float).eps


def _is_affine(exprs, names) -> bool:
    for e in exprs:
        for a in names:
            da = ex.diff(e, a)
            if any(not (isinstance(d, ex.Const) and d.value == 0.0) for d in (ex.diff(da, b) for b in names)):
                return False
    return True


@dataclass(frozen=True, eq=False)
class RemainderField:
    """Remainder ``H(z[, t]) = -f(z + x*[, t]) + F* z`` in recentered coordinates."""

    sys: SystemModel
    x_star: np.ndarray
    F_star: np.ndarray
    H: tuple
    vanishing: tuple = (0.0, 0.0)

    @property
    def n(self) -> int:
        return self.sys.n

    @property
    def time_varying(self) -> bool:
        return self.sys.kind == "time-varying"

    @cached_property
    def shifted_f(self) -> tuple:
        names = ex.state_names(self.n)
        shift = {v: ex.add(ex.Var(v), ex.Const(float(c))) for v, c in zip(names, self.x_star) if c != 0.0}
        return tuple(ex.substitute(e, shift) for e in self.sys.f)

    @cached_property
    def rhs(self):
        """Recentered vector field ``z' = f(z + x*, t)``."""
        return ex.compile_exprs(self.shifted_f, self.n)

    @cached_property
    def h(self):
        return ex.compile_exprs(self.H, self.n)

    @property
    def alpha(self) -> float:
        """Decay rate of ``exp(F* s)``: minus the spectral abscissa of ``F*``."""
        return -spectral_abscissa(self.F_star)

    def default_horizon(self) -> float:
        return 40.0 / self.alpha


def build_remainder(sys: SystemModel, x_star=None, *, strict: bool = True) -> RemainderField:
    """Recenter at the equilibrium and form the remainder field.

    Autonomous systems: ``x_star`` seeds the equilibrium search. Time-varying
    systems: ``x_star`` (default 0) must be an equilibrium for all ``t``; with
    ``strict=False`` the vanishing conditions are recorded but not enforced,
    which allows forced systems such as ``x' = -x + sin t``.
    Raises :class:`NotStableError` when ``F*`` is not Hurwitz.
    """
    if sys.kind == "controlled":
        raise PreconditionError("the KKL construction needs an autonomous or time-varying system")
    n = sys.n
    if sys.kind == "autonomous":
        xs = find_equilibrium(sys, x_star)
    else:
        xs = np.zeros(n) if x_star is None else np.asarray(x_star, dtype=float).reshape(n)
    F = np.asarray(sys.jac_x(xs, 0.0), dtype=float).reshape(n, n)
    abscissa = spectral_abscissa(F)
    if abscissa >= 0:
        raise NotStableError(abscissa, "linearization at the equilibrium is not Hurwitz")

    names = ex.state_names(n)
    probe = RemainderField(sys, xs, F, ())
    f_shift = probe.shifted_f
    time_free = all("t" not in ex.free_symbols(e) for e in f_shift)
    if time_free and _is_affine(f_shift, names):
        H = (ex.ZERO,) * n
    else:
        H = tuple(
            ex.add(ex.neg(fi), _linear_form(F[i], names)) for i, fi in enumerate(f_shift)
        )
    rem = RemainderField(sys, xs, F, H)

    # vanishing conditions at the origin, sampled over time for forced systems
    times = np.linspace(0.0, 10.0, 11) if sys.kind == "time-varying" else np.zeros(1)
    z0 = np.zeros((len(times), n))
    h0 = float(np.abs(rem.h(z0, times)).max())
    jac = ex.compile_matrix(ex.jacobian(H, names), n)
    dh0 = float(np.abs(jac(z0, times)).max())
    object.__setattr__(rem, "vanishing", (h0, dh0))
    if strict and (h0 > VANISH_TOL or dh0 > VANISH_TOL):
        raise PreconditionError(f"remainder does not vanish to second order at x* (|H|={h0:.3g}, |dH|={dh0:.3g})")
    return rem


def _linear_form(row, names):
    out = ex.ZERO
    for c, v in zip(row, names):
        if c != 0.0:
            out = ex.add(out, ex.mul(ex.Const(float(c)), ex.Var(v)))
    return out


# ---------------------------------------------------------------------------
# quadrature


def _simpson_weights(steps: int) -> np.ndarray:
    w = np.ones(steps + 1)
    w[1:-1:2] = 4.0
    w[2:-1:2] = 2.0
    return w / 3.0


def _even_steps(horizon: float, dt: float) -> tuple:
    steps, h = step_count(horizon, dt)
    if steps % 2:
        steps += 1
        h = horizon / steps
    return steps, h


def _decay_rate(samples: np.ndarray, times: np.ndarray) -> float:
    """Exponential decay rate of positive samples by a log-linear least-squares fit."""
    slope = np.polyfit(times, np.log(samples), 1)[0]
    return float(-slope)


def _kkl_batch(rem: RemainderField, Z: np.ndarray, T_h: float, dt: float):
    """Truncated integral for a batch of recentered states. Returns ``(values, tails)``.

    Each component of ``H`` stops contributing once it falls to the rounding
    level of ``-f(z + x*) + F* z`` in that row; past that the weighted integrand
    would only amplify roundoff. A point stops when all its components have, and
    the tail bound takes over from its last clean sample.
    """
    P, n = Z.shape
    steps, h = _even_steps(T_h, dt)
    w = _simpson_weights(steps)
    F = rem.F_star
    E = scipy.linalg.expm(-F * h)
    W = np.eye(n)
    acc = np.zeros_like(Z)
    absF = np.abs(F)
    xs = np.abs(rem.x_star)
    active = np.ones((P, n), dtype=bool)
    every = max(1, steps // 200)
    check_t, check_h, check_noise = [], [], []
    for k, t, z in rk4_steps(lambda v, s: rem.rhs(v), Z, 0.0, h, steps):
        if k:
            W = W @ E
        Hk = rem.h(z)
        # rounding bound of the final subtraction, per row
        noise = NOISE_FACTOR * ((np.abs(z) + xs) @ absF.T + np.abs(z @ F.T - Hk))
        active &= np.abs(Hk) > noise
        Hk = np.where(active, Hk, 0.0)
        live = active.any(axis=-1)
        if k % every == 0 or k == steps or not live.any():
            check_t.append(t)
            check_h.append(np.linalg.norm(Hk, axis=-1))
            check_noise.append(np.linalg.norm(np.where(active, noise, 0.0), axis=-1))
        if not live.any():
            break
        acc[live] -= w[k] * (Hk[live] @ W.T)
    values = h * acc
    check_t = np.array(check_t)
    check_h = np.array(check_h)
    check_noise = np.array(check_noise)
    growth = exp_growth_bound(-F)
    tails = np.array([_tail(check_h[:, i], check_noise[:, i], check_t, 2.0 * rem.alpha, growth)
                      for i in range(P)])
    return values, tails


def _tail(samples, noise, times, fallback_rate, growth) -> float:
    """Bound on the part of the integral past the last recorded clean sample.

    The decay rate is fitted on samples well above the noise floor in the second
    half of the clean range; with fewer than three of them the rate of a
    quadratic remainder (twice the decay rate of the linearization) is used.
    """
    clean = np.flatnonzero(samples > 0)
    if clean.size == 0:
        return 0.0
    j = clean[-1]
    fit = clean[(times[clean] >= 0.5 * times[j]) & (samples[clean] > 100 * noise[clean])]
    rate = _decay_rate(samples[fit], times[fit]) if fit.size >= 3 else fallback_rate
    return tail_bound(None, float(times[j]), float(samples[j]), rate, growth)


def kkl_T(rem: RemainderField, x, T_h: float | None = None, dt: float = 1e-3,
          tail_tol: float = DEFAULT_TAIL_TOL) -> tuple:
    """``T`` at original-coordinate state(s) ``x``; returns ``(value, tail_estimate)``.

    Raises :class:`TailNotConvergedError` when the certified tail exceeds ``tail_tol``.
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    Z = np.atleast_2d(x) - rem.x_star
    if rem.time_varying:
        raise PreconditionError("use kkl_T_tv for time-varying systems")
    T_h = rem.default_horizon() if T_h is None else T_h
    values, tails = _kkl_batch(rem, Z, T_h, dt)
    worst = float(tails.max())
    if worst > tail_tol:
        raise TailNotConvergedError(worst, tail_tol)
    return (values[0], float(tails[0])) if single else (values, tails)


def kkl_T_tv(rem: RemainderField, x, t: float, horizon: float | None = None, dt: float = 1e-3,
             tail_tol: float = DEFAULT_TAIL_TOL) -> tuple:
    """``T0(x, t) = int_0^t exp(A (t - s)) H(X(s; x, t), s) ds`` with ``A = F*``.

    The trajectory through ``(x, t)`` is integrated backward down to
    ``max(0, t - horizon)``; a truncated lower limit is covered by a tail bound.
    Returns ``(value, tail_estimate)``.
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    Z = np.atleast_2d(x) - rem.x_star
    A = rem.F_star
    horizon = rem.default_horizon() if horizon is None else horizon
    if t < 0:
        raise ValueError("t must be non-negative")
    if t == 0:
        zero = np.zeros_like(Z)
        return (zero[0], 0.0) if single else (zero, np.zeros(len(Z)))
    span = min(t, horizon)
    steps, h = _even_steps(span, dt)
    w = _simpson_weights(steps)
    E = scipy.linalg.expm(A * h)
    W = np.eye(rem.n)
    acc = np.zeros_like(Z)
    sup_h = np.zeros(len(Z))
    for k, s, z in rk4_steps(lambda z, s: rem.rhs(z, s), Z, t, -h, steps):
        if k:
            W = W @ E
        Hk = rem.h(z, s)
        acc += w[k] * (Hk @ W.T)
        sup_h = np.maximum(sup_h, np.linalg.norm(Hk, axis=-1))
    values = h * acc
    if t > horizon:
        # remaining |int_horizon^t exp(A tau) H dtau| <= sup|H| int_horizon^inf |exp(A tau)|
        growth = exp_growth_bound(A)
        tails = np.array([tail_bound(None, horizon, float(v), 0.0, growth) for v in sup_h])
    else:
        tails = np.zeros(len(Z))
    worst = float(tails.max())
    if worst > tail_tol:
        raise TailNotConvergedError(worst, tail_tol)
    return (values[0], float(tails[0])) if single else (values, tails)


# ---------------------------------------------------------------------------
# tabulated solution


@dataclass(frozen=True, eq=False)
class KklSolution:
    """``T`` tabulated on a box (original coordinates) with multilinear interpolation."""

    rem: RemainderField
    box: SampleBox
    table: np.ndarray          # shape counts + (n,)
    grad_table: np.ndarray     # shape counts + (n, n), dT/dx by central differences
    T_h: float
    dt: float
    tail_tol: float
    max_tail: float
    extra: dict = field(default_factory=dict)

    @cached_property
    def _interp(self):
        return RegularGridInterpolator(tuple(self.box.axes()), self.table, method="linear")

    @cached_property
    def _interp_grad(self):
        n = self.rem.n
        flat = self.grad_table.reshape(self.grad_table.shape[:-2] + (n * n,))
        return RegularGridInterpolator(tuple(self.box.axes()), flat, method="linear")

    def _query(self, interp, x):
        x = np.asarray(x, dtype=float)
        lo, hi = np.array(self.box.lower), np.array(self.box.upper)
        if np.any(x < lo) or np.any(x > hi):
            raise PreconditionError("query point outside the tabulated box")
        return interp(x.reshape(-1, self.rem.n))

    def T(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return self._query(self._interp, x).reshape(x.shape)

    def phi0(self, x) -> np.ndarray:
        """``phi0(x) = (x - x*) + T(x)``; vanishes at the equilibrium."""
        x = np.asarray(x, dtype=float)
        return (x - self.rem.x_star) + self.T(x)

    def jacobian(self, x) -> np.ndarray:
        """``I + dT/dx`` interpolated from the difference table."""
        x = np.asarray(x, dtype=float)
        n = self.rem.n
        g = self._query(self._interp_grad, x).reshape(x.shape[:-1] + (n, n))
        return np.eye(n) + g

    def node_phi0(self) -> np.ndarray:
        pts = self.box.points().reshape(self.table.shape)
        return (pts - self.rem.x_star) + self.table

    def metadata(self) -> dict:
        return {
            "x_star": [float(v) for v in self.rem.x_star],
            "F_star": self.rem.F_star.tolist(),
            "T_h": float(self.T_h),
            "dt": float(self.dt),
            "tail_tol": float(self.tail_tol),
            "max_tail": float(self.max_tail),
            "box": self.box.describe(),
        }

    def export(self, csv_path, json_path) -> None:
        n = self.rem.n
        pts = self.box.points()
        vals = self.table.reshape(-1, n)
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"x{i + 1}" for i in range(n)] + [f"T{i + 1}" for i in range(n)])
            for p, v in zip(pts, vals):
                w.writerow(["%.17g" % c for c in np.concatenate([p, v])])
        with open(json_path, "w") as fh:
            json.dump(self.metadata(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def _tabulate(rem, box, T_h, dt, threads):
    pts = box.points()
    values, tails = evaluate_chunked(
        lambda p: _kkl_batch(rem, p - rem.x_star, T_h, dt), pts, threads=threads, chunk=1024)
    return values.reshape(tuple(box.counts) + (rem.n,)), tails


def _gradient(table: np.ndarray, axes, n) -> np.ndarray:
    """``dT_i/dx_j`` on the table; second-order differences, one-sided at edges."""
    grads = []
    for i in range(n):
        gi = np.gradient(table[..., i], *axes, edge_order=2)
        gi = [gi] if isinstance(gi, np.ndarray) else list(gi)
        grads.append(np.stack(gi, axis=-1))
    return np.stack(grads, axis=-2)


def _node_residual(rem, pts, grad, table, A):
    """``|Phi0 f - A phi0|_inf`` at the grid nodes (original coordinates)."""
    n = rem.n
    z = pts - rem.x_star
    fx = rem.rhs(z)
    Phi = np.eye(n) + grad.reshape(-1, n, n)
    phi = z + table.reshape(-1, n)
    r = np.einsum("pij,pj->pi", Phi, fx) - phi @ A.T
    return np.abs(r).max(axis=-1), Phi


def build_phi0(rem: RemainderField, box: SampleBox, T_h: float | None = None, dt: float = 1e-3,
               *, tail_tol: float = DEFAULT_TAIL_TOL, tol: float = KKL_TOL,
               rank_tol: float = DEFAULT_RANK_TOL, A=None, grid_check: bool = True,
               threads: int = 1) -> tuple:
    """Tabulate ``T`` on ``box`` and certify ``phi0 = x + T`` against ``Phi0 f = A phi0``.

    ``A`` defaults to ``F*``. The Jacobian comes from central differences on the
    table, so residuals carry a finite-difference floor. When every axis has an
    odd count the residual on the every-other-node subgrid is compared with the
    fine one; disagreement above ``10 * tol`` raises :class:`GridTooCoarseError`.
    """
    if rem.time_varying:
        raise PreconditionError("build_phi0 handles autonomous systems")
    if box.dim != rem.n:
        raise PreconditionError(f"box has dimension {box.dim}, system has {rem.n}")
    n = rem.n
    T_h = rem.default_horizon() if T_h is None else T_h
    A = rem.F_star if A is None else np.atleast_2d(np.asarray(A, dtype=float))
    table, tails = _tabulate(rem, box, T_h, dt, threads)
    max_tail = float(tails.max())
    if max_tail > tail_tol:
        raise TailNotConvergedError(max_tail, tail_tol)
    axes = box.axes()
    grad = _gradient(table, axes, n)
    pts = box.points()
    res, Phi = _node_residual(rem, pts, grad, table, A)

    extra = {"max_tail": max_tail, "T_h": float(T_h), "dt": float(dt), "A": A.tolist()}
    if grid_check and all(c % 2 == 1 and c >= 5 for c in box.counts):
        sl = tuple(slice(None, None, 2) for _ in range(n))
        coarse_table = table[sl]
        coarse_grad = _gradient(coarse_table, [a[::2] for a in axes], n)
        coarse_pts = pts.reshape(tuple(box.counts) + (n,))[sl].reshape(-1, n)
        coarse_res, _ = _node_residual(rem, coarse_pts, coarse_grad, coarse_table, A)
        fine_on_coarse = res.reshape(box.counts)[sl].ravel()
        gap = float(np.abs(coarse_res - fine_on_coarse).max())
        extra["grid_check_gap"] = gap
        if gap > 10 * tol and np.allclose(A, rem.F_star):
            raise GridTooCoarseError(f"halving the grid changes the residual by {gap:.3g} (> {10 * tol:.3g})")
    else:
        extra["grid_check_gap"] = None

    i = first_argmax(res)
    report = ResidualReport(
        max_abs_residual=float(res[i]), argmax_point=list(pts[i]),
        rank_margin=float(_min_singular(Phi).min()), tol=tol, rank_tol=rank_tol,
        n_points=len(res), extra=extra)
    sol = KklSolution(rem, box, table, grad, float(T_h), float(dt), tail_tol, max_tail)
    return sol, report


# ---------------------------------------------------------------------------
# semi-global redesign


@dataclass(frozen=True, eq=False)
class RedesignedMap:
    """``phi(x) = exp(-F* t_x) phi0(X(x, t_x))`` evaluated by fresh integration."""

    sol: KklSolution
    t_x: float
    dt: float = 1e-3

    def flow(self, x) -> np.ndarray:
        rem = self.sol.rem
        z = np.asarray(x, dtype=float) - rem.x_star
        steps, h = step_count(self.t_x, self.dt)
        for _, _, z in rk4_steps(lambda v, t: rem.rhs(v), z, 0.0, h, steps):
            pass
        return z + rem.x_star

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.t_x == 0:
            return self.sol.phi0(x)
        E = scipy.linalg.expm(-self.sol.rem.F_star * self.t_x)
        return self.sol.phi0(self.flow(x)) @ E.T


def semiglobal_redesign(rem: RemainderField, sol: KklSolution, t_x: float, dt: float = 1e-3) -> RedesignedMap:
    if t_x < 0:
        raise ValueError("t_x must be non-negative")
    if sol.rem is not rem:
        raise PreconditionError("solution was built for a different remainder field")
    return RedesignedMap(sol, float(t_x), dt)


def ball_entry_time(rem: RemainderField, box: SampleBox, radius: float, horizon: float = 50.0,
                    dt: float = 1e-2) -> float:
    """Largest time over the box grid at which a trajectory last leaves ``|z| < radius``."""
    Z = box.points() - rem.x_star
    steps, h = step_count(horizon, dt)
    last_out = np.zeros(len(Z))
    for _, t, z in rk4_steps(lambda v, s: rem.rhs(v), Z, 0.0, h, steps):
        outside = np.linalg.norm(z, axis=-1) >= radius
        last_out[outside] = t
    if np.any(last_out >= horizon - 0.5 * h):
        return math.inf
    return float(last_out.max())


def kkl_defect(sol: KklSolution, x0s, horizon: float, dt: float = 1e-2) -> float:
    """Defect of ``d/dt T(X) = F* T(X) + H(X)`` along trajectories, T from the table.

    Differences of tabulated ``T`` over windows of length ``2 dt`` are compared
    with the Simpson integral of the right-hand side. Differencing a
    piecewise-linear table pointwise would amplify interpolation error by ``1/dt``.
    """
    rem = sol.rem
    z = np.atleast_2d(np.asarray(x0s, dtype=float)) - rem.x_star
    steps, h = _even_steps(horizon, dt)
    zs = np.stack([v for _, _, v in rk4_steps(lambda v, t: rem.rhs(v), z, 0.0, h, steps)])
    Ts = sol.T(zs + rem.x_star)
    g = Ts @ rem.F_star.T + rem.h(zs)
    dT = Ts[2::2] - Ts[:-2:2]
    quad = h / 3.0 * (g[:-2:2] + 4.0 * g[1:-1:2] + g[2::2])
    return float(np.abs(dT - quad).max())
