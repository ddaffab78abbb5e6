"""Dense linear algebra for certification: Lyapunov and Riccati solvers,
stabilizability tests and bounds on matrix exponentials."""
from __future__ import annotations

import math
import warnings

import numpy as np
import scipy.linalg

from .errors import ConvergenceError, NotStabilizableError, NotStableError

STABILITY_TOL = 1e-12
SEPARATION_TOL = 1e-12


class IllConditionedWarning(UserWarning):
    pass


def spectral_abscissa(A) -> float:
    A = np.atleast_2d(np.asarray(A, dtype=float))
    if A.size == 0:
        return -math.inf
    return float(np.max(np.linalg.eigvals(A).real))


def sym(M: np.ndarray) -> np.ndarray:
    return 0.5 * (M + np.swapaxes(M, -1, -2))


def sym_eigvalsh(M: np.ndarray) -> np.ndarray:
    """Eigenvalues (ascending) of the symmetric part of ``M``; batched over leading axes."""
    return np.linalg.eigvalsh(sym(M))


def _schur_solve(T, U, C):
    """Solve ``T^H Y + Y T = -C`` for upper-triangular ``T`` column by column."""
    n = T.shape[0]
    Y = np.zeros((n, n), dtype=complex)
    TH = T.conj().T
    for j in range(n):
        rhs = -C[:, j] - Y[:, :j] @ T[:j, j]
        Y[:, j] = scipy.linalg.solve_triangular(TH + T[j, j] * np.eye(n), rhs, lower=True)
    return Y


def lyapunov_solve(A, Q=None, *, refine: bool = True) -> np.ndarray:
    """Solve ``A^T P + P A = -Q`` (``Q = I`` by default) by the Bartels-Stewart method.

    ``A`` is reduced to complex Schur form ``A = U T U^H``; the transformed
    equation ``T^H Y + Y T = -U^H Q U`` is triangular and solved by substitution.
    One step of iterative refinement follows. The result is symmetrized.

    Raises :class:`NotStableError` when ``A`` has an eigenvalue with real part
    ``>= -1e-12``. Warns with :class:`IllConditionedWarning` when the Schur
    separation ``min |conj(t_ii) + t_jj|`` is below ``1e-12``.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    n = A.shape[0]
    if A.shape != (n, n):
        raise ValueError("A must be square")
    Q = np.eye(n) if Q is None else np.atleast_2d(np.asarray(Q, dtype=float))
    T, U = scipy.linalg.schur(A, output="complex")
    d = np.diag(T)
    abscissa = float(d.real.max())
    if abscissa >= -STABILITY_TOL:
        raise NotStableError(abscissa)
    sep = np.abs(d.conj()[:, None] + d[None, :]).min()
    if sep < SEPARATION_TOL:
        warnings.warn(f"Lyapunov equation is ill-conditioned (separation {sep:.3g})", IllConditionedWarning)

    def solve(rhs):
        Y = _schur_solve(T, U, U.conj().T @ rhs @ U)
        return sym((U @ Y @ U.conj().T).real)

    P = solve(Q)
    if refine:
        R = A.T @ P + P @ A + Q
        P = sym(P + solve(R))
    return P


def lyapunov_residual(A, P, Q=None) -> float:
    A = np.atleast_2d(A)
    Q = np.eye(A.shape[0]) if Q is None else Q
    return float(np.abs(A.T @ P + P @ A + Q).max())


# ---------------------------------------------------------------------------
# stabilizability and LQR


def unstable_modes(A, tol: float = 1e-9) -> np.ndarray:
    w = np.linalg.eigvals(np.atleast_2d(A))
    return w[w.real >= -tol]


def pbh_check(A, B, tol: float = 1e-9) -> None:
    """Raise :class:`NotStabilizableError` if some mode with ``Re >= -tol`` is not controllable."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.asarray(B, dtype=float).reshape(A.shape[0], -1)
    n = A.shape[0]
    for lam in unstable_modes(A, tol):
        test = np.hstack([A - lam * np.eye(n), B.astype(complex)])
        smin = np.linalg.svd(test, compute_uv=False)[-1] if n else 1.0
        if smin < tol:
            raise NotStabilizableError(lam)


def bass_gain(A, B, shift: float = 1.0) -> np.ndarray:
    """Stabilizing gain ``K`` (closed loop ``A + B K``) by the eigenvalue-shifting method.

    With ``beta`` large enough that ``-(A + beta I)`` is Hurwitz, ``Z`` solves
    ``(A + beta I) Z + Z (A + beta I)^T = 2 B B^T`` and ``K = -B^T Z^+``.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.asarray(B, dtype=float).reshape(A.shape[0], -1)
    n = A.shape[0]
    beta = max(0.0, -float(np.min(np.linalg.eigvals(A).real))) + shift
    M = -A - beta * np.eye(n)
    Z = lyapunov_solve(M.T, 2.0 * B @ B.T)
    return -B.T @ np.linalg.pinv(Z, rcond=1e-10, hermitian=True)


def lqr_newton_kleinman(A, B, Q=None, R=None, *, K0=None, max_iter: int = 100,
                        rtol: float = 1e-13) -> tuple:
    """Stabilizing solution of ``A^T P + P A - P B R^-1 B^T P + Q = 0``.

    Newton-Kleinman iteration from a stabilizing gain ``K0`` (zero if ``A`` is
    already Hurwitz, otherwise :func:`bass_gain`). Returns ``(P, K)`` with the
    optimal feedback ``u = K x``, ``K = -R^-1 B^T P``.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    n = A.shape[0]
    B = np.asarray(B, dtype=float).reshape(n, -1)
    m = B.shape[1]
    Q = np.eye(n) if Q is None else np.atleast_2d(Q)
    R = np.eye(m) if R is None else np.atleast_2d(R)
    Rinv = np.linalg.inv(R)
    if K0 is None:
        K0 = np.zeros((m, n)) if spectral_abscissa(A) < -1e-9 else bass_gain(A, B)
    K = np.atleast_2d(K0)
    if spectral_abscissa(A + B @ K) >= 0:
        raise ConvergenceError("initial gain does not stabilize A + B K")
    P_prev = None
    for _ in range(max_iter):
        P = lyapunov_solve(A + B @ K, Q + K.T @ R @ K)
        K = -Rinv @ B.T @ P
        if P_prev is not None and np.abs(P - P_prev).max() <= rtol * max(1.0, np.abs(P).max()):
            break
        P_prev = P
    res = np.abs(A.T @ P + P @ A - P @ B @ Rinv @ B.T @ P + Q).max()
    if not res <= 1e-8 * max(1.0, np.abs(P).max()) ** 2:
        raise ConvergenceError(f"Riccati iteration did not converge (residual {res:.3g})")
    return P, K


# ---------------------------------------------------------------------------
# exponential bounds


def exp_growth_bound(M) -> tuple:
    """Constants ``(beta, nu, n)`` with ``|exp(M s)|_2 <= exp(beta s) sum_{k<n} (nu s)^k / k!``.

    ``beta`` is the spectral abscissa and ``nu`` the Frobenius norm of the
    strictly upper part of the complex Schur form of ``M`` (s >= 0).
    """
    M = np.atleast_2d(np.asarray(M, dtype=float))
    T, _ = scipy.linalg.schur(M, output="complex")
    beta = float(np.diag(T).real.max())
    nu = float(np.linalg.norm(np.triu(T, 1)))
    return beta, nu, M.shape[0]


def exp_bound(M, s: float) -> float:
    beta, nu, n = exp_growth_bound(M)
    poly = sum((nu * s) ** k / math.factorial(k) for k in range(n))
    return math.exp(beta * s) * poly


def tail_bound(M, start: float, h0: float, gamma: float, growth: tuple | None = None) -> float:
    """Bound on ``int_start^inf |exp(M s)| h0 exp(-gamma (s - start)) ds``.

    Returns ``inf`` when ``gamma`` does not exceed the growth rate of ``exp(M s)``.
    ``growth`` may carry precomputed :func:`exp_growth_bound` constants.
    """
    if h0 == 0.0:
        return 0.0
    beta, nu, n = growth if growth is not None else exp_growth_bound(M)
    c = gamma - beta
    if not c > 0:
        return math.inf
    # substitute s = start + tau and expand (start + tau)^k binomially
    total = 0.0
    for k in range(n):
        inner = sum(math.comb(k, j) * start ** (k - j) * math.factorial(j) / c ** (j + 1) for j in range(k + 1))
        total += nu ** k / math.factorial(k) * inner
    log_val = math.log(h0) + beta * start + math.log(total)
    return math.exp(log_val) if log_val < 700 else math.inf
