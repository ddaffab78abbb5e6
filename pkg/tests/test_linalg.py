import math
import warnings

import numpy as np
import pytest
import scipy.integrate
import scipy.linalg
from hypothesis import given, strategies as st

from koopcontract.errors import NotStabilizableError, NotStableError
from koopcontract.linalg import (bass_gain, exp_bound, lqr_newton_kleinman, lyapunov_residual, lyapunov_solve,
                                 pbh_check, spectral_abscissa, tail_bound)


def kron_lyapunov(A):
    # vec(A^T P + P A) = (I kron A^T + A^T kron I) vec(P)
    n = A.shape[0]
    K = np.kron(np.eye(n), A.T) + np.kron(A.T, np.eye(n))
    return np.linalg.solve(K, -np.eye(n).ravel()).reshape(n, n)


def test_lyapunov_identity():
    np.testing.assert_allclose(lyapunov_solve(-np.eye(2)), 0.5 * np.eye(2), atol=1e-15)


def test_lyapunov_triangular_example():
    A = np.array([[-1.0, 1.0], [0.0, -2.0]])
    P = lyapunov_solve(A)
    # hand solution of the three scalar equations gives P22 = 1/3
    np.testing.assert_allclose(P, [[0.5, 1 / 6], [1 / 6, 1 / 3]], atol=1e-14)
    assert lyapunov_residual(A, P) <= 1e-10


def test_marginal_stability_rejected():
    with pytest.raises(NotStableError):
        lyapunov_solve([[0.0, 1.0], [-1.0, 0.0]])
    with pytest.raises(NotStableError):
        lyapunov_solve([[0.5]])


@st.composite
def stable_matrices(draw):
    n = draw(st.integers(1, 12))
    seed = draw(st.integers(0, 2 ** 32 - 1))
    shift = draw(st.floats(0.1, 3.0))
    R = np.random.default_rng(seed).normal(size=(n, n))
    return R - (spectral_abscissa(R) + shift) * np.eye(n)


@given(stable_matrices())
def test_lyapunov_random(A):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        P = lyapunov_solve(A)
    scale = max(1.0, np.abs(P).max())
    assert lyapunov_residual(A, P) <= 1e-10 * scale
    assert np.linalg.eigvalsh(P)[0] > 0
    np.testing.assert_array_equal(P, P.T)
    np.testing.assert_allclose(P, kron_lyapunov(A), rtol=1e-8, atol=1e-10 * scale)


def test_general_right_hand_side():
    A = np.array([[-2.0, 1.0, 0.0], [0.0, -1.0, 3.0], [0.5, 0.0, -4.0]])
    Q = np.diag([1.0, 2.0, 3.0])
    P = lyapunov_solve(A, Q)
    assert lyapunov_residual(A, P, Q) <= 1e-12
    np.testing.assert_allclose(P, scipy.linalg.solve_continuous_lyapunov(A.T, -Q), atol=1e-12)


def test_pbh():
    pbh_check([[1.0]], [[1.0]])
    pbh_check([[-1.0]], [[0.0]])  # stable uncontrollable mode is fine
    with pytest.raises(NotStabilizableError) as info:
        pbh_check([[1.0, 0.0], [0.0, -1.0]], [[0.0], [1.0]])
    assert info.value.eigenvalue == pytest.approx(1.0)


@pytest.mark.parametrize("A, B", [
    ([[1.0]], [[1.0]]),
    ([[-1, 0, 0], [0, 2, -2], [0, 0, -2]], [[0], [1], [0]]),
    ([[0.0, 1.0], [2.0, -1.0]], [[0.0], [1.0]]),
    ([[1.0, 2.0], [0.0, 3.0]], [[1.0, 0.0], [0.0, 1.0]]),
])
def test_lqr_matches_care(A, B):
    A = np.array(A, dtype=float)
    B = np.array(B, dtype=float)
    P, K = lqr_newton_kleinman(A, B)
    want = scipy.linalg.solve_continuous_are(A, B, np.eye(len(A)), np.eye(B.shape[1]))
    np.testing.assert_allclose(P, want, atol=1e-9)
    np.testing.assert_allclose(K, -B.T @ want, atol=1e-9)
    assert spectral_abscissa(A + B @ K) < 0


def test_scalar_lqr_closed_form():
    _, K = lqr_newton_kleinman([[1.0]], [[1.0]])
    assert K[0, 0] == pytest.approx(-(1 + math.sqrt(2)), abs=1e-12)


def test_bass_gain_stabilizes():
    A = np.array([[1.0, 1.0], [0.0, 2.0]])
    B = np.array([[0.0], [1.0]])
    assert spectral_abscissa(A + B @ bass_gain(A, B)) < 0


def test_exp_bound_dominates_norm():
    M = np.array([[-1.0, 5.0], [0.0, -1.0]])
    for s in np.linspace(0, 10, 21):
        assert np.linalg.norm(scipy.linalg.expm(M * s), 2) <= exp_bound(M, s) * (1 + 1e-12)


def test_tail_bound_scalar_is_exact():
    # int_start^inf e^{-s} h0 e^{-gamma (s - start)} ds = h0 e^{-start} / (1 + gamma)
    assert tail_bound([[-1.0]], 2.0, 3.0, 0.5) == pytest.approx(3.0 * math.exp(-2.0) / 1.5, rel=1e-14)
    assert tail_bound([[-1.0]], 2.0, 0.0, 0.5) == 0.0
    assert tail_bound([[1.0]], 0.0, 1.0, 0.5) == math.inf


def test_tail_bound_dominates_quadrature():
    M = np.array([[1.0, 4.0], [0.0, 0.5]])  # growing, gamma beats it
    start, h0, gamma = 1.5, 0.7, 3.0
    integrand = lambda s: np.linalg.norm(scipy.linalg.expm(M * s), 2) * h0 * math.exp(-gamma * (s - start))
    numeric, _ = scipy.integrate.quad(integrand, start, 60, limit=200)
    bound = tail_bound(M, start, h0, gamma)
    assert numeric <= bound <= 50 * numeric


@given(st.integers(0, 2 ** 32 - 1))
def test_bass_gain_random(seed):
    rng = np.random.default_rng(seed)
    n, m = rng.integers(1, 7), rng.integers(1, 3)
    A = 2 * rng.normal(size=(n, n))
    B = rng.normal(size=(n, m))
    assert spectral_abscissa(A + B @ bass_gain(A, B)) < 0
