import numpy as np
import pytest
from hypothesis import given, strategies as st

from koopcontract.contraction import (MetricField, ccm_check, chain_identity_error, contraction_check,
                                      incremental_convergence_test, load_metric, metric_from_lifting, parse_metric)
from koopcontract.dynamics import parse_system
from koopcontract.errors import PreconditionError
from koopcontract.grid import SampleBox
from koopcontract.koopman import Lifting
from koopcontract.linalg import lyapunov_solve

LINE = SampleBox.parse("-2,2,41")
UNIT = MetricField.closed_form([["1"]])


def test_boundary_case_margin_zero():
    sys = parse_system("n=1; f1 = -x1")
    rep = contraction_check(sys, UNIT, LINE, rho=2.0, eps=0.0)
    assert rep.min_margin == 0.0 and rep.verdict
    assert not contraction_check(sys, UNIT, LINE, rho=2.0, eps=1e-9).verdict


def test_cubic_margin_table():
    sys = parse_system("n=1; f1 = -x1 - x1^3")
    rep = contraction_check(sys, UNIT, LINE, rho=2.0, eps=0.0, keep_table=True)
    x = LINE.points()[:, 0]
    np.testing.assert_allclose(rep.margins, -6 * x ** 2, atol=1e-14)
    assert rep.verdict and rep.worst_point == [pytest.approx(0.0, abs=1e-15)]


@pytest.mark.parametrize("rho", [0.5, 1.0, 3.0])
def test_expanding_fails(rho):
    rep = contraction_check(parse_system("n=1; f1 = x1"), UNIT, LINE, rho=rho, eps=0.0)
    assert rep.min_margin == pytest.approx(2 + rho) and not rep.verdict


def test_time_varying_metric_and_system():
    # M = e^{t}: dM/dt + 2 F M + rho M = (1 - 2 + rho) e^t
    sys = parse_system("n=1; f1 = -x1 + sin(t)")
    M = MetricField.closed_form([["exp(t)"]], time_varying=True)
    box = SampleBox.parse("-1,1,5", time="0,2,5")
    rep = contraction_check(sys, M, box, rho=0.5, eps=0.0)
    assert rep.min_margin == pytest.approx(-0.5) and len(rep.worst_point) == 2
    with pytest.raises(PreconditionError):
        contraction_check(sys, M, LINE, rho=0.5)


def test_metric_from_scalar_lifting():
    metric, rep = metric_from_lifting(parse_system("n=1; f1 = -x1"), Lifting(1, ("x1",), [[-1]]), LINE)
    assert metric.P[0, 0] == pytest.approx(0.5) and metric.rho == pytest.approx(2.0)
    np.testing.assert_allclose(metric([[0.3]]), [[[0.5]]])
    assert abs(rep.min_margin) <= 1e-15 and rep.verdict
    assert rep.a1 == pytest.approx(0.5)


def direct_margin(P, rho, x):
    # hand-coded Jacobians of the polyflow fixture and its lifting (x1, x2, x1^2)
    x1, x2 = x
    F = np.array([[-1.0, 0.0], [4 * x1, -2.0]])
    f1 = -x1
    Phi = np.array([[1.0, 0.0], [0.0, 1.0], [2 * x1, 0.0]])
    dPhi = np.array([[0.0, 0.0], [0.0, 0.0], [2 * f1, 0.0]])
    M = Phi.T @ P @ Phi
    Md = dPhi.T @ P @ Phi + Phi.T @ P @ dPhi
    lhs = Md + F.T @ M + M @ F + rho * M
    return np.linalg.eigvalsh(0.5 * (lhs + lhs.T))[-1]


def test_polyflow_metric_matches_direct_evaluation(polyflow):
    sys, L = polyflow
    box = SampleBox.parse("-3,3,21;-3,3,21")
    metric, rep = metric_from_lifting(sys, L, box)
    P = metric.P
    assert metric.rho == pytest.approx(1.0 / np.linalg.eigvalsh(P)[-1])
    direct = max(direct_margin(P, metric.rho, x) for x in box.points())
    assert rep.min_margin == pytest.approx(direct, abs=1e-12)
    assert rep.verdict and rep.a1 > 0
    for mode in ("identity", "symbolic"):
        again = contraction_check(sys, metric, box, eps=0.0, mdot=mode)
        assert again.verdict


def test_rank_deficient_metric_fails():
    sys = parse_system("n=1; f1 = -x1")
    metric, rep = metric_from_lifting(sys, Lifting(1, ("x1^2",), [[-2]]), LINE)
    np.testing.assert_array_equal(metric([[0.0]]), [[[0.0]]])
    assert rep.a1 == 0.0 and not rep.verdict


def test_failed_lifting_is_a_precondition_error(polyflow):
    sys, L = polyflow
    A = L.A.copy()
    A[1, 2] = 0.0
    with pytest.raises(PreconditionError):
        metric_from_lifting(sys, L.with_A(A), SampleBox.parse("-1,1,5;-1,1,5"))


def test_chain_identity(polyflow):
    sys, L = polyflow
    metric = MetricField.from_lifting(L, lyapunov_solve(L.A))
    pts = np.random.default_rng(2).uniform(-3, 3, (500, 2))
    assert chain_identity_error(sys, metric, pts) <= 1e-6


@given(st.floats(0.01, 100.0))
def test_scaling_covariance(c):
    from koopcontract.fixtures import load_fixture
    sys, L = load_fixture("polyflow")
    box = SampleBox.parse("-2,2,7;-2,2,7")
    P = lyapunov_solve(L.A)
    rho = 1.0 / np.linalg.eigvalsh(P)[-1]
    base = contraction_check(sys, MetricField.from_lifting(L, P), box, rho, 0.0, keep_table=True)
    scaled = contraction_check(sys, MetricField.from_lifting(L, c * P), box, rho, 0.0, keep_table=True)
    np.testing.assert_allclose(scaled.margins, c * base.margins, rtol=1e-9, atol=1e-12 * c)
    assert scaled.verdict == base.verdict


def test_metric_is_psd_and_pd_where_rank_full(polyflow):
    _, L = polyflow
    metric = MetricField.from_lifting(L, lyapunov_solve(L.A))
    pts = SampleBox.parse("-3,3,31;-3,3,31").points()
    assert np.linalg.eigvalsh(metric(pts))[:, 0].min() > 0


def test_metric_text_round_trip(tmp_path, polyflow):
    _, L = polyflow
    (tmp_path / "lift.txt").write_text(L.to_text())
    (tmp_path / "m.txt").write_text("n = 2\nrho = 0.5\nlifting = lift.txt\nP = lyapunov\n")
    metric = load_metric(tmp_path / "m.txt")
    np.testing.assert_allclose(metric.P, lyapunov_solve(L.A))
    closed = parse_metric("n = 2\nM11 = 1 + x2^2\nM12 = x1\nM22 = 2\n")
    np.testing.assert_array_equal(closed([[1.0, 3.0]])[0], [[10, 1], [1, 2]])
    with pytest.raises(ValueError):
        MetricField.closed_form([["1", "x1"], ["x2", "1"]])


@pytest.mark.parametrize("gain, margin, verdict", [("-2", -2.0, True), ("0", 2.0, False)])
def test_ccm_scalar(gain, margin, verdict):
    sys = parse_system("n=1; m=1; f1 = x1 + u1")
    rep = ccm_check(sys, UNIT, [[gain]], LINE, SampleBox.parse("-1,1,3"))
    assert rep.min_margin == pytest.approx(margin) and rep.verdict == verdict


def test_incremental_linear():
    sys = parse_system("n=1; f1 = -x1")
    rep = incremental_convergence_test(sys, [[1.0, 0.0]], rho=1.0, horizon=5.0)
    assert rep.k0 == pytest.approx(1.0, abs=1e-9)
    assert rep.empirical_rate == pytest.approx(1.0, abs=1e-9) and rep.bound_holds
    fast = incremental_convergence_test(sys, [[1.0, 0.0]], rho=2.0, horizon=5.0)
    assert fast.k0 == pytest.approx(np.exp(5.0), rel=1e-6) and not fast.bound_holds


def test_incremental_identical_pair():
    rep = incremental_convergence_test(parse_system("n=1; f1 = -x1"), [[0.7, 0.7]], rho=2.0)
    assert rep.k0 == 0.0 and rep.finite


def test_incremental_cubic():
    sys = parse_system("n=1; f1 = -x1 - x1^3")
    pairs = [[a, b] for a in np.linspace(-2, 2, 5) for b in np.linspace(-2, 2, 5) if a != b]
    rep = incremental_convergence_test(sys, pairs, rho=2.0, horizon=5.0, dt=1e-2)
    assert rep.finite
    # distances decay at least at the linearization rate 1 at the origin
    assert rep.empirical_rate >= 1.0 - 1e-3
