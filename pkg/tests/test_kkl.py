import csv
import json
import math

import numpy as np
import pytest
import scipy.integrate

from koopcontract import expr as ex
from koopcontract.dynamics import integrate, parse_system
from koopcontract.errors import NotStableError, PreconditionError, TailNotConvergedError
from koopcontract.grid import SampleBox
from koopcontract.kkl import (ball_entry_time, build_phi0, build_remainder, kkl_defect, kkl_T, kkl_T_tv,
                              semiglobal_redesign)

CUBIC = "n=1; f1 = -x1 - x1^3"


def cubic_T(x):
    # phi0 = x / sqrt(1 + x^2) solves phi0' f = -phi0 with phi0'(0) = 1
    return x / np.sqrt(1 + x ** 2) - x


def dop853_T(x0, horizon=40.0):
    # T(x) = -int_0^inf e^{s} X(s)^3 ds as an augmented ODE, adaptive 8th-order integrator
    sol = scipy.integrate.solve_ivp(lambda s, y: [-y[0] - y[0] ** 3, math.exp(s) * y[0] ** 3],
                                    (0.0, horizon), [x0, 0.0], method="DOP853", rtol=1e-12, atol=1e-14)
    return -sol.y[1, -1]


def test_remainder_of_cubic():
    rem = build_remainder(parse_system(CUBIC))
    assert rem.F_star[0, 0] == -1.0 and rem.x_star[0] == 0.0
    xs = np.linspace(-2, 2, 9)[:, None]
    np.testing.assert_allclose(rem.h(xs), xs ** 3, atol=1e-15)
    assert rem.vanishing == (0.0, 0.0)


def test_remainder_of_linear_system_is_zero():
    rem = build_remainder(parse_system("n=2; f1 = -x1 + x2; f2 = -3*x2"))
    assert all(h == ex.ZERO for h in rem.H)
    value, tail = kkl_T(rem, [0.7, -1.2])
    assert np.all(value == 0.0) and tail == 0.0


def test_unstable_linearization():
    with pytest.raises(NotStableError):
        build_remainder(parse_system("n=1; f1 = x1"))


def test_controlled_rejected():
    with pytest.raises(PreconditionError):
        build_remainder(parse_system("n=1; m=1; f1 = -x1 + u1"))


def test_T_at_one_matches_two_oracles():
    rem = build_remainder(parse_system(CUBIC))
    value, tail = kkl_T(rem, [1.0], T_h=40.0, dt=1e-3)
    assert tail <= 1e-8
    assert abs(value[0] - dop853_T(1.0)) <= 1e-6
    assert value[0] == pytest.approx(cubic_T(1.0), abs=1e-10)
    assert cubic_T(1.0) == pytest.approx(-0.29289321881345, abs=1e-13)


def test_T_at_equilibrium():
    value, _ = kkl_T(build_remainder(parse_system(CUBIC)), [0.0])
    assert abs(value[0]) <= 1e-10


def test_batch_matches_single():
    rem = build_remainder(parse_system(CUBIC))
    batch, tails = kkl_T(rem, [[-1.5], [0.5]], T_h=40.0)
    np.testing.assert_allclose(batch[:, 0], cubic_T(np.array([-1.5, 0.5])), atol=1e-10)
    assert tails.shape == (2,)


def test_short_horizon_tail():
    with pytest.raises(TailNotConvergedError) as info:
        kkl_T(build_remainder(parse_system(CUBIC)), [1.0], T_h=2.0)
    assert info.value.estimate > 1e-8


def test_shifted_equilibrium():
    sys = parse_system("n=1; f1 = -(x1 - 1) - (x1 - 1)^3")
    rem = build_remainder(sys, [0.5])
    assert rem.x_star[0] == pytest.approx(1.0, abs=1e-10)
    value, tail = kkl_T(rem, [2.0], T_h=40.0)
    assert value[0] == pytest.approx(cubic_T(1.0), abs=1e-9) and tail <= 1e-8


def test_resonant_spectrum_does_not_converge(polyflow):
    # eigenvalues -1 and -2 = 2 * (-1): the remainder integral grows linearly in the horizon
    rem = build_remainder(polyflow[0])
    with pytest.raises(TailNotConvergedError):
        kkl_T(rem, [1.0, 0.0], T_h=40.0)


FORCED = "n=1; f1 = -x1 + sin(t)"


def forced_T0(t):
    # H = -sin t does not depend on x; int_0^t e^{-(t-s)} (-sin s) ds in closed form
    return -(math.sin(t) - math.cos(t) + math.exp(-t)) / 2


def forced_T0_dop853(x, t):
    # d/ds T(X(s), s) = A T + H along the forward trajectory through (x, t), T = 0 at s = 0
    back = scipy.integrate.solve_ivp(lambda s, y: [-y[0] + math.sin(s)], (t, 0.0), [x], method="DOP853",
                                     rtol=1e-12, atol=1e-14)
    x0 = back.y[0, -1]
    fwd = scipy.integrate.solve_ivp(lambda s, y: [-y[0] + math.sin(s), -y[1] + (y[0] - math.sin(s) - y[0])],
                                    (0.0, t), [x0, 0.0], method="DOP853", rtol=1e-12, atol=1e-14)
    return fwd.y[1, -1]


def test_time_varying_forced():
    rem = build_remainder(parse_system(FORCED), strict=False)
    assert rem.vanishing[0] > 0  # forced: no equilibrium at the origin
    value, tail = kkl_T_tv(rem, [0.0], 5.0)
    assert value[0] == pytest.approx(forced_T0(5.0), abs=1e-10)
    assert abs(value[0] - forced_T0_dop853(0.0, 5.0)) <= 1e-6
    assert tail == 0.0


def test_time_varying_strict_rejects_forcing():
    with pytest.raises(PreconditionError):
        build_remainder(parse_system(FORCED))


def test_time_varying_at_zero_time():
    rem = build_remainder(parse_system(FORCED), strict=False)
    value, tail = kkl_T_tv(rem, [1.3], 0.0)
    assert value[0] == 0.0 and tail == 0.0


def test_time_varying_linear():
    rem = build_remainder(parse_system("kind = time-varying\nn=1\nf1 = -x1"))
    assert rem.time_varying and all(h == ex.ZERO for h in rem.H)
    value, tail = kkl_T_tv(rem, [1.0], 3.0)
    assert value[0] == 0.0 and tail == 0.0


def test_time_varying_truncated_lower_limit():
    rem = build_remainder(parse_system(FORCED), strict=False)
    value, tail = kkl_T_tv(rem, [0.0], 50.0, horizon=40.0)
    assert 0 < tail <= 1e-8
    assert value[0] == pytest.approx(forced_T0(50.0), abs=1e-8)


def test_cubic_table(cubic_kkl):
    _, rem, sol, report = cubic_kkl
    x = sol.box.points()[:, 0]
    np.testing.assert_allclose(sol.table[:, 0], cubic_T(x), atol=1e-8)
    assert report.max_abs_residual <= 1e-4 and report.verdict
    assert report.extra["grid_check_gap"] is not None
    assert np.all(np.diff(sol.node_phi0()[:, 0]) > 0)  # strictly monotone, hence injective
    assert np.all(sol.jacobian(sol.box.points())[:, 0, 0] > 0)
    assert abs(sol.T(np.array([0.0]))[0]) <= 1e-8


def test_cubic_near_identity(cubic_kkl):
    _, _, sol, _ = cubic_kkl
    ball = np.linspace(-0.1, 0.1, 81)[:, None]
    J = sol.jacobian(ball)
    assert np.abs(J - 1.0).max() <= 0.1
    assert np.abs(J).min() >= 0.5


def test_cubic_semigroup(cubic_kkl):
    sys, rem, sol, _ = cubic_kkl
    x0 = np.linspace(-1.9, 1.9, 39)[:, None]
    traj = integrate(sys, x0, horizon=5.0, dt=1e-3)
    phi = sol.phi0(traj.states)
    expected = np.exp(-traj.times)[:, None, None] * sol.phi0(x0)[None]
    assert np.abs(phi - expected).max() <= 1e-4


def test_cubic_kkl_defect(cubic_kkl):
    _, _, sol, _ = cubic_kkl
    assert kkl_defect(sol, np.linspace(-1.9, 1.9, 20)[:, None], horizon=5.0) <= 1e-4


def test_cubic_redesign(cubic_kkl):
    _, rem, sol, _ = cubic_kkl
    x = np.linspace(-2, 2, 41)[:, None]
    same = semiglobal_redesign(rem, sol, 0.0)
    np.testing.assert_array_equal(same(x), sol.phi0(x))
    redesigned = semiglobal_redesign(rem, sol, 3.0)
    assert np.abs(redesigned(x) - sol.phi0(x)).max() <= 1e-5
    with pytest.raises(ValueError):
        semiglobal_redesign(rem, sol, -1.0)


def test_ball_entry(cubic_kkl):
    _, rem, sol, _ = cubic_kkl
    t = ball_entry_time(rem, sol.box, 0.1)
    # x(t) = 0.1 from x0 = 2 in closed form: t = log(x0 / x) + log(sqrt(1 + x^2) / sqrt(1 + x0^2))
    exact = math.log(20.0) + 0.5 * math.log(1.01 / 5.0)
    assert abs(t - exact) <= 1e-2


def test_wrong_matrix_is_reported(cubic_kkl):
    _, rem, _, _ = cubic_kkl
    sol, report = build_phi0(rem, SampleBox.parse("-2,2,101"), T_h=40.0, A=[[2.0]])
    # residual = |phi0' f - 2 phi0| = 3 |phi0|, worst at the box edge
    assert report.max_abs_residual == pytest.approx(3 * 2 / math.sqrt(5), rel=1e-3)
    assert not report.verdict


def test_linear_lifting_is_identity():
    rem = build_remainder(parse_system("n=1; f1 = -2*x1"))
    sol, report = build_phi0(rem, SampleBox.parse("-1,1,11"))
    assert np.all(sol.table == 0.0)
    assert report.max_abs_residual == 0.0 and report.rank_margin == 1.0


def test_two_dimensional_table():
    # x1' = -x1, x2' = -1.5 (x2 - x1^2) has phi0 = (x1, x2 + 3 x1^2), so T = (0, 3 x1^2)
    rem = build_remainder(parse_system("n=2; f1 = -x1; f2 = -1.5*(x2 - x1^2)"))
    box = SampleBox.parse("-1,1,21;-1,1,21")
    sol, report = build_phi0(rem, box, T_h=60.0, dt=1e-3)
    pts = box.points()
    np.testing.assert_allclose(sol.table.reshape(-1, 2), np.column_stack([0 * pts[:, 0], 3 * pts[:, 0] ** 2]),
                               atol=1e-8)
    assert report.max_abs_residual <= 1e-6 and report.verdict
    J = sol.jacobian(np.array([0.5, 0.25]))
    np.testing.assert_allclose(J, [[1, 0], [3.0, 1]], atol=1e-6)


def test_query_outside_box(cubic_kkl):
    with pytest.raises(PreconditionError):
        cubic_kkl[2].T(np.array([2.5]))


def test_export(tmp_path, cubic_kkl):
    _, _, sol, _ = cubic_kkl
    sol.export(tmp_path / "t.csv", tmp_path / "t.json")
    rows = list(csv.reader(open(tmp_path / "t.csv")))
    assert rows[0] == ["x1", "T1"] and len(rows) == 802
    assert float(rows[1][1]) == pytest.approx(cubic_T(-2.0), abs=1e-8)
    meta = json.load(open(tmp_path / "t.json"))
    assert set(meta) >= {"x_star", "F_star", "T_h", "dt", "tail_tol", "box"}


def test_threads_do_not_change_table():
    rem = build_remainder(parse_system(CUBIC))
    box = SampleBox.parse("-1,1,2001")
    a, _ = build_phi0(rem, box, T_h=20.0, dt=1e-2, tail_tol=1.0, grid_check=False)
    b, _ = build_phi0(rem, box, T_h=20.0, dt=1e-2, tail_tol=1.0, grid_check=False, threads=3)
    np.testing.assert_array_equal(a.table, b.table)
