import csv
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from koopcontract.dynamics import (SystemModel, eval_f, find_equilibrium, integrate, jacobian_u, jacobian_x,
                                   parse_system, step_count)
from koopcontract.errors import (BlowUpError, ConvergenceError, DimensionError, DomainError, PreconditionError,
                                 UnknownSymbolError)
from koopcontract.fixtures import FIXTURES, load_fixture


def test_parse_scalar():
    sys = parse_system("n=1; f1 = -x1")
    assert sys.kind == "autonomous" and sys.n == 1 and sys.m == 0


def test_parse_polyflow_and_evaluate():
    sys = parse_system("n=2; f1 = -x1; f2 = -2*(x2 - x1^2)")
    assert sys.kind == "autonomous"
    np.testing.assert_array_equal(eval_f(sys, [1.0, 1.0]), [-1.0, 0.0])


def test_unknown_symbol():
    with pytest.raises(UnknownSymbolError):
        parse_system("n=2; f1 = -x3; f2 = x1")


def test_missing_component():
    with pytest.raises(DimensionError):
        parse_system("n=2; f1 = -x1")


def test_kind_consistency():
    with pytest.raises(Exception):
        parse_system("kind = autonomous\nn=1\nf1 = -x1 + t")
    assert parse_system("n=1; f1 = sin(t) - x1").kind == "time-varying"
    assert parse_system("n=1; m=1; f1 = u1").kind == "controlled"


def test_eval_examples():
    assert eval_f(parse_system("n=1; f1=-x1"), [2.0])[0] == -2.0
    with pytest.raises(DomainError):
        eval_f(parse_system("n=1; f1 = x1/x1"), [0.0])
    with pytest.raises(DimensionError):
        eval_f(parse_system("n=1; f1=-x1"), [1.0, 2.0])


def test_jacobian_examples():
    assert jacobian_x(parse_system("n=1; f1=-x1"), [0.3])[0, 0] == -1.0
    sys = parse_system("n=2; f1 = -x1; f2 = -2*(x2 - x1^2)")
    np.testing.assert_array_equal(jacobian_x(sys, [1.0, 1.0]), [[-1, 0], [4, -2]])
    assert jacobian_x(parse_system("n=1; f1 = sin(x1)"), [0.0])[0, 0] == 1.0


def test_input_jacobian_examples():
    assert jacobian_u(parse_system("n=1; m=1; f1 = -x1 + u1"), [0.5], u=[0.1])[0, 0] == 1.0
    sys = parse_system("n=2; m=1; f1 = -x1; f2 = -2*(x2 - x1^2) + u1")
    np.testing.assert_array_equal(jacobian_u(sys, [0.2, 0.3], u=[1.0]), [[0], [1]])
    assert jacobian_u(parse_system("n=1; m=1; f1 = x1*u1"), [3.0], u=[0.0])[0, 0] == 3.0
    with pytest.raises(PreconditionError):
        jacobian_u(parse_system("n=1; f1=-x1"), [1.0])


def test_decay_matches_exponential():
    traj = integrate(parse_system("n=1; f1=-x1"), [1.0], horizon=1.0, dt=1e-3)
    assert abs(traj.final[0] - math.exp(-1)) <= 1e-9
    assert traj.times[-1] == pytest.approx(1.0, abs=1e-12)


def test_constant_flow():
    traj = integrate(parse_system("n=1; f1=0"), [2.5], horizon=1.0, dt=0.1)
    assert np.all(traj.states == 2.5)


def test_finite_escape():
    with pytest.raises(BlowUpError) as info:
        integrate(parse_system("n=1; f1 = x1^2"), [2.0], horizon=1.0, dt=1e-3)
    assert 0.5 <= info.value.time <= 1.0


def test_zero_horizon_is_exact():
    x0 = np.array([0.1234567890123, -7.0])
    traj = integrate(parse_system("n=2; f1 = x2; f2 = -sin(x1)"), x0, horizon=0.0)
    assert len(traj.states) == 1
    assert np.array_equal(traj.final, x0)


def test_rk4_order():
    sys = parse_system("n=1; f1=-x1")
    errs = [abs(integrate(sys, [1.0], horizon=1.0, dt=dt).final[0] - math.exp(-1)) for dt in (0.1, 0.05)]
    assert 14 <= errs[0] / errs[1] <= 18


def test_step_count_lands_on_horizon():
    steps, h = step_count(1.0, 0.3)
    assert steps == 4 and steps * h == pytest.approx(1.0)
    with pytest.raises(ValueError):
        step_count(1.0, 0.0)


def test_batched_integration_matches_single():
    sys = parse_system("n=2; f1 = x2; f2 = -x1 - 0.1*x2")
    batch = integrate(sys, [[1.0, 0.0], [0.0, 1.0]], horizon=2.0, dt=1e-2)
    single = integrate(sys, [0.0, 1.0], horizon=2.0, dt=1e-2)
    np.testing.assert_array_equal(batch.select(1).states, single.states)


def test_input_policy_closes_loop():
    sys = parse_system("n=1; m=1; f1 = x1 + u1")
    traj = integrate(sys, [1.0], horizon=1.0, dt=1e-3, input_policy=lambda x, t: -2.0 * x)
    assert traj.final[0] == pytest.approx(math.exp(-1), abs=1e-9)
    np.testing.assert_allclose(traj.inputs, -2.0 * traj.states)


def test_csv_export(tmp_path):
    path = tmp_path / "traj.csv"
    integrate(parse_system("n=2; f1=-x1; f2=-x2"), [1.0, 2.0], horizon=0.01, dt=1e-3).to_csv(path)
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["t", "x1", "x2"]
    assert len(rows) == 12
    assert float(rows[-1][1]) == pytest.approx(math.exp(-0.01), abs=1e-12)


@pytest.mark.parametrize("f, guess, expected", [
    ("-x1 - x1^3", 1.0, 0.0),
    ("-(x1 - 3)", 0.0, 3.0),
])
def test_equilibrium(f, guess, expected):
    x = find_equilibrium(parse_system(f"n=1; f1 = {f}"), [guess])
    assert abs(x[0] - expected) <= 1e-10


def test_no_equilibrium():
    with pytest.raises(ConvergenceError):
        find_equilibrium(parse_system("n=1; f1 = 1"), [0.0])


def test_equilibrium_requires_autonomous():
    with pytest.raises(PreconditionError):
        find_equilibrium(parse_system("n=1; f1 = -x1 + sin(t)"))


@pytest.mark.parametrize("name", sorted(FIXTURES))
def test_jacobians_match_central_differences(name):
    sys, _ = load_fixture(name)
    rng = np.random.default_rng(7)
    h = 1e-6
    for _ in range(100):
        x = rng.uniform(-2, 2, sys.n)
        t = rng.uniform(0, 5)
        u = rng.uniform(-2, 2, sys.m) if sys.m else None
        F = jacobian_x(sys, x, t, u)
        fd = np.stack([(eval_f(sys, x + h * e, t, u) - eval_f(sys, x - h * e, t, u)) / (2 * h)
                       for e in np.eye(sys.n)], axis=-1)
        np.testing.assert_allclose(F, fd, atol=1e-6)
        if sys.m:
            G = jacobian_u(sys, x, t, u)
            fdu = np.stack([(eval_f(sys, x, t, u + h * e) - eval_f(sys, x, t, u - h * e)) / (2 * h)
                            for e in np.eye(sys.m)], axis=-1)
            np.testing.assert_allclose(G, fdu, atol=1e-6)


@given(st.floats(-3, 3), st.floats(-3, 3))
def test_text_round_trip(a, b):
    sys = SystemModel.from_strings(["-x1 + x2^2", "sin(x1) - 2*x2"])
    again = parse_system(sys.to_text())
    x = np.array([a, b])
    np.testing.assert_array_equal(eval_f(sys, x), eval_f(again, x))
