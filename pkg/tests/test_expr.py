import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from koopcontract import expr as ex
from koopcontract.errors import DomainError, ExprSyntaxError, UnknownSymbolError


def ev(source, **values):
    e = ex.parse_expr(source)
    n = max([int(k[1:]) for k in values if k.startswith("x")] or [1])
    x = np.array([values.get(f"x{i + 1}", 0.0) for i in range(n)])
    return float(ex.compile_exprs([e], n)(x, values.get("t", 0.0))[0])


@pytest.mark.parametrize("source, expected", [
    ("-x1^2", -9.0),            # unary minus binds looser than ^
    ("2^3^2", 512.0),           # right associative
    ("x1**2", 9.0),
    ("8/2/2", 2.0),
    ("1 - 2 - 3", -4.0),
    ("2*pi", 2 * math.pi),
    ("-(x1 - 3)", 0.0),
    ("sqrt(x1 + 1) * exp(0)", 2.0),
    ("2^-1", 0.5),
])
def test_precedence(source, expected):
    assert ev(source, x1=3.0) == pytest.approx(expected, abs=1e-15)


def test_syntax_error_has_position():
    with pytest.raises(ExprSyntaxError) as info:
        ex.parse_expr("x1 + * 2")
    assert info.value.pos == 5


@pytest.mark.parametrize("source", ["x1 +", "(x1", "x1 $ 2", "x1 x2", ""])
def test_malformed(source):
    with pytest.raises(ExprSyntaxError):
        ex.parse_expr(source)


def test_unknown_symbols():
    with pytest.raises(UnknownSymbolError):
        ex.parse_expr("x3", ex.allowed_symbols(2))
    with pytest.raises(UnknownSymbolError):
        ex.parse_expr("foo(x1)")
    with pytest.raises(UnknownSymbolError):
        ex.parse_expr("y")


@pytest.mark.parametrize("source, point", [
    ("x1 / x1", 0.0), ("log(x1)", -1.0), ("sqrt(x1)", -1.0), ("x1^0.5", -4.0), ("x1^-1", 0.0),
])
def test_domain_errors(source, point):
    with pytest.raises(DomainError):
        ev(source, x1=point)


def test_integer_power_of_negative_base_is_fine():
    assert ev("x1^3", x1=-2.0) == -8.0


def test_derivative_table():
    x = ex.Var("x1")
    cases = {
        "sin(x1)": "cos(x1)",
        "exp(2*x1)": "2*exp(2*x1)",
        "x1^3": "3*x1^2",
        "log(x1)": "1/x1",
        "tanh(x1)": "1 - tanh(x1)^2",
        "sqrt(x1)": "0.5/sqrt(x1)",
    }
    pts = np.linspace(0.3, 2.0, 7)[:, None]
    for f, df in cases.items():
        got = ex.compile_exprs([ex.diff(ex.parse_expr(f), "x1")], 1)(pts)
        want = ex.compile_exprs([ex.parse_expr(df)], 1)(pts)
        np.testing.assert_allclose(got, want, rtol=1e-13, err_msg=f)
    assert ex.diff(x, "x2") == ex.ZERO


# random expression trees over x1, x2 that stay inside their domain on [0.5, 2]^2
leaves = st.one_of(
    st.sampled_from([ex.Var("x1"), ex.Var("x2")]),
    st.integers(-5, 5).map(lambda k: ex.Const(float(k))),
    st.sampled_from([ex.Const(0.5), ex.Const(-2.25)]),
)


def _extend(children):
    return st.one_of(
        st.tuples(st.sampled_from("+-*"), children, children).map(lambda a: ex.BinOp(*a)),
        children.map(ex.Neg),
        st.tuples(children, st.integers(0, 3)).map(lambda a: ex.BinOp("^", a[0], ex.Const(float(a[1])))),
        st.tuples(st.sampled_from(["sin", "cos", "tanh"]), children).map(lambda a: ex.Call(*a)),
    )


exprs = st.recursive(leaves, _extend, max_leaves=12)


@given(exprs)
def test_print_parse_round_trip(e):
    text = ex.to_string(e)
    again = ex.parse_expr(text)
    pts = np.array([[0.7, 1.3], [1.9, 0.6], [-1.1, 0.2]])
    a = ex.compile_exprs([e], 2)(pts)
    b = ex.compile_exprs([again], 2)(pts)
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12, err_msg=text)
    # printing is a fixed point after one parse
    assert ex.to_string(ex.parse_expr(ex.to_string(again))) == ex.to_string(again)


@given(exprs, st.floats(0.5, 2.0), st.floats(0.5, 2.0))
def test_symbolic_gradient_matches_central_differences(e, a, b):
    f = ex.compile_exprs([e], 2)
    g = ex.compile_exprs(ex.gradient(e, ["x1", "x2"]), 2)
    x = np.array([a, b])
    h = 1e-6
    fd = [(f(x + h * d)[0] - f(x - h * d)[0]) / (2 * h) for d in np.eye(2)]
    scale = max(1.0, float(np.abs(g(x)).max()))
    np.testing.assert_allclose(g(x), fd, atol=1e-6 * scale)


@given(exprs)
def test_substitute_identity(e):
    same = ex.substitute(e, {"x1": ex.Var("x1")})
    pts = np.array([[0.8, 1.1]])
    np.testing.assert_allclose(ex.compile_exprs([same], 2)(pts), ex.compile_exprs([e], 2)(pts), rtol=1e-14)


def test_compile_broadcasts_constants_and_time():
    fn = ex.compile_exprs([ex.parse_expr("2"), ex.parse_expr("x1*t")], 1)
    out = fn(np.array([[1.0], [2.0], [3.0]]), np.array([1.0, 2.0, 3.0]))
    np.testing.assert_array_equal(out, [[2, 1], [2, 4], [2, 9]])


def test_free_symbols():
    assert ex.free_symbols(ex.parse_expr("x1*sin(t) + u2")) == {"x1", "t", "u2"}
