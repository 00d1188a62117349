import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fpmv import expr as ex

CORPUS = [
    "1 + u^2/(1+u^2)",
    "tanh(u)",
    "2+sin(u)",
    "u/(1+u^2)",
    "1 + 0.5*sin(x1)/(1+u^2)",
    "exp(-x1^2)*cos(x2 - u)",
    "atan(3*u) - u^3 + x2^-2",
    "sqrt(1 + x1^2 + u^2)",
    "log(2 + u^2) * x1",
    "-(u - 1)^3 / (2 + cos(x1*x2))",
]


def test_parse_atoms_and_structure():
    assert ex.parse("u") == ex.Var("u")
    assert ex.parse("2+sin(u)") == ex.BinOp("+", ex.Num(2.0), ex.Call("sin", (ex.Var("u"),)))


def test_simple_value():
    assert ex.evaluate(ex.parse("1/(1+u^2)"), u=2.0) == pytest.approx(0.2, abs=1e-15)


@pytest.mark.parametrize("src, want", [
    ("2^3^2", 64.0),         # exponents are literals, so chains apply left to right
    ("-2^2", -4.0),          # power binds tighter than unary minus
    ("8/4/2", 1.0),          # left-associative division
    ("10-4-3", 3.0),
    ("2*3+4*5", 26.0),
    ("2^-1", 0.5),
    ("min(3, 1, 2)", 1.0),
    ("max(-1, -5)", -1.0),
])
def test_precedence(src, want):
    assert ex.evaluate(ex.parse(src)) == want


@pytest.mark.parametrize("src, x, u, wrt, want", [
    ("u^2", [], 3.0, "u", (9.0, 6.0)),
    ("sin(x1)", [0.0], 0.0, "x1", (0.0, 1.0)),
    ("u/(1+u^2)", [], 1.0, "u", (0.5, 0.0)),
])
def test_partials_examples(src, x, u, wrt, want):
    v, d = ex.eval_with_partial(ex.parse(src), x, u, wrt)
    assert (v, d) == pytest.approx(want, abs=1e-15)


def test_syntax_error_reports_offset_and_expected():
    with pytest.raises(ex.ExprSyntaxError) as info:
        ex.parse("1 + * u")
    assert info.value.offset == 4
    assert info.value.expected


def test_unknown_identifier():
    with pytest.raises(ex.UnknownIdentifier) as info:
        ex.parse("u + y", dim=1)
    assert info.value.name == "y"
    assert info.value.offset == 4
    with pytest.raises(ex.UnknownIdentifier):
        ex.parse("x3", dim=2)
    with pytest.raises(ex.UnknownIdentifier):
        ex.parse("foo(u)")


def test_fractional_exponent_rejected():
    with pytest.raises(ex.ExprSyntaxError):
        ex.parse("u^0.5")


@pytest.mark.parametrize("src, u", [("1/u", 0.0), ("sqrt(u)", -1.0), ("log(u)", 0.0),
                                    ("u^-1", 0.0)])
def test_domain_errors(src, u):
    with pytest.raises(ex.EvalDomainError) as info:
        ex.eval_with_partial(ex.parse(src), [], u, "u")
    assert info.value.subexpr is not None


@pytest.mark.parametrize("src", ["abs(u)", "min(u, 0)", "max(0, u)"])
def test_kink_flag_and_right_derivative(src):
    e = ex.parse(src)
    v, d, kink = ex.eval_with_partial(e, [], 0.0, "u", return_kink=True)
    assert kink
    right = (ex.evaluate(e, u=1e-9) - ex.evaluate(e, u=0.0)) / 1e-9
    assert d == pytest.approx(right, abs=1e-6)
    _, _, kink = ex.eval_with_partial(e, [], 0.5, "u", return_kink=True)
    assert not kink


def test_vectorized_matches_scalar():
    e = ex.parse(CORPUS[4])
    xs = np.linspace(-2, 2, 7)
    us = np.linspace(0, 3, 7)
    v, d = ex.eval_with_partial(e, [xs], us, "u")
    for k in range(7):
        vk, dk = ex.eval_with_partial(e, [xs[k]], us[k], "u")
        assert v[k] == vk and d[k] == dk


@pytest.mark.parametrize("src", CORPUS)
def test_round_trip(src):
    e = ex.parse(src)
    assert ex.parse(ex.unparse(e)) == e


@pytest.mark.parametrize("src", CORPUS)
def test_partials_match_central_differences(src):
    e = ex.parse(src)
    rng = np.random.default_rng(7)
    h = 1e-6
    for _ in range(100):
        x = list(rng.uniform(0.2, 1.5, 2))
        u = float(rng.uniform(0.1, 2.0))
        for wrt in ("u", "x1", "x2"):
            _, d = ex.eval_with_partial(e, x, u, wrt)
            if wrt == "u":
                fd = (ex.evaluate(e, x, u + h) - ex.evaluate(e, x, u - h)) / (2 * h)
            else:
                k = int(wrt[1]) - 1
                xp, xm = list(x), list(x)
                xp[k] += h
                xm[k] -= h
                fd = (ex.evaluate(e, xp, u) - ex.evaluate(e, xm, u)) / (2 * h)
            assert abs(d - fd) <= 1e-6 * (1 + abs(d))


def test_evaluation_is_pure():
    e = ex.parse(CORPUS[5])
    a = ex.eval_with_partial(e, [0.3, -0.7], 1.25, "x2")
    b = ex.eval_with_partial(e, [0.3, -0.7], 1.25, "x2")
    assert a == b


# random expression trees for the round-trip property
_leaf = st.one_of(
    st.builds(ex.Num, st.floats(0, 1e6, allow_nan=False).map(lambda v: float(repr(v)) if v else 0.0)),
    st.sampled_from([ex.Var("u"), ex.Var("x1"), ex.Var("x2")]),
)


def _extend(children):
    return st.one_of(
        st.builds(ex.Neg, children),
        st.builds(ex.BinOp, st.sampled_from("+-*/"), children, children),
        st.builds(ex.Pow, children, st.integers(-3, 4)),
        st.builds(lambda f, a: ex.Call(f, (a,)), st.sampled_from(["sin", "exp", "tanh", "abs"]),
                  children),
        st.builds(lambda a, b: ex.Call("max", (a, b)), children, children),
    )


@settings(max_examples=300, deadline=None)
@given(st.recursive(_leaf, _extend, max_leaves=12))
def test_unparse_parse_is_identity(e):
    assert ex.parse(ex.unparse(e)) == e


@settings(max_examples=100, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3))
def test_product_rule_property(x1, u):
    e = ex.parse("sin(x1*u) * exp(u)")
    _, d = ex.eval_with_partial(e, [x1], u, "u")
    want = x1 * math.cos(x1 * u) * math.exp(u) + math.sin(x1 * u) * math.exp(u)
    assert d == pytest.approx(want, rel=1e-12, abs=1e-12)
