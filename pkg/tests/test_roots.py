import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from emflow import roots, special
from emflow.errors import BracketError, ConvergenceError, DegenerateSecant


def count_calls(f):
    calls = {"n": 0}

    def wrapped(x):
        calls["n"] += 1
        return f(x)

    return wrapped, calls


def test_bracket_validation():
    with pytest.raises(BracketError):
        roots.Bracket(2.0, 1.0, -1.0, 1.0)
    with pytest.raises(BracketError):
        roots.Bracket(0.0, 1.0, 1.0, 2.0)  # same sign
    roots.Bracket(0.0, 1.0, -1.0, 1.0)  # valid


def test_bisection_linear():
    f = lambda x: x - 2.0
    root = roots.bisection(f, roots.make_bracket(f, 0.0, 5.0), tol=1e-10)
    assert root == pytest.approx(2.0, abs=1e-9)


def test_bisection_cdf_symmetry():
    f = lambda x: special.std_normal_cdf(x) - 0.5
    root = roots.bisection(f, roots.make_bracket(f, -3.0, 3.0), tol=1e-12)
    assert root == pytest.approx(0.0, abs=1e-10)


def test_bisection_cubic_vs_scan_oracle():
    f = lambda x: x ** 3 - x - 2.0
    # oracle: dense grid scan plus interval halving, independent of the
    # solver under test
    grid = np.linspace(1.0, 2.0, 100001)
    sign = np.sign(f(grid))
    i = int(np.argmax(sign[:-1] * sign[1:] < 0))
    lo, hi = grid[i], grid[i + 1]
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        lo, hi = (lo, mid) if f(mid) > 0 else (mid, hi)
    oracle = 0.5 * (lo + hi)
    assert oracle == pytest.approx(1.5213797068045678, abs=1e-12)
    root = roots.bisection(f, roots.make_bracket(f, 1.0, 2.0))
    assert root == pytest.approx(oracle, abs=1e-6)


def test_bisection_convergence_error_carries_best():
    f = lambda x: x - 2.0
    with pytest.raises(ConvergenceError) as exc:
        roots.bisection(f, roots.make_bracket(f, 0.0, 5.0), tol=1e-12,
                        max_iter=3)
    assert abs(exc.value.best - 2.0) < 1.0


def test_secant_linear_one_update():
    f = lambda x: x - 2.0
    assert roots.secant(f, 0.0, 1.0) == 2.0


def test_secant_quadratic_vs_bisection():
    f = lambda x: x * x - 4.0
    oracle = roots.bisection(f, roots.make_bracket(f, 1.0, 3.0), tol=1e-12)
    assert roots.secant(f, 1.0, 3.0, tol=1e-12) == pytest.approx(
        oracle, abs=1e-8)


def test_secant_degenerate():
    with pytest.raises(DegenerateSecant):
        roots.secant(lambda x: 1.0, 0.0, 1.0)


def test_chandrupatla_linear():
    f = lambda x: x - 2.0
    root = roots.chandrupatla(f, roots.make_bracket(f, 0.0, 5.0))
    assert root == pytest.approx(2.0, abs=1e-9)


def test_chandrupatla_tanh_closed_form():
    f = lambda x: np.tanh(x) - 0.5
    root = roots.chandrupatla(f, roots.make_bracket(f, 0.0, 2.0))
    assert root == pytest.approx(0.5493061443340549, abs=1e-8)


def test_chandrupatla_mixture_cdf_vs_bisection():
    w = np.array([0.4, 0.6])
    mu = np.array([-1.0, 1.5])
    sg = np.array([0.7, 1.2])

    def f(x):
        return float(np.sum(w * special.std_normal_cdf((x - mu) / sg)) - 0.3)

    br = roots.make_bracket(f, -15.0, 15.0)
    oracle = roots.bisection(f, br, tol=1e-12)
    assert roots.chandrupatla(f, br) == pytest.approx(oracle, abs=1e-9)


def test_chandrupatla_bracket_never_expands():
    f = lambda x: np.cos(x) - x
    widths = []
    roots.chandrupatla(f, roots.make_bracket(f, 0.0, 2.0),
                       on_bracket=lambda lo, hi: widths.append(hi - lo))
    assert all(b <= a + 1e-15 for a, b in zip(widths, widths[1:]))


def test_chandrupatla_iteration_budget_vs_bisection():
    # corpus of smooth bracketed problems; hybrid solver must stay within
    # 4x the bisection evaluation count (it is far fewer in practice)
    corpus = [
        (lambda x: x ** 3 - x - 2.0, 1.0, 2.0),
        (lambda x: np.tanh(x) - 0.5, 0.0, 2.0),
        (lambda x: np.exp(x) - 3.0, 0.0, 3.0),
        (lambda x: special.std_normal_cdf(x) - 0.25, -8.0, 8.0),
        (lambda x: x - 2.0, 0.0, 5.0),
    ]
    for f, lo, hi in corpus:
        fb, nb = count_calls(f)
        roots.bisection(fb, roots.make_bracket(fb, lo, hi))
        fc, nc = count_calls(f)
        roots.chandrupatla(fc, roots.make_bracket(fc, lo, hi))
        assert nc["n"] <= 4 * nb["n"]


@given(st.floats(0.2, 3.0), st.floats(-2.0, 2.0), st.floats(0.1, 2.0))
@settings(max_examples=60, deadline=None)
def test_all_finders_agree_on_monotone(a, b, c):
    # strictly increasing: a*x + c*tanh(x) + b
    f = lambda x: a * x + c * np.tanh(x) + b
    lo, hi = -30.0, 30.0
    tol = 1e-10
    br = roots.make_bracket(f, lo, hi)
    r_bi = roots.bisection(f, br, tol=tol)
    r_ch = roots.chandrupatla(f, br, tol=tol)
    r_se = roots.secant(f, -1.0, 1.0, tol=tol, max_iter=400)
    assert abs(r_bi - r_ch) <= 10 * tol
    assert abs(r_bi - r_se) <= max(10 * tol, 1e-9)
