"""Bracketed scalar root finding: bisection, secant, and Chandrupatla.

All solvers work on plain floats and are pure; gradients never flow
through their results. Default tolerance is absolute on x.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import BracketError, ConvergenceError, DegenerateSecant

DEFAULT_TOL = 1e-10
DEFAULT_MAX_ITER = 200


@dataclass(frozen=True)
class Bracket:
    lo: float
    hi: float
    f_lo: float
    f_hi: float

    def __post_init__(self):
        if not self.lo < self.hi:
            raise BracketError(f"bracket requires lo < hi, got [{self.lo}, {self.hi}]")
        if math.copysign(1.0, self.f_lo) == math.copysign(1.0, self.f_hi) \
                and self.f_lo != 0.0 and self.f_hi != 0.0:
            raise BracketError(
                f"no sign change: f({self.lo})={self.f_lo}, f({self.hi})={self.f_hi}")


def make_bracket(f, lo: float, hi: float) -> Bracket:
    return Bracket(lo, hi, f(lo), f(hi))


def bisection(f, bracket: Bracket, tol: float = DEFAULT_TOL,
              max_iter: int = DEFAULT_MAX_ITER) -> float:
    lo, hi = bracket.lo, bracket.hi
    f_lo = bracket.f_lo
    if bracket.f_lo == 0.0:
        return lo
    if bracket.f_hi == 0.0:
        return hi
    for _ in range(max_iter):
        if hi - lo <= tol:
            return 0.5 * (lo + hi)
        mid = 0.5 * (lo + hi)
        f_mid = f(mid)
        if f_mid == 0.0:
            return mid
        if (f_mid > 0.0) == (f_lo > 0.0):
            lo, f_lo = mid, f_mid
        else:
            hi = mid
    if hi - lo <= tol:
        return 0.5 * (lo + hi)
    raise ConvergenceError(
        f"bisection did not reach tol={tol} in {max_iter} iterations",
        best=0.5 * (lo + hi))


def secant(f, x0: float, x1: float, tol: float = DEFAULT_TOL,
           max_iter: int = DEFAULT_MAX_ITER) -> float:
    if x0 == x1:
        raise ValueError("secant requires two distinct starting points")
    f0, f1 = f(x0), f(x1)
    if f0 == 0.0:
        return x0
    for _ in range(max_iter):
        if f1 == f0:
            raise DegenerateSecant(
                f"equal function values {f1} at {x0} and {x1}")
        x2 = (x0 * f1 - x1 * f0) / (f1 - f0)
        f2 = f(x2)
        if abs(x2 - x1) <= tol or abs(f2) <= tol:
            return x2
        x0, f0, x1, f1 = x1, f1, x2, f2
    raise ConvergenceError(
        f"secant did not converge in {max_iter} iterations", best=x1)


def chandrupatla(f, bracket: Bracket, tol: float = DEFAULT_TOL,
                 max_iter: int = DEFAULT_MAX_ITER, on_bracket=None) -> float:
    """Hybrid bisection / inverse quadratic interpolation.

    Keeps a sign-changing bracket at every step, so it converges whenever
    the initial bracket is valid. ``on_bracket(lo, hi)`` is invoked once
    per iteration with the current bracket (testing hook).
    """
    # x1, x2 carry the current bracket; x3 is the previous end.
    x1, f1 = bracket.lo, bracket.f_lo
    x2, f2 = bracket.hi, bracket.f_hi
    if f1 == 0.0:
        return x1
    if f2 == 0.0:
        return x2
    x3, f3 = x2, f2
    t = 0.5
    for _ in range(max_iter):
        x = x1 + t * (x2 - x1)
        fx = f(x)
        if fx == 0.0:
            return x
        if (fx > 0.0) == (f1 > 0.0):
            x3, f3 = x1, f1
        else:
            x3, f3 = x2, f2
            x2, f2 = x1, f1
        x1, f1 = x, fx
        if on_bracket is not None:
            on_bracket(min(x1, x2), max(x1, x2))

        xmin, fmin = (x1, f1) if abs(f1) < abs(f2) else (x2, f2)
        dx = abs(x2 - x1)
        if dx <= tol:
            return xmin

        # Inverse quadratic interpolation when the points warrant it.
        t = 0.5
        denom_x = x3 - x2
        denom_f = f3 - f2
        if denom_x != 0.0 and denom_f != 0.0 and f3 != f1 and x2 != x1:
            xi = (x1 - x2) / denom_x
            phi = (f1 - f2) / denom_f
            if 0.0 < xi < 1.0 and (1.0 - math.sqrt(1.0 - xi)) < phi < math.sqrt(xi):
                alpha = (x3 - x1) / (x2 - x1)
                t = (f1 / (f1 - f2)) * (f3 / (f3 - f2)) \
                    - alpha * (f1 / (f3 - f1)) * (f2 / (f2 - f3))
        t_lim = 0.5 * tol / dx if dx > 0 else 0.5
        t_lim = min(t_lim, 0.49)
        t = min(max(t, t_lim), 1.0 - t_lim)
    raise ConvergenceError(
        f"chandrupatla did not reach tol={tol} in {max_iter} iterations",
        best=x1)
