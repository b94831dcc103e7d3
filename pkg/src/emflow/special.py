"""Standard normal CDF, quantile, and log-density on plain numpy values.

The quantile rejects inputs at 0 or 1; callers that may produce saturated
CDF values clamp to ``[QUANTILE_EPS, 1 - QUANTILE_EPS]`` first (the CDF
saturates in finite precision around |x| ~ 8).
"""

from __future__ import annotations

import numpy as np
from scipy.special import erfc

from .errors import DomainError

LOG_2PI = float(np.log(2.0 * np.pi))
SQRT2 = float(np.sqrt(2.0))

# Clamp bound for CDF values fed back into the quantile.
QUANTILE_EPS = 1e-15

# Rational approximation of the standard normal quantile (Acklam's
# coefficients), accurate to ~1.15e-9 relative before polishing.
_A = (-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
      1.383577518672690e+02, -3.066479806614716e+01, 2.506628277459239e+00)
_B = (-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
      6.680131188771972e+01, -1.328068155288572e+01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
      -2.549732539343734e+00, 4.374664141464968e+00, 2.938163982698783e+00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
      3.754408661907416e+00)
_P_LOW = 0.02425


def std_normal_cdf(x):
    """CDF of N(0, 1), computed through the complementary error function."""
    arr = np.asarray(x, dtype=np.float64)
    out = 0.5 * erfc(-arr / SQRT2)
    return float(out) if np.isscalar(x) or arr.ndim == 0 else out


def std_normal_pdf(x):
    arr = np.asarray(x, dtype=np.float64)
    out = np.exp(-0.5 * arr * arr) / np.sqrt(2.0 * np.pi)
    return float(out) if np.isscalar(x) or arr.ndim == 0 else out


def std_normal_logpdf(x):
    arr = np.asarray(x, dtype=np.float64)
    out = -0.5 * arr * arr - 0.5 * LOG_2PI
    return float(out) if np.isscalar(x) or arr.ndim == 0 else out


def _quantile_raw(p):
    """Piecewise rational approximation; p strictly inside (0, 1)."""
    p = np.asarray(p, dtype=np.float64)
    x = np.empty_like(p)

    lo = p < _P_LOW
    hi = p > 1.0 - _P_LOW
    mid = ~(lo | hi)

    if np.any(mid):
        q = p[mid] - 0.5
        r = q * q
        num = ((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]
        den = ((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1.0
        x[mid] = num * q / den

    if np.any(lo):
        q = np.sqrt(-2.0 * np.log(p[lo]))
        num = ((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]
        den = (((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0
        x[lo] = num / den

    if np.any(hi):
        q = np.sqrt(-2.0 * np.log(1.0 - p[hi]))
        num = ((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]
        den = (((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0
        x[hi] = -num / den

    return x


def std_normal_quantile(u):
    """Inverse CDF of N(0, 1): rational approximation plus one Newton step.

    Raises DomainError unless every input lies strictly inside (0, 1).
    The upper half mirrors to the lower tail (1 - u is exact there), so
    the Newton correction never cancels against CDF values near 1.
    """
    scalar = np.isscalar(u) or np.asarray(u).ndim == 0
    p = np.asarray(u, dtype=np.float64)
    if np.any(p <= 0.0) or np.any(p >= 1.0):
        raise DomainError("quantile input must lie strictly inside (0, 1)")

    flip = p > 0.5
    pl = np.where(flip, 1.0 - p, p)
    x = _quantile_raw(pl)
    # One Newton polish against the erfc-based CDF (accurate in the lower
    # tail, where erfc carries full relative precision).
    pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
    err = 0.5 * erfc(-x / SQRT2) - pl
    x = np.where(pdf > 0.0, x - err / np.where(pdf > 0.0, pdf, 1.0), x)
    x = np.where(flip, -x, x)
    return float(x) if scalar else x
