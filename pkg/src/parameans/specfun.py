"""Special-function kernels.

Hermite polynomials, a rotated-argument variant, Gaussian-normalized
Hermite functions, the decaying negative-order Hermite family, the scaled
complementary error function, the modified Bessel kernel K0, and the
complex gamma function.

The negative-order family is the workhorse.  With H the physicists'
Hermite function extended by H_{nu+1}(x) = 2 x H_nu(x) - 2 nu H_{nu-1}(x),
define for m = 0, 1, 2, ...

    g_m(x) = exp(-x^2) * H_{-m-1}(x),   x >= 0.

These are positive, decay rapidly in m and x, and satisfy

    g_0(x)   = (sqrt(pi)/2) * erfc(x) * 1            (anchor)
    g_m(x)   = exp(-x^2)/m! * int_0^inf t^m exp(-t^2 - 2 x t) dt
    g_m(0)   = Gamma((m+1)/2) / (2 * m!).

Values underflow the double range long before m reaches useful sizes, so
the primary interface returns log values.  Three evaluation routes exist:

* ``cf``          backward continued fraction for the ratio chain
                  q_j = h_j / h_{j-1} with h_j = exp(-x^2) H_{-j}(x),
                  anchored at ln g_0; accurate for x bounded away from 0.
                  The head ratio q_1 has a closed form, which certifies
                  the whole chain after the fact.
* ``quadrature``  the integral representation on [0, T(m, x)] with one
                  large Gauss-Legendre rule and iterated moment updates;
                  unconditionally stable, used near x = 0.
* ``recurrence``  the plain three-term recurrence run downward in the
                  order.  Subtractive and unstable: relative error grows
                  like exp(2 sqrt(2) x sqrt(m)), so it is only usable for
                  m well below (5/x)^2.  Kept for cross-checks.

``auto`` dispatches: exact parity formula at x = 0, quadrature for
0 < x < 0.05, continued fraction elsewhere.
"""
from __future__ import annotations

import math

import numpy as np
from scipy import special as _sp

from .errors import QuadratureError, RangeOverflowError
from .quadrature import legendre_nodes

_LN_SQRT_PI = 0.5 * math.log(math.pi)

# continued-fraction depth: L = ceil(C1 sqrt(M) / x + C2 / x^2) + C3 extra
# levels above the last order needed.  Contamination from the seed decays
# like exp(-c x (sqrt(M+L) - sqrt(M))); the constants carry margin and the
# head certificate below catches any shortfall.
_CF_C1 = 38.0
_CF_C2 = 340.0
_CF_C3 = 64
_CF_HEAD_TOL = 1e-13

_QUAD_X_CUT = 0.05          # auto: quadrature below, continued fraction above
_QUAD_M_CAP = 20_000        # guard on the one-rule moment pass


# ---------------------------------------------------------------------------
# classical families
# ---------------------------------------------------------------------------

def hermite_poly(n: int, x):
    """Physicists' Hermite polynomial H_n(x) by upward recurrence.

    Raises RangeOverflowError if any value leaves double range.
    """
    if n < 0:
        raise ValueError("order must be >= 0")
    x = np.asarray(x, dtype=float)
    h0 = np.ones_like(x)
    if n == 0:
        return h0 if h0.ndim else float(h0)
    h1 = 2.0 * x
    for j in range(1, n):
        h0, h1 = h1, 2.0 * x * h1 - 2.0 * j * h0
    if not np.all(np.isfinite(h1)):
        raise RangeOverflowError(f"H_{n} overflows double range on this input")
    return h1 if h1.ndim else float(h1)


def hermite_poly_rotated(n: int, y):
    """The real polynomial (-i)^n H_n(i y), by T_{n+1} = 2 y T_n + 2 n T_{n-1}.

    All coefficients are positive, so the recurrence is stable.  Raises
    RangeOverflowError on leaving double range.
    """
    if n < 0:
        raise ValueError("order must be >= 0")
    y = np.asarray(y, dtype=float)
    t0 = np.ones_like(y)
    if n == 0:
        return t0 if t0.ndim else float(t0)
    t1 = 2.0 * y
    for j in range(1, n):
        t0, t1 = t1, 2.0 * y * t1 + 2.0 * j * t0
    if not np.all(np.isfinite(t1)):
        raise RangeOverflowError(f"rotated H_{n} overflows double range on this input")
    return t1 if t1.ndim else float(t1)


def hermite_fn_all(n_max: int, z):
    """Orthonormal Hermite functions phi_0..phi_{n_max} at z.

    phi_n(z) = H_n(z) exp(-z^2/2) / sqrt(2^n n! sqrt(pi)), bounded by
    about 0.816 on the real line.  The upward recurrence

        phi_{n+1} = z sqrt(2/(n+1)) phi_n - sqrt(n/(n+1)) phi_{n-1}

    runs in the direction of the dominant solution in the oscillatory
    region and keeps relative accuracy through the tunneling region,
    because injected rounding errors grow no faster than the function
    itself recovers.  Where exp(-z^2/2) underflows (|z| > ~38) the whole
    column is returned as zero; callers pair phi with weights that decay
    at least as fast, so those columns never matter.

    Returns an array of shape (n_max + 1,) + shape(z).
    """
    if n_max < 0:
        raise ValueError("n_max must be >= 0")
    z = np.asarray(z, dtype=float)
    out = np.empty((n_max + 1,) + z.shape, dtype=float)
    p0 = math.pi ** -0.25 * np.exp(-0.5 * z * z)
    out[0] = p0
    if n_max == 0:
        return out
    out[1] = math.sqrt(2.0) * z * p0
    for n in range(1, n_max):
        out[n + 1] = (math.sqrt(2.0 / (n + 1)) * z * out[n]
                      - math.sqrt(n / (n + 1.0)) * out[n - 1])
    return out


# ---------------------------------------------------------------------------
# wrapped kernels
# ---------------------------------------------------------------------------

def erfc_scaled(x):
    """exp(x^2) erfc(x), stable for large positive x."""
    return _sp.erfcx(x)


def bessel_k0(x):
    """Modified Bessel function K0 on (0, inf)."""
    x = np.asarray(x, dtype=float)
    if np.any(x <= 0.0):
        raise ValueError("K0 requires a positive argument")
    out = _sp.k0(x)
    return out if out.ndim else float(out)


def bessel_k0_scaled(x):
    """exp(x) K0(x), stable for large x."""
    x = np.asarray(x, dtype=float)
    if np.any(x <= 0.0):
        raise ValueError("K0 requires a positive argument")
    out = _sp.k0e(x)
    return out if out.ndim else float(out)


def gamma_complex(z):
    """Gamma function for complex argument; rejects the poles."""
    z = np.asarray(z, dtype=complex)
    on_pole = (z.imag == 0.0) & (z.real <= 0.0) & (z.real == np.round(z.real))
    if np.any(on_pole):
        raise ValueError("gamma pole at a nonpositive integer")
    out = _sp.gamma(z)
    return out if out.ndim else complex(out)


def loggamma_complex(z):
    """Principal-branch log-gamma for complex argument."""
    out = _sp.loggamma(np.asarray(z, dtype=complex))
    return out if out.ndim else complex(out)


# ---------------------------------------------------------------------------
# negative-order family: log g_m(x)
# ---------------------------------------------------------------------------

def _log_g0(x):
    """ln g_0(x) = ln(sqrt(pi)/2) + ln erfcx(x) - x^2, elementwise."""
    x = np.asarray(x, dtype=float)
    return _LN_SQRT_PI - math.log(2.0) + np.log(_sp.erfcx(x)) - x * x


def _neg_log_closed0(m_max: int):
    """Exact ln g_m(0) = lgamma((m+1)/2) - ln 2 - lgamma(m+1)."""
    m = np.arange(m_max + 1, dtype=float)
    return _sp.gammaln(0.5 * (m + 1.0)) - math.log(2.0) - _sp.gammaln(m + 1.0)


def _cf_pass(m_max: int, x: np.ndarray, depth: int):
    """One backward continued-fraction sweep.

    Returns (lng, head_err) where lng has shape (m_max + 1, x.size) and
    head_err is the relative defect of the reconstructed head ratio q_1
    against its closed form (sqrt(pi)/2) erfcx(x).
    """
    top = m_max + 1                     # highest ratio index needed
    J = top + depth
    q = (np.sqrt(x * x + 2.0 * J) - x) / (2.0 * J)      # asymptotic seed for q_J
    ratios = np.empty((m_max, x.size), dtype=float)      # rows j = 2 .. top
    for j in range(J - 1, 0, -1):
        q = 1.0 / (2.0 * x + (2.0 * j) * q)
        if 2 <= j <= top:
            ratios[j - 2] = q
        elif j == 1:
            q1 = q
    head_true = _LN_SQRT_PI - math.log(2.0) + np.log(_sp.erfcx(x))
    head_err = np.abs(np.log(q1) - head_true)
    lng = np.empty((m_max + 1, x.size), dtype=float)
    lng[0] = _log_g0(x)
    if m_max >= 1:
        lng[1:] = lng[0] + np.cumsum(np.log(ratios), axis=0)
    return lng, head_err


def _neg_log_cf(m_max: int, x: np.ndarray):
    """Continued-fraction route for a batch of strictly positive x."""
    xm = float(np.min(x))
    depth = int(math.ceil(_CF_C1 * math.sqrt(m_max + 1.0) / xm
                          + _CF_C2 / (xm * xm))) + _CF_C3
    lng, head_err = _cf_pass(m_max, x, depth)
    for _ in range(2):
        bad = head_err > _CF_HEAD_TOL
        if not np.any(bad):
            return lng
        depth *= 2
        lng_b, head_b = _cf_pass(m_max, x[bad], depth)
        lng[:, bad] = lng_b
        err = head_err.copy()
        err[bad] = head_b
        head_err = err
    bad = head_err > _CF_HEAD_TOL
    if np.any(bad):
        # deep-seed escalation failed; the moment integral always works
        for i in np.nonzero(bad)[0]:
            lng[:, i] = _neg_log_quad(m_max, float(x[i]))
    return lng


def _neg_log_quad(m_max: int, x: float):
    """Moment-integral route at a single x >= 0.

    g_m(x) = exp(-x^2)/m! * int_0^T t^m exp(-t^2 - 2 x t) dt with T past
    the last peak; all moments come from one Gauss-Legendre rule, with the
    integrand carried in logs (its elements span thousands of decades as m
    grows) and contracted by shifted exponential sums of positive terms.
    """
    if m_max > _QUAD_M_CAP:
        raise QuadratureError(
            f"moment route capped at m_max={_QUAD_M_CAP}, requested {m_max}")
    M = max(m_max, 1)
    t_peak = 0.5 * (math.sqrt(x * x + 2.0 * M) - x)
    T = t_peak + 9.0
    n = int(math.ceil(0.5 * M + 0.40 * (T + x) ** 2)) + 40
    n = ((n + 127) // 128) * 128                     # quantize for rule reuse
    xs, ws = legendre_nodes(n)
    t = 0.5 * T * (xs + 1.0)
    lnt = np.log(t)
    # carry the integrand in logs; elements spread over thousands of decades
    lnu = np.log(0.5 * T * ws) - t * t - 2.0 * x * t
    lnint = np.empty(m_max + 1, dtype=float)
    for m in range(m_max + 1):
        mx = float(np.max(lnu))
        s = float(np.add.reduce(np.exp(lnu - mx)))
        lnint[m] = mx + math.log(s)
        if m < m_max:
            lnu = lnu + lnt
    m = np.arange(m_max + 1, dtype=float)
    return -x * x + lnint - _sp.gammaln(m + 1.0)


def _neg_log_rec(m_max: int, x: np.ndarray):
    """Plain downward recurrence on hhat_j = exp(x^2) h_j; subtractive.

    hhat_{j+1} = (hhat_{j-1} - 2 x hhat_j) / (2 j).  Kept only to map out
    its own breakdown; raises once drift makes a value nonpositive.
    """
    a = np.ones_like(x)                              # hhat_0
    b = _LN_SQRT_PI - math.log(2.0) + np.log(_sp.erfcx(x))
    b = np.exp(b)                                    # hhat_1
    scale = np.zeros_like(x)
    lng = np.empty((m_max + 1, x.size), dtype=float)
    lng[0] = np.log(b) + scale - x * x
    for j in range(1, m_max + 1):
        a, b = b, (a - 2.0 * x * b) / (2.0 * j)
        if np.any(b <= 0.0):
            raise RangeOverflowError(
                f"downward recurrence lost all accuracy at order {j}")
        small = b < 1e-250
        if np.any(small):
            a = np.where(small, a * 1e250, a)
            bump = np.where(small, math.log(1e-250), 0.0)
            b = np.where(small, b * 1e250, b)
            scale = scale + bump
        lng[j] = np.log(b) + scale - x * x
    return lng


def hermite_neg_scaled_log_all(m_max: int, x, method: str = "auto"):
    """ln g_m(x) for all m = 0..m_max; shape (m_max + 1,) + shape(x).

    x must be >= 0 elementwise.  ``method`` is one of "auto", "cf",
    "quadrature", "recurrence" (see the module docstring).
    """
    if m_max < 0:
        raise ValueError("m_max must be >= 0")
    x_in = np.asarray(x, dtype=float)
    if np.any(x_in < 0.0):
        raise ValueError("x must be >= 0")
    xf = np.atleast_1d(x_in).ravel()
    out = np.empty((m_max + 1, xf.size), dtype=float)

    if method == "auto":
        zero = xf == 0.0
        tiny = (xf > 0.0) & (xf < _QUAD_X_CUT)
        rest = xf >= _QUAD_X_CUT
        if np.any(zero):
            out[:, zero] = _neg_log_closed0(m_max)[:, None]
        for i in np.nonzero(tiny)[0]:
            out[:, i] = _neg_log_quad(m_max, float(xf[i]))
        if np.any(rest):
            out[:, rest] = _neg_log_cf(m_max, xf[rest])
    elif method == "cf":
        if np.any(xf <= 0.0):
            raise ValueError("continued-fraction route requires x > 0")
        out[:] = _neg_log_cf(m_max, xf)
    elif method == "quadrature":
        for i in range(xf.size):
            out[:, i] = _neg_log_quad(m_max, float(xf[i]))
    elif method == "recurrence":
        out[:] = _neg_log_rec(m_max, xf)
    else:
        raise ValueError(f"unknown method {method!r}")

    return out.reshape((m_max + 1,) + x_in.shape)


def hermite_neg_scaled_log(m: int, x, method: str = "auto"):
    """ln g_m(x) for a single order m."""
    if m < 0:
        raise ValueError("order must be >= 0")
    out = hermite_neg_scaled_log_all(m, x, method=method)[m]
    return out if np.ndim(out) else float(out)


def hermite_neg_scaled(m: int, x, method: str = "auto"):
    """g_m(x) = exp(-x^2) H_{-m-1}(x) as a plain float (may underflow to 0)."""
    out = np.exp(hermite_neg_scaled_log(m, x, method=method))
    return out if np.ndim(out) else float(out)
