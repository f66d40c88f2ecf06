"""Spectral expansion of K0 averages in parabolic coordinates.

Everything here rests on one product expansion: for field point
p = (xi, eta) and source point q = (xi', eta') with eta' <= eta,

    K0(k |x(p) - x(q)|) = sum_n  t_n(p, q, k),

where, after absorbing every Gaussian and factorial into the orthonormal
Hermite functions phi_n and the decaying negative-order family g_n
(specfun), each term collapses to

    t_n = 2 pi e^{(k/2)(eta^2 + eta'^2)}
          phi_n(sqrt(k) xi) phi_n(sqrt(k) xi') g_n(sqrt(k) eta) T_n(sqrt(k) eta'),

with T_n the positive-coefficient rotated Hermite polynomial.  The series
converges like exp(-sqrt(2 n k) (eta - eta')), so it is useful exactly
when the source sits strictly inside the observation parabola.

Averaging the expansion against a phantom turns boundary data into
spectral coefficients: with J(xi, k) the K0-weighted radial integral of
the boundary data at the parabola point (xi, eta0), the coefficient of
order m at frequency k is

    lam_m(k) = sqrt(k) e^{-(k/2) eta0^2} <J(., k), phi_m(sqrt(k) .)>
               / (N_m g_m(sqrt(k) eta0)),      N_m = sqrt(2^m m! sqrt(pi)),

and the exterior field synthesized from the coefficients is

    Psi(xi, eta, k) = sum_m lam_m(k) phi_m(sqrt(k) xi)
                      N_m g_m(sqrt(k) eta) e^{(k/2) eta^2}.

The quantities N_m g_m and 1/(N_m g_m) are benign (their logs nearly
cancel), so all assembly happens on log scales and no factorial ever
meets double-precision range limits.

Grid-to-grid smoothness note: the synthesized profiles k -> Psi(p, k)
feed an inversion that amplifies any k-localized roughness by e^{pi t/2}
along its contour.  Table builders therefore keep every discretization
choice (radial panels, xi nodes) fixed across the whole k-grid, so that
quadrature error varies smoothly in k; only the series stopping point
moves with k, bounded by the stated tolerance.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.special import gammaln

from . import forward, geometry
from .errors import (DomainTruncationError, GridResolutionError,
                     QuadratureError, RangeOverflowError,
                     SeriesTruncationError)
from .forward import BoundaryData, Phantom, read_table, write_table
from .geometry import ParabolicPoint
from .quadrature import legendre_nodes, panel_nodes
from .specfun import (bessel_k0, hermite_neg_scaled_log_all, hermite_poly,
                      hermite_poly_rotated)

_LN_PI = math.log(math.pi)
_SQRT_PI = math.sqrt(math.pi)

_XI_ENDPOINT_TOL = 1e-12       # required decay of the weighted integrand
_DATA_RTOL = 1e-9              # radial quadrature target
_RES_EST_TOL = 3e-5            # half-grid interpolation-defect ceiling
_STOP_RUN = 5                  # consecutive small terms that end a series
_NODES_PER_CYCLE = 8.0         # xi-quadrature density per Hermite oscillation
_LADDER_BLOCK = 256            # rows per block in coefficient projection


def _ln_norm(m_max: int) -> np.ndarray:
    """ln N_m = (m ln 2 + ln m!)/2 + ln(pi)/4 for m = 0..m_max."""
    m = np.arange(m_max + 1, dtype=float)
    return 0.5 * (m * math.log(2.0) + gammaln(m + 1.0)) + 0.25 * _LN_PI


# ---------------------------------------------------------------------------
# kernel expansion
# ---------------------------------------------------------------------------

def _rotated_log_ladder(m_max: int, y: float):
    """(ln T_m(y), m = 0..m_max) with scale carrying; T_m > 0 for y > 0.

    At y = 0 odd orders vanish; their log is -inf, which exponentiates to
    an exact zero term downstream.
    """
    out = np.full(m_max + 1, -np.inf)
    a, b = 1.0, 2.0 * y                  # T_0, T_1
    scale = 0.0
    out[0] = 0.0
    if m_max == 0:
        return out
    if b > 0.0:
        out[1] = math.log(b) + scale
    for m in range(1, m_max):
        a, b = b, 2.0 * y * b + 2.0 * m * a
        if b > 1e250:
            a *= 1e-250
            b *= 1e-250
            scale += 250.0 * math.log(10.0)
        if b > 0.0:
            out[m + 1] = math.log(b) + scale
    return out


def _phi_pair_product(m_max: int, y1: float, y2: float) -> np.ndarray:
    """phi_m(y1) * phi_m(y2) for m = 0..m_max by the joint upward ladder."""
    out = np.empty(m_max + 1, dtype=float)
    p0 = math.pi ** -0.25 * math.exp(-0.5 * y1 * y1)
    q0 = math.pi ** -0.25 * math.exp(-0.5 * y2 * y2)
    p1 = math.sqrt(2.0) * y1 * p0
    q1 = math.sqrt(2.0) * y2 * q0
    out[0] = p0 * q0
    if m_max == 0:
        return out
    out[1] = p1 * q1
    for m in range(1, m_max):
        c1 = math.sqrt(2.0 / (m + 1))
        c2 = math.sqrt(m / (m + 1.0))
        p0, p1 = p1, c1 * y1 * p1 - c2 * p0
        q0, q1 = q1, c1 * y2 * q1 - c2 * q0
        out[m + 1] = p1 * q1
    return out


def k0_series(p: ParabolicPoint, q: ParabolicPoint, k: float,
              n_terms: int = None, *, tol: float = 1e-12,
              n_cap: int = 400_000) -> float:
    """Truncated parabolic product expansion of K0(k |x(p) - x(q)|).

    With ``n_terms`` the sum runs over n = 0..n_terms exactly; otherwise
    the stopping rule ends it after 5 consecutive terms below
    tol * |partial sum|.  The expansion requires q.eta <= p.eta and
    converges like exp(-sqrt(2 n k) (p.eta - q.eta)), so nearly tangent
    pairs are expensive; ``n_cap`` bounds the attempt.
    """
    if q.eta > p.eta:
        raise ValueError(
            f"expansion needs q.eta <= p.eta, got {q.eta} > {p.eta}")
    if not (k > 0.0):
        raise ValueError("k must be positive")
    if p.xi == q.xi and p.eta == q.eta:
        raise ValueError("p and q must be distinct (kernel is singular)")
    rk = math.sqrt(k)
    ln_base = math.log(2.0 * math.pi) + 0.5 * k * (p.eta ** 2 + q.eta ** 2)

    n_hi = n_terms if n_terms is not None else min(4096, n_cap)
    terms = []
    run = 0
    total = 0.0
    while True:
        phi2 = _phi_pair_product(n_hi, rk * p.xi, rk * q.xi)
        lng = hermite_neg_scaled_log_all(n_hi, rk * p.eta)
        lnt = _rotated_log_ladder(n_hi, rk * q.eta)
        ln_mag = ln_base + lng + lnt
        if np.any(ln_mag > 700.0):
            raise RangeOverflowError("expansion term exceeds double range")
        with np.errstate(over="ignore"):
            vals = phi2 * np.exp(ln_mag)
            # stopping envelope: |phi_n| <= 0.816 uniformly, so this bounds
            # every term regardless of where the oscillations have zeros
            env = 0.667 * np.exp(ln_mag)
        if n_terms is not None:
            return math.fsum(vals[: n_terms + 1])
        start = len(terms)
        for n in range(start, n_hi + 1):
            t = float(vals[n])
            terms.append(t)
            total += t
            if env[n] < tol * abs(total):
                run += 1
                if run >= _STOP_RUN:
                    return math.fsum(terms)
            else:
                run = 0
        if n_hi >= n_cap:
            raise SeriesTruncationError(
                f"expansion not converged by n = {n_cap} "
                f"(eta gap {p.eta - q.eta:g} too small at k = {k:g})")
        n_hi = min(2 * n_hi, n_cap)


# ---------------------------------------------------------------------------
# data-side radial integrals
# ---------------------------------------------------------------------------

def _data_cache(data: BoundaryData, name: str) -> dict:
    """Per-instance scratch dict, created on first use (same pattern as
    the column spline cache on BoundaryData)."""
    cache = getattr(data, name, None)
    if cache is None:
        cache = {}
        setattr(data, name, cache)
    return cache


def _column_window(data: BoundaryData, i: int):
    """Index window [j0, j1] bracketing the nonzero support of column i,
    padded by one grid cell; None for an all-zero column.  Cached."""
    cache = _data_cache(data, "_win_cache")
    if i not in cache:
        nz = np.nonzero(data.values[i])[0]
        if nz.size == 0:
            cache[i] = None
        else:
            cache[i] = (max(int(nz[0]) - 1, 0),
                        min(int(nz[-1]) + 1, data.r_grid.size - 1))
    return cache[i]


def _column_resolution_error(data: BoundaryData, i: int) -> float:
    """Half-spacing interpolation defect of column i, relative to its peak.

    A spline through every other sample is evaluated at the skipped
    samples.  The worst defect is an upper proxy for the full-grid
    interpolation error, which sits roughly an order of magnitude lower
    (the error order is h^3.5 at the support edges), and the integrated
    quantities downstream are smaller still through sign cancellation.
    """
    win = _column_window(data, i)
    if win is None:
        return 0.0
    j0, j1 = win
    r = data.r_grid[j0:j1 + 1]
    f = data.values[i, j0:j1 + 1]
    if r.size < 9:
        raise GridResolutionError(
            f"column xi={data.xi_grid[i]:g}: only {r.size} samples across "
            f"the support window")
    half = CubicSpline(r[::2], f[::2])
    return float(np.max(np.abs(half(r[1::2]) - f[1::2])) / np.max(np.abs(f)))


def _column_rule(data: BoundaryData, i: int, n_panels: int):
    """Fixed Gauss-Legendre nodes, weights and spline values of column i
    over its support window; cached per (column, panel count)."""
    cache = _data_cache(data, "_rule_cache")
    key = (i, n_panels)
    if key not in cache:
        win = _column_window(data, i)
        if win is None:
            cache[key] = None
        else:
            err = _column_resolution_error(data, i)
            if err > _RES_EST_TOL:
                raise GridResolutionError(
                    f"column xi={data.xi_grid[i]:g}: half-grid interpolation "
                    f"defect {err:.2e} above {_RES_EST_TOL:g}; refine the "
                    f"radial grid")
            j0, j1 = win
            nodes, wts = panel_nodes(float(data.r_grid[j0]),
                                     float(data.r_grid[j1]), n_panels, 16)
            # window-local spline, not retained: a full-grid spline per
            # column would hold ~40x the window's memory on long r grids
            fv = CubicSpline(data.r_grid[j0:j1 + 1],
                             data.values[i, j0:j1 + 1])(nodes)
            cache[key] = (nodes, wts * fv)
    return cache[key]


def data_k0_integral(data: BoundaryData, xi_index: int, k: float, *,
                     rtol: float = _DATA_RTOL, n_panels: int = None) -> float:
    """Radial K0 average of one boundary column:
    integral of F(xi_i, r) K0(k r) dr over the column's support window.

    The column is interpolated by a cubic spline and integrated by
    composite Gauss-Legendre panels, doubled until two successive values
    agree to ``rtol``; passing ``n_panels`` skips the doubling and uses
    that fixed count (the table builders do, to keep quadrature error
    smooth in k).
    """
    if not (k > 0.0):
        raise ValueError("k must be positive")
    i = int(xi_index)
    if not (0 <= i < data.xi_grid.size):
        raise IndexError(f"xi_index {i} outside 0..{data.xi_grid.size - 1}")
    if _column_window(data, i) is None:
        return 0.0
    if n_panels is not None:
        nodes, wf = _column_rule(data, i, n_panels)
        return float(np.add.reduce(wf * bessel_k0(k * nodes)))
    prev = None
    n = 8
    for _ in range(10):
        nodes, wf = _column_rule(data, i, n)
        val = float(np.add.reduce(wf * bessel_k0(k * nodes)))
        if prev is not None:
            scale = max(abs(val), abs(prev), 1e-300)
            if abs(val - prev) <= rtol * scale:
                return val
        prev = val
        n *= 2
    raise QuadratureError(
        f"radial K0 average of column {i} did not reach rtol={rtol:g}")


def boundary_panel_count(data: BoundaryData, k_grid, *,
                         rtol: float = _DATA_RTOL) -> int:
    """One panel count serving the whole table: the doubling rule is run
    on the widest-support column at the grid's extreme and geometric-mean
    frequencies, and the largest count (plus one safety doubling) wins."""
    k_grid = np.asarray(k_grid, dtype=float)
    probes = [float(k_grid[0]), float(np.exp(np.mean(np.log(k_grid)))),
              float(k_grid[-1])]
    widths = []
    for i in range(data.xi_grid.size):
        win = _column_window(data, i)
        widths.append(-1.0 if win is None else
                      data.r_grid[win[1]] - data.r_grid[win[0]])
    i_wide = int(np.argmax(widths))
    if widths[i_wide] < 0.0:
        return 8
    best = 8
    for k in probes:
        prev = None
        n = 8
        for _ in range(10):
            nodes, wf = _column_rule(data, i_wide, n)
            val = float(np.add.reduce(wf * bessel_k0(k * nodes)))
            if prev is not None:
                scale = max(abs(val), abs(prev), 1e-300)
                if abs(val - prev) <= rtol * scale:
                    break
            prev = val
            n *= 2
        best = max(best, n)
    return 2 * best


def boundary_k0_table(data: BoundaryData, k_grid, *,
                      n_panels: int = None) -> np.ndarray:
    """J[i, j] = data_k0_integral(column i, k_j) with one fixed panel
    count for every cell, so the table is smooth in k by construction."""
    k_grid = np.asarray(k_grid, dtype=float)
    if n_panels is None:
        n_panels = boundary_panel_count(data, k_grid)
    # flatten all column rules into one node array with reduceat segments
    segs, nodes, wfs = [0], [], []
    for i in range(data.xi_grid.size):
        rule = _column_rule(data, i, n_panels)
        if rule is None:
            segs.append(segs[-1])
        else:
            nodes.append(rule[0])
            wfs.append(rule[1])
            segs.append(segs[-1] + rule[0].size)
    if segs[-1] == 0:
        return np.zeros((data.xi_grid.size, k_grid.size))
    nodes = np.concatenate(nodes)
    wfs = np.concatenate(wfs)
    starts = np.asarray(segs[:-1])
    live = np.diff(segs) > 0
    out = np.zeros((data.xi_grid.size, k_grid.size))
    for j, k in enumerate(k_grid):
        prods = wfs * bessel_k0(float(k) * nodes)
        sums = np.add.reduceat(prods, np.minimum(starts, nodes.size - 1))
        out[live, j] = sums[live]
    return out


# ---------------------------------------------------------------------------
# coefficient extraction
# ---------------------------------------------------------------------------

def _xi_rule(span: tuple, m_top: int, k: float):
    """Panel rule dense enough for phi_{m_top}(sqrt(k) xi) on the span:
    16-node panels, two oscillation periods each."""
    wavelength = math.pi / math.sqrt(2.0 * k * (m_top + 1.0))
    n = max(6, int(math.ceil((span[1] - span[0]) / (2.0 * wavelength))))
    return panel_nodes(span[0], span[1], n, 16)


def _xi_endpoint_check(j_vals: np.ndarray, what: str):
    """Certify decay of the projection integrand at the span ends.

    The Hermite functions in the projection are uniformly bounded and
    O(1) near the integrand peak, so the ratio of |J| at the ends to its
    peak bounds the endpoint ratio of the full integrand within a small
    constant for every order at once.
    """
    peak = float(np.max(np.abs(j_vals)))
    if peak == 0.0:
        return 0.0
    ratio = max(abs(float(j_vals[0])), abs(float(j_vals[-1]))) / peak
    if ratio > _XI_ENDPOINT_TOL:
        raise DomainTruncationError(
            f"{what}: projection integrand still {ratio:.2e} of its peak at "
            f"the grid ends (limit {_XI_ENDPOINT_TOL:g}); widen the xi grid")
    return ratio


def _phi_project(y: np.ndarray, jw: np.ndarray, m_max: int) -> np.ndarray:
    """<jw, phi_m(y)> for m = 0..m_max, blockwise; fixed-order reductions."""
    out = np.empty(m_max + 1, dtype=float)
    p0 = math.pi ** -0.25 * np.exp(-0.5 * y * y)
    out[0] = float(np.add.reduce(jw * p0))
    if m_max == 0:
        return out
    p1 = math.sqrt(2.0) * y * p0
    out[1] = float(np.add.reduce(jw * p1))
    block = np.empty((_LADDER_BLOCK, y.size), dtype=float)
    m = 1
    while m < m_max:
        n_rows = min(_LADDER_BLOCK, m_max - m)
        for r in range(n_rows):
            mm = m + r
            p0, p1 = p1, (math.sqrt(2.0 / (mm + 1)) * y * p1
                          - math.sqrt(mm / (mm + 1.0)) * p0)
            block[r] = p1
        out[m + 1:m + 1 + n_rows] = np.add.reduce(
            block[:n_rows] * jw[None, :], axis=1)
        m += n_rows
    return out


def _coeff_prefactor_log(m_max: int, k: float, eta0: float) -> np.ndarray:
    """ln of sqrt(k) e^{-(k/2) eta0^2} / (N_m g_m(sqrt(k) eta0))."""
    lng = hermite_neg_scaled_log_all(m_max, math.sqrt(k) * eta0)
    if not np.all(np.isfinite(lng)):
        raise RangeOverflowError(
            f"negative-order Hermite logs not finite at k={k:g}")
    return (0.5 * math.log(k) - 0.5 * k * eta0 * eta0
            - _ln_norm(m_max) - lng)


def lambda_m(data: BoundaryData, m: int, k: float) -> float:
    """Spectral coefficient of order m at frequency k from boundary data.

    The boundary columns are K0-averaged in r (data_k0_integral), splined
    across xi, and projected on phi_m(sqrt(k) xi) with the Gaussian
    weight folded in; the prefactor is assembled in log space.  The
    weighted integrand must have decayed at both xi-grid ends.
    """
    if m < 0 or int(m) != m:
        raise ValueError("order must be a nonnegative integer")
    if not (k > 0.0):
        raise ValueError("k must be positive")
    cache = _data_cache(data, "_j_cache")
    if k not in cache:
        cache[k] = np.asarray([data_k0_integral(data, i, k)
                               for i in range(data.xi_grid.size)])
    j_col = cache[k]
    if not np.any(j_col):
        return 0.0
    _xi_endpoint_check(j_col, f"lambda order {m} at k={k:g}")
    spline = CubicSpline(data.xi_grid, j_col)
    span = (float(data.xi_grid[0]), float(data.xi_grid[-1]))
    nodes, wts = _xi_rule(span, int(m), k)
    raw = _phi_project(math.sqrt(k) * nodes, spline(nodes) * wts,
                       int(m))[int(m)]
    pref = _coeff_prefactor_log(int(m), k, data.eta0)[int(m)]
    if pref > 700.0:
        raise RangeOverflowError(f"coefficient prefactor overflows at "
                                 f"m={m}, k={k:g}")
    return float(raw * math.exp(pref))


@dataclass
class CoefficientTable:
    """Spectral coefficients lam[m, j] on (orders 0..m_max) x (k_grid).

    ``resolve_scale`` records the quadrature design point: rows with
    m * k <= resolve_scale are resolved by the fixed xi rule and
    certified; rows beyond it are stored as zeros and never consumed by
    synthesis (see m_resolved), which lie far past any stopping point.
    """
    eta0: float
    m_max: int
    k_grid: np.ndarray
    lam: np.ndarray
    resolve_scale: float
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.k_grid = np.asarray(self.k_grid, dtype=float)
        self.lam = np.asarray(self.lam, dtype=float)
        if self.k_grid.ndim != 1 or np.any(self.k_grid <= 0.0) \
                or np.any(np.diff(self.k_grid) <= 0.0):
            raise ValueError("k grid must be positive and increasing")
        if self.lam.shape != (self.m_max + 1, self.k_grid.size):
            raise ValueError(f"coefficient shape {self.lam.shape} does not "
                             f"match (m_max + 1, len(k_grid))")
        if not np.all(np.isfinite(self.lam)):
            raise ValueError("coefficients must be finite")
        if not (self.eta0 > 0.0):
            raise ValueError("eta0 must be positive")

    def m_resolved(self, j: int) -> int:
        """Highest certified order at k_grid[j]."""
        return min(self.m_max,
                   int(self.resolve_scale / float(self.k_grid[j])))

    def k_index(self, k: float) -> int:
        j = int(np.searchsorted(self.k_grid, k))
        for jj in (j - 1, j):
            if 0 <= jj < self.k_grid.size and \
                    abs(self.k_grid[jj] - k) <= 1e-12 * k:
                return jj
        raise ValueError(f"k={k:g} is not a grid frequency of this table")

    def to_csv(self, path) -> None:
        write_table(path, ("m", "k", "lambda"),
                    forward._product_rows(np.arange(self.m_max + 1),
                                          self.k_grid, self.lam),
                    meta={"eta0": repr(float(self.eta0)),
                          "resolve_scale": repr(float(self.resolve_scale)),
                          **{k: v for k, v in self.meta.items()
                             if not k.startswith("_")}})

    @classmethod
    def from_csv(cls, path) -> "CoefficientTable":
        names, rows, meta = read_table(path)
        if names != ["m", "k", "lambda"]:
            raise ValueError(f"expected columns m,k,lambda, got {names}")
        m_grid, k_grid, lam = forward._rows_to_grid(rows)
        eta0 = float(meta.pop("eta0"))
        scale = float(meta.pop("resolve_scale"))
        return cls(eta0, int(m_grid[-1]), k_grid, lam, scale, meta=meta)


def coefficient_table(data: BoundaryData, k_grid, m_max: int, *,
                      resolve_scale: float = None,
                      n_panels: int = None) -> CoefficientTable:
    """Coefficients lam[m, j] for m = 0..m_max over the k grid.

    One radial panel count and one xi node set serve every cell, sized at
    ``resolve_scale`` (the certified oscillation budget m * k; by default
    m_max saturates it at the smallest k).  Rows beyond the certified
    span at a given k, m > resolve_scale / k, are stored as exact zeros:
    series synthesis stops far below them or reports a truncation
    failure, and CoefficientTable.m_resolved exposes the boundary.  The
    endpoint certificate is checked for every k; the worst ratio lands
    in meta["xi_endpoint_ratio"].
    """
    k_grid = np.asarray(k_grid, dtype=float)
    if m_max < 0:
        raise ValueError("m_max must be >= 0")
    if resolve_scale is None:
        resolve_scale = (m_max + 1.0) * float(k_grid[0])
    j_table = boundary_k0_table(data, k_grid, n_panels=n_panels)
    span = (float(data.xi_grid[0]), float(data.xi_grid[-1]))
    wavelength = math.pi / math.sqrt(2.0 * max(resolve_scale, 1.0))
    n_xi_panels = max(6, int(math.ceil((span[1] - span[0])
                                       / (2.0 * wavelength))))
    nodes, wts = panel_nodes(span[0], span[1], n_xi_panels, 16)
    lam = np.zeros((m_max + 1, k_grid.size), dtype=float)
    worst_end = 0.0
    for j, k in enumerate(k_grid):
        k = float(k)
        col = j_table[:, j]
        peak = float(np.max(np.abs(col)))
        if peak == 0.0:
            continue                      # zero data row: zero coefficients
        worst_end = max(worst_end, max(abs(float(col[0])),
                                       abs(float(col[-1]))) / peak)
        m_top = min(m_max, int(resolve_scale / k))
        jw = CubicSpline(data.xi_grid, col)(nodes) * wts
        raw = _phi_project(math.sqrt(k) * nodes, jw, m_top)
        pref = _coeff_prefactor_log(m_top, k, data.eta0)
        if np.any(pref > 700.0):
            raise RangeOverflowError(f"coefficient prefactor overflows "
                                     f"at k={k:g}")
        lam[: m_top + 1, j] = raw * np.exp(pref)
    if worst_end > _XI_ENDPOINT_TOL:
        raise DomainTruncationError(
            f"coefficient table: boundary transform reaches {worst_end:.2e} "
            f"of its peak at the xi-grid ends (limit {_XI_ENDPOINT_TOL:g}); "
            f"widen the xi grid")
    table = CoefficientTable(data.eta0, m_max, k_grid, lam,
                             float(resolve_scale))
    table.meta["xi_endpoint_ratio"] = worst_end
    table.meta["n_xi_panels"] = n_xi_panels
    return table


def source_coefficient(ph: Phantom, m: int, k: float, *,
                       rtol: float = 1e-9, atol: float = 0.0) -> float:
    """Coefficient of order m straight from the phantom (no boundary data):

        sqrt(pi) 2^{1-m} / m! * integral over the plane of
        f(x, y) e^{(k/2)(eta'^2 - xi'^2)} H_m(sqrt(k) xi') T_m(sqrt(k) eta'),

    with (xi', eta') the parabolic image of (x, y).  Serves as the
    independent oracle for lambda_m; evaluated bump by bump in polar
    coordinates with both quadrature directions refined together.
    """
    if m < 0 or int(m) != m:
        raise ValueError("order must be a nonnegative integer")
    rk = math.sqrt(k)
    pref = _SQRT_PI * 2.0 ** (1 - m) / math.gamma(m + 1)

    # The chart is two-to-one and its inverse has a derivative kink across
    # {y = 0, x > 0}; the exact integrand is smooth there (the product
    # H_m T_m is a polynomial in (x, y) and the Gaussian factor collapses
    # to e^{-k x}), but the evaluated branch is only C^0, so the vertical
    # quadrature direction is split at y = 0 to keep panels on smooth
    # pieces.
    def strip_integral(b, n_y: int, n_x: int) -> float:
        breaks = [b.cy - b.radius, b.cy + b.radius]
        if breaks[0] < 0.0 < breaks[1]:
            breaks.insert(1, 0.0)
        xu, wu = panel_nodes(-1.0, 1.0, n_x, 16)
        parts = []
        for lo, hi in zip(breaks[:-1], breaks[1:]):
            y, wy = panel_nodes(lo, hi, n_y, 16)
            half = np.sqrt(np.maximum(b.radius ** 2 - (y - b.cy) ** 2, 0.0))
            for a in range(0, y.size, 256):        # bound peak memory
                sl = slice(a, min(a + 256, y.size))
                x = b.cx + half[sl, None] * xu[None, :]
                yy = np.broadcast_to(y[sl, None], x.shape)
                rho2 = ((x - b.cx) ** 2
                        + (yy - b.cy) ** 2) / b.radius ** 2
                core = np.maximum(1.0 - rho2, 0.0) ** b.power
                xi_s, eta_s = geometry.chart_from_cartesian(x, yy)
                w = (np.exp(-k * x) * hermite_poly(int(m), rk * xi_s)
                     * hermite_poly_rotated(int(m), rk * eta_s))
                inner = np.add.reduce(core * w * wu[None, :],
                                      axis=1) * half[sl]
                parts.append(float(np.add.reduce(wy[sl] * inner)))
        return b.amplitude * math.fsum(parts)

    total = 0.0
    for b in ph.bumps:
        prev = None
        n_y, n_x = 2, 2
        for _ in range(8):
            val = pref * strip_integral(b, n_y, n_x)   # coefficient units
            if prev is not None:
                if abs(val - prev) <= max(
                        rtol * max(abs(val), abs(prev)), atol):
                    break
            prev = val
            n_y *= 2
            n_x *= 2
        else:
            raise QuadratureError(
                f"source-side coefficient m={m}, k={k:g}: no convergence")
        total += val
    return total


# ---------------------------------------------------------------------------
# field synthesis
# ---------------------------------------------------------------------------

@dataclass
class PsiField:
    """Synthesized exterior profiles Psi[point, j] over the k grid."""
    points: tuple
    k_grid: np.ndarray
    values: np.ndarray
    m_used: np.ndarray
    eta0: float
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.points = tuple(self.points)
        self.k_grid = np.asarray(self.k_grid, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        self.m_used = np.asarray(self.m_used, dtype=int)
        shape = (len(self.points), self.k_grid.size)
        if self.values.shape != shape or self.m_used.shape != shape:
            raise ValueError("values/m_used shape must be (points, k)")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("field values must be finite")
        for p in self.points:
            if p.eta < self.eta0 - 1e-12:
                raise ValueError(f"point {p} lies inside the data parabola")

    def row(self, i: int):
        return self.k_grid, self.values[i]

    def to_csv(self, path) -> None:
        def rows():
            for i, p in enumerate(self.points):
                for j, k in enumerate(self.k_grid):
                    yield (p.xi, p.eta, k, self.values[i, j],
                           self.m_used[i, j])
        write_table(path, ("xi", "eta", "k", "psi", "m_used"), rows(),
                    meta={"eta0": repr(float(self.eta0)),
                          **{k: v for k, v in self.meta.items()
                             if not k.startswith("_")}})

    @classmethod
    def from_csv(cls, path) -> "PsiField":
        names, rows, meta = read_table(path)
        if names != ["xi", "eta", "k", "psi", "m_used"]:
            raise ValueError(f"expected columns xi,eta,k,psi,m_used, "
                             f"got {names}")
        eta0 = float(meta.pop("eta0"))
        pts_xy = rows[:, :2]
        _, first = np.unique(pts_xy, axis=0, return_index=True)
        order = np.sort(first)
        pts = [ParabolicPoint(float(rows[i, 0]), float(rows[i, 1]))
               for i in order]
        n_k = rows.shape[0] // len(pts)
        k_grid = rows[:n_k, 2]
        vals = rows[:, 3].reshape(len(pts), n_k)
        used = rows[:, 4].reshape(len(pts), n_k).astype(int)
        return cls(tuple(pts), k_grid, vals, used, eta0, meta=meta)


def _synthesize_column(table: CoefficientTable, xi: np.ndarray,
                       eta: np.ndarray, j: int, tol: float,
                       floor: np.ndarray = None):
    """Sum the coefficient series at one frequency for a batch of points.

    The stopping test compares each term against tol * max(|partial sum|,
    floor[i]); a zero floor gives the plain relative rule.  Returns
    (values, m_used) or raises SeriesTruncationError naming the first
    point whose stopping rule the certified orders cannot satisfy.
    """
    k = float(table.k_grid[j])
    rk = math.sqrt(k)
    m_cap = table.m_resolved(j)
    lam = table.lam[:, j]
    if floor is None:
        floor = np.zeros(xi.size)
    if not np.any(lam):
        return np.zeros(xi.size), np.zeros(xi.size, dtype=int)
    m_hi = min(m_cap, 256)
    while True:
        lng = hermite_neg_scaled_log_all(m_hi, rk * eta)      # (m+1, pts)
        radial = np.exp(lng + _ln_norm(m_hi)[:, None]
                        + 0.5 * k * (eta * eta)[None, :])
        phi = np.empty_like(radial)
        y = rk * xi
        phi[0] = math.pi ** -0.25 * np.exp(-0.5 * y * y)
        if m_hi >= 1:
            phi[1] = math.sqrt(2.0) * y * phi[0]
            for mm in range(1, m_hi):
                phi[mm + 1] = (math.sqrt(2.0 / (mm + 1)) * y * phi[mm]
                               - math.sqrt(mm / (mm + 1.0)) * phi[mm - 1])
        terms = lam[: m_hi + 1, None] * phi * radial
        sums = np.cumsum(terms, axis=0)
        small = np.abs(terms) <= tol * np.maximum(np.abs(sums),
                                                  floor[None, :])
        csum = np.cumsum(small, axis=0)
        runsum = csum.copy()
        runsum[_STOP_RUN:] = csum[_STOP_RUN:] - csum[:-_STOP_RUN]
        hits = runsum >= _STOP_RUN
        stop = np.argmax(hits, axis=0)
        found = hits[stop, np.arange(xi.size)]
        if np.all(found) or m_hi >= m_cap:
            if not np.all(found):
                i_bad = int(np.nonzero(~found)[0][0])
                ref = max(abs(sums[-1, i_bad]), floor[i_bad], 1e-300)
                ratio = abs(terms[-1, i_bad]) / ref
                raise SeriesTruncationError(
                    f"series at point (xi={xi[i_bad]:g}, eta={eta[i_bad]:g}),"
                    f" k={k:g} not stopped by certified order {m_cap} "
                    f"(last term ratio {ratio:.2e}); raise m_max or widen "
                    f"the resolve scale")
            vals = np.asarray([math.fsum(terms[: stop[i] + 1, i])
                               for i in range(xi.size)])
            return vals, stop
        m_hi = min(2 * m_hi, m_cap)


def build_psi(table: CoefficientTable, p: ParabolicPoint, k: float,
              tol: float = 1e-10):
    """Series value of the exterior field at one point and frequency.

    Stops after 5 consecutive terms below tol * |partial sum|; the
    returned order is where the rule fired.  Raises SeriesTruncationError
    when the rule is not met within the table's certified orders.
    """
    if p.eta < table.eta0 - 1e-12:
        raise ValueError(f"point eta={p.eta:g} is inside the data parabola "
                         f"eta0={table.eta0:g}")
    j = table.k_index(k)
    vals, used = _synthesize_column(table, np.asarray([p.xi]),
                                    np.asarray([p.eta]), j, tol)
    return float(vals[0]), int(used[0])


def synthesize_field(table: CoefficientTable, points, tol: float = 3e-12,
                     meta: dict = None) -> PsiField:
    """Exterior profiles at every point over the table's whole k grid.

    Columns are summed in ascending k with the stopping threshold floored
    at tol times the running per-point field magnitude (the maximum of
    |value| over lower frequencies).  For nonnegative sources the field
    decreases in k, so the floor equals tol * max_k |value|: every entry
    is certified to tol in that absolute sense, and additionally to tol
    relative wherever the local value itself sets the scale.  A plain
    relative rule would instead chase digits that the gridded data cannot
    supply once the field has decayed many orders below its peak.
    """
    points = tuple(points)
    xi = np.asarray([p.xi for p in points], dtype=float)
    eta = np.asarray([p.eta for p in points], dtype=float)
    if np.any(eta < table.eta0 - 1e-12):
        raise ValueError("all synthesis points must satisfy eta >= eta0")
    vals = np.empty((len(points), table.k_grid.size))
    used = np.empty((len(points), table.k_grid.size), dtype=int)
    scale = np.zeros(len(points))
    for j in range(table.k_grid.size):
        vals[:, j], used[:, j] = _synthesize_column(table, xi, eta, j, tol,
                                                    floor=scale)
        scale = np.maximum(scale, np.abs(vals[:, j]))
    fld = PsiField(points, table.k_grid, vals, used, table.eta0,
                   meta=dict(meta or {}))
    fld.meta["series_tol"] = tol
    fld.meta["max_m_used"] = int(np.max(used)) if used.size else 0
    return fld


def psi_direct(ph: Phantom, p: ParabolicPoint, k: float, *,
               rtol: float = 1e-9) -> float:
    """Defining integral of the exterior field, straight from the phantom:
    integral of K0(k r) (circle mean)(x(p), r) dr over the support window.
    The independent oracle for build_psi."""
    if not (k > 0.0):
        raise ValueError("k must be positive")
    center = geometry.to_cartesian(p)
    r_lo, r_hi = forward.support_bounds(ph, center)
    if r_hi <= r_lo:
        return 0.0
    prev = None
    n = 8
    for _ in range(12):
        nodes, wts = panel_nodes(r_lo, r_hi, n, 16)
        fv = forward.spherical_mean(ph, center, nodes)
        val = float(np.add.reduce(wts * fv * bessel_k0(k * nodes)))
        if prev is not None:
            scale = max(abs(val), abs(prev), 1e-300)
            if abs(val - prev) <= rtol * scale:
                return val
        prev = val
        n *= 2
    raise QuadratureError(f"direct field integral at k={k:g} did not "
                          f"reach rtol={rtol:g}")
