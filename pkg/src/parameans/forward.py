"""Forward model: phantoms and their circle means.

A phantom is a finite sum of radial polynomial bumps

    f(z) = sum_b A_b * (1 - |z - c_b|^2 / R_b^2)_+^{p_b},

compactly supported and C^{p-1} across each bump edge.  Its circle-mean
transform, with the circumference factor kept,

    (M f)(c, r) = r * int_0^{2pi} f(c + r e^{i theta}) d theta,

is what the rest of the package consumes: sampled on circles centered on
the parabola eta = eta0 it is the boundary data, and at exterior centers
it is the quantity the inversion must reproduce.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline

from . import geometry
from .errors import (DomainTruncationError, GridResolutionError,
                     QuadratureError)
from .quadrature import panel_nodes

_MEAN_RTOL = 1e-10


@dataclass(frozen=True)
class Bump:
    """One radial bump A (1 - |z - c|^2/R^2)_+^p."""
    cx: float
    cy: float
    radius: float
    amplitude: float
    power: int

    def __post_init__(self):
        if not (self.radius > 0.0 and math.isfinite(self.radius)):
            raise ValueError(f"radius must be positive, got {self.radius}")
        if int(self.power) != self.power or self.power < 2:
            raise ValueError(f"power must be an integer >= 2, got {self.power}")
        if not math.isfinite(self.amplitude):
            raise ValueError("amplitude must be finite")

    @property
    def mass(self) -> float:
        """Integral over the plane: A pi R^2 / (p + 1)."""
        return self.amplitude * math.pi * self.radius ** 2 / (self.power + 1)


def _bump_eta_reach(b: Bump) -> float:
    """Largest eta over the closed disk of b, with a sampling safety pad."""
    n = 8192
    th = np.linspace(0.0, 2.0 * math.pi, n, endpoint=False)
    x = b.cx + b.radius * np.cos(th)
    y = b.cy + b.radius * np.sin(th)
    _, eta = geometry.chart_from_cartesian(x, y)
    # |grad eta| = 1 / sqrt(xi^2 + eta^2) = 1 / sqrt(2 |z|); pad by the arc gap
    d0 = math.hypot(b.cx, b.cy)
    wmin = math.sqrt(2.0 * max(d0 - b.radius, 1e-3))
    pad = (2.0 * math.pi * b.radius / n) / wmin
    return float(np.max(eta)) + pad


@dataclass(frozen=True)
class Phantom:
    """A sum of bumps constrained to lie inside eta <= eta0 - margin."""
    bumps: tuple
    eta0: float
    margin: float

    def __post_init__(self):
        object.__setattr__(self, "bumps", tuple(self.bumps))
        if not self.bumps:
            raise ValueError("phantom needs at least one bump")
        if not (self.eta0 > 0.0 and math.isfinite(self.eta0)):
            raise ValueError(f"eta0 must be positive, got {self.eta0}")
        if not (0.0 < self.margin < self.eta0):
            raise ValueError(f"margin must lie in (0, eta0), got {self.margin}")
        for i, b in enumerate(self.bumps):
            reach = _bump_eta_reach(b)
            if reach > self.eta0 - self.margin:
                raise ValueError(
                    f"bump {i} (center ({b.cx}, {b.cy}), radius {b.radius}) "
                    f"reaches eta = {reach:.6f}, outside the allowed "
                    f"eta <= {self.eta0 - self.margin:.6f}")

    @property
    def mass(self) -> float:
        return float(sum(b.mass for b in self.bumps))

    def eta_reach(self) -> float:
        """Largest eta over the support (used to size expansion orders)."""
        return max(_bump_eta_reach(b) for b in self.bumps)


def evaluate(phantom: Phantom, x, y):
    """Pointwise phantom values on arrays x, y."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    out = np.zeros(np.broadcast(x, y).shape, dtype=float)
    for b in phantom.bumps:
        d2 = (x - b.cx) ** 2 + (y - b.cy) ** 2
        core = 1.0 - d2 / (b.radius * b.radius)
        np.maximum(core, 0.0, out=core)
        out += b.amplitude * core ** b.power
    return out


def support_bounds(phantom: Phantom, center) -> tuple:
    """Radii (r_lo, r_hi) bracketing all circles about `center` that meet
    the phantom support; r_lo = 0 when the center lies inside it."""
    cx, cy = float(center[0]), float(center[1])
    lo = math.inf
    hi = 0.0
    for b in phantom.bumps:
        d = math.hypot(cx - b.cx, cy - b.cy)
        lo = min(lo, max(0.0, d - b.radius))
        hi = max(hi, d + b.radius)
    return lo, hi


def _bump_arc_mean(b: Bump, cx: float, cy: float, rl: np.ndarray) -> np.ndarray:
    """r * int f_b(c + r e^{i theta}) dtheta for one bump, radii rl > 0.

    The circle meets the disk of b over |theta - theta_b| <= delta(r)
    with cos delta = (d^2 + r^2 - R^2) / (2 d r); the integral runs only
    over that arc, where the integrand is smooth and vanishes to order p
    at the ends, so composite Gauss-Legendre panels converge fast at any
    distance.
    """
    d = math.hypot(b.cx - cx, b.cy - cy)
    R = b.radius
    if d == 0.0:
        # concentric: the integrand is constant in theta
        core = np.maximum(1.0 - rl * rl / (R * R), 0.0)
        return 2.0 * math.pi * rl * b.amplitude * core ** b.power
    theta_b = math.atan2(b.cy - cy, b.cx - cx)
    cosw = (d * d + rl * rl - R * R) / (2.0 * d * rl)
    delta = np.arccos(np.clip(cosw, -1.0, 1.0))
    out = np.zeros_like(rl)
    live = delta > 0.0
    if not np.any(live):
        return out
    rv = rl[live]
    dv = delta[live]
    prev = None
    n_panels = 4
    for _ in range(11):
        u, w = panel_nodes(-1.0, 1.0, n_panels, 16)
        th = theta_b + dv[:, None] * u[None, :]
        fx = cx + rv[:, None] * np.cos(th)
        fy = cy + rv[:, None] * np.sin(th)
        core = 1.0 - ((fx - b.cx) ** 2 + (fy - b.cy) ** 2) / (R * R)
        np.maximum(core, 0.0, out=core)
        vals = rv * dv * b.amplitude * np.add.reduce(core ** b.power * w, axis=1)
        if prev is not None:
            scale = max(float(np.max(np.abs(vals))), 1e-300)
            if float(np.max(np.abs(vals - prev))) <= _MEAN_RTOL * scale:
                out[live] = vals
                return out
        prev = vals
        n_panels *= 2
    raise QuadratureError(f"circle mean: no convergence at {n_panels} panels")


def spherical_mean(phantom: Phantom, center, r):
    """Circle means r * int f(c + r e^{i theta}) dtheta at one center.

    r may be a scalar or an array.  Each bump is integrated over exactly
    the arc where the circle meets its disk (identically zero elsewhere),
    with Gauss-Legendre panels doubled until successive values agree to
    1e-10 relative.
    """
    cx, cy = float(center[0]), float(center[1])
    rs = np.atleast_1d(np.asarray(r, dtype=float))
    if np.any(rs < 0.0):
        raise ValueError("radius must be >= 0")
    out = np.zeros_like(rs)
    pos = rs > 0.0
    for b in phantom.bumps:
        d = math.hypot(b.cx - cx, b.cy - cy)
        live = pos & (rs > d - b.radius) & (rs < d + b.radius)
        if np.any(live):
            out[live] += _bump_arc_mean(b, cx, cy, rs[live])
    return out if np.ndim(r) else float(out[0])


def _mean_theta_trapezoid(phantom: Phantom, center, r, n: int) -> np.ndarray:
    """Plain n-node periodic trapezoid in theta; independent cross-check."""
    cx, cy = float(center[0]), float(center[1])
    rs = np.atleast_1d(np.asarray(r, dtype=float))
    th = np.linspace(0.0, 2.0 * math.pi, n, endpoint=False)
    fx = cx + rs[:, None] * np.cos(th)[None, :]
    fy = cy + rs[:, None] * np.sin(th)[None, :]
    return rs * (2.0 * math.pi / n) * np.add.reduce(
        evaluate(phantom, fx, fy), axis=1)


# ---------------------------------------------------------------------------
# boundary data on the parabola
# ---------------------------------------------------------------------------

@dataclass
class BoundaryData:
    """Circle means sampled at centers (xi_i, eta0) for radii r_j.

    values[i, j] = (M f)(center(xi_i), r_j); rows follow xi_grid.
    """
    xi_grid: np.ndarray
    r_grid: np.ndarray
    values: np.ndarray
    eta0: float
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.xi_grid = np.asarray(self.xi_grid, dtype=float)
        self.r_grid = np.asarray(self.r_grid, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if self.xi_grid.ndim != 1 or self.r_grid.ndim != 1:
            raise ValueError("grids must be one-dimensional")
        if np.any(np.diff(self.xi_grid) <= 0.0) or np.any(np.diff(self.r_grid) <= 0.0):
            raise ValueError("grids must be strictly increasing")
        if self.r_grid[0] < 0.0:
            raise ValueError("radii must be >= 0")
        if self.values.shape != (self.xi_grid.size, self.r_grid.size):
            raise ValueError(f"values shape {self.values.shape} does not match "
                             f"grids ({self.xi_grid.size}, {self.r_grid.size})")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("values must be finite")
        if not (self.eta0 > 0.0):
            raise ValueError("eta0 must be positive")
        self._splines = {}

    def column_spline(self, i: int) -> CubicSpline:
        """Cubic spline of column i in r (cached)."""
        if i not in self._splines:
            self._splines[i] = CubicSpline(self.r_grid, self.values[i])
        return self._splines[i]

    # -- serialization ------------------------------------------------------

    def to_csv(self, path) -> None:
        write_table(path, ("xi", "r", "value"),
                    _product_rows(self.xi_grid, self.r_grid, self.values),
                    meta={"eta0": repr(float(self.eta0)), **self.meta})

    @classmethod
    def from_csv(cls, path) -> "BoundaryData":
        names, rows, meta = read_table(path)
        if names != ["xi", "r", "value"]:
            raise ValueError(f"expected columns xi,r,value, got {names}")
        xi, r, vals = _rows_to_grid(rows)
        if "eta0" not in meta:
            raise ValueError("boundary file lacks an eta0 header entry")
        eta0 = float(meta.pop("eta0"))
        return cls(xi, r, vals, eta0, meta=meta)


def sample_boundary(phantom: Phantom, xi_grid, r_grid) -> BoundaryData:
    """Sample the circle means of `phantom` on the parabola eta = eta0.

    Each xi column is only integrated over the radii that can meet the
    support; everything else is exactly zero.  Raises
    DomainTruncationError when the radial grid fails to cover a column's
    support window and GridResolutionError when the radial spacing
    cannot resolve the narrowest bump.
    """
    xi_grid = np.asarray(xi_grid, dtype=float)
    r_grid = np.asarray(r_grid, dtype=float)
    dr = float(np.max(np.diff(r_grid)))
    r_need = min(b.radius for b in phantom.bumps) / 6.0
    if dr > r_need:
        raise GridResolutionError(
            f"radial spacing {dr:g} too coarse for bump radius; need <= {r_need:g}")
    vals = np.zeros((xi_grid.size, r_grid.size), dtype=float)
    for i, xi in enumerate(xi_grid):
        cx, cy = geometry.chart_to_cartesian(xi, phantom.eta0)
        lo, hi = support_bounds(phantom, (cx, cy))
        if hi > r_grid[-1] + 1e-12:
            raise DomainTruncationError(
                f"column xi={xi:g}: support reaches r={hi:g}, beyond the "
                f"radial grid end {r_grid[-1]:g}")
        j0, j1 = np.searchsorted(r_grid, (lo, hi))
        j0 = max(j0 - 1, 0)
        if j1 > j0:
            vals[i, j0:j1] = spherical_mean(phantom, (cx, cy), r_grid[j0:j1])
    return BoundaryData(xi_grid, r_grid, vals, phantom.eta0)


# ---------------------------------------------------------------------------
# phantom files
# ---------------------------------------------------------------------------

def load_phantom(path) -> Phantom:
    """Read a phantom description.

    Plain text: '#' comments, then 'eta0 <v>', 'margin <v>', and one
    'bump <cx> <cy> <radius> <amplitude> <power>' line per bump.
    """
    eta0 = None
    margin = None
    bumps = []
    with open(path, "r", encoding="utf-8") as fh:
        for ln, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            try:
                if parts[0] == "eta0" and len(parts) == 2:
                    eta0 = float(parts[1])
                elif parts[0] == "margin" and len(parts) == 2:
                    margin = float(parts[1])
                elif parts[0] == "bump" and len(parts) == 6:
                    bumps.append(Bump(float(parts[1]), float(parts[2]),
                                      float(parts[3]), float(parts[4]),
                                      int(parts[5])))
                else:
                    raise ValueError(f"unrecognized line {ln}: {raw.strip()!r}")
            except ValueError as e:
                raise ValueError(f"{path}: line {ln}: {e}") from None
    if eta0 is None or margin is None:
        raise ValueError(f"{path}: needs both eta0 and margin entries")
    return Phantom(tuple(bumps), eta0, margin)


def save_phantom(phantom: Phantom, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"eta0 {phantom.eta0!r}\nmargin {phantom.margin!r}\n")
        for b in phantom.bumps:
            fh.write(f"bump {b.cx!r} {b.cy!r} {b.radius!r} "
                     f"{b.amplitude!r} {b.power}\n")


# ---------------------------------------------------------------------------
# deterministic CSV helpers (shared by the other table types)
# ---------------------------------------------------------------------------

def write_table(path, names, rows, meta=None) -> None:
    """Write a CSV table with '#' header comments, 17 significant digits,
    and LF line endings regardless of platform.

    Rows are streamed to disk as they are formatted; boundary tables run to
    tens of millions of rows and must never be buffered whole.
    """
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for key, val in (meta or {}).items():
            fh.write(f"# {key} = {val}\n")
        fh.write(",".join(names) + "\n")
        for row in rows:
            fh.write(",".join("%.17g" % v for v in row) + "\n")


def read_table(path):
    """Read a CSV written by write_table: (names, value-rows, meta dict).

    The comment block and the column header are parsed line by line; the
    numeric body is handed to np.loadtxt so large tables parse in C instead
    of accumulating per-row Python lists.
    """
    meta = {}
    names = None
    with open(path, "r", encoding="utf-8") as fh:
        for raw in fh:
            line = raw.strip()
            if not line:
                continue
            if line.startswith("#"):
                body = line[1:].strip()
                if "=" in body:
                    key, val = body.split("=", 1)
                    meta[key.strip()] = val.strip()
                continue
            names = [c.strip() for c in line.split(",")]
            break
        if names is None:
            raise ValueError(f"{path}: no header row")
        try:
            rows = np.loadtxt(fh, delimiter=",", dtype=float, ndmin=2)
        except ValueError as exc:
            if "no data" in str(exc).lower():
                rows = np.empty((0, len(names)))
            else:
                raise
    if rows.size and rows.shape[1] != len(names):
        raise ValueError(f"{path}: rows have {rows.shape[1]} columns, "
                         f"header names {len(names)}")
    return names, rows, meta


def _product_rows(a_grid, b_grid, values):
    """Rows (a, b, value) in row-major order over a x b."""
    for i, a in enumerate(a_grid):
        for j, b in enumerate(b_grid):
            yield (a, b, values[i, j])


def _rows_to_grid(rows):
    """Invert _product_rows: recover both grids and the value matrix."""
    if rows.size == 0:
        raise ValueError("empty table")
    a_vals = rows[:, 0]
    b_vals = rows[:, 1]
    a_grid = np.unique(a_vals)
    b_grid = np.unique(b_vals)
    n, m = a_grid.size, b_grid.size
    if n * m != rows.shape[0]:
        raise ValueError("table is not a full product grid")
    order = np.lexsort((b_vals, a_vals))
    vals = rows[order, 2].reshape(n, m)
    return a_grid, b_grid, vals
