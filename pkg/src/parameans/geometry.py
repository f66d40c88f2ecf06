"""Parabolic coordinates in the plane.

The chart (xi, eta) -> ((xi^2 - eta^2) / 2, xi * eta) is the square map
z = w^2 / 2 with w = xi + i eta.  It sends the closed half plane eta >= 0
onto the whole (x, y) plane; level curves of eta are confocal parabolas
opening along the positive x axis, with focus at the origin.  The curve
eta = eta0 splits the plane into an interior (eta < eta0, containing the
positive x axis) and an exterior (eta > eta0).

The inverse chart is fixed by the convention eta >= 0, which is two-valued
only on the ray {y = 0, x > 0}; there the branch with xi > 0, eta = 0 is
returned.  Distances factor through the chart:

    |z - z'| = |w - w'| |w + w'| / 2,

which is the form used here (no cancellation for nearby points).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class ParabolicPoint:
    """A point of the half plane eta >= 0 in parabolic coordinates."""
    xi: float
    eta: float

    def __post_init__(self):
        if not (math.isfinite(self.xi) and math.isfinite(self.eta)):
            raise ValueError("coordinates must be finite")
        if self.eta < 0.0:
            raise ValueError(f"eta must be >= 0, got {self.eta}")


@dataclass(frozen=True)
class Parabola:
    """The boundary curve eta = eta0 (eta0 > 0) of the interior region."""
    eta0: float

    def __post_init__(self):
        if not (math.isfinite(self.eta0) and self.eta0 > 0.0):
            raise ValueError(f"eta0 must be positive and finite, got {self.eta0}")

    def point(self, xi: float) -> ParabolicPoint:
        return ParabolicPoint(xi, self.eta0)


# ---------------------------------------------------------------------------
# chart and inverse chart
# ---------------------------------------------------------------------------

def chart_to_cartesian(xi, eta):
    """Map coordinate arrays (xi, eta) to cartesian (x, y)."""
    xi = np.asarray(xi, dtype=float)
    eta = np.asarray(eta, dtype=float)
    return 0.5 * (xi * xi - eta * eta), xi * eta


def chart_from_cartesian(x, y):
    """Inverse chart: cartesian arrays to (xi, eta) with eta >= 0.

    On the positive x axis the branch xi = +sqrt(2 x), eta = 0 is taken.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    r = np.hypot(x, y)
    xi = np.zeros_like(r)
    eta = np.zeros_like(r)

    right = (x >= 0.0) & (r > 0.0)
    if np.any(right):
        s = np.sqrt(r[right] + x[right])          # s > 0 away from the origin
        xi[right] = np.where(y[right] != 0.0, np.copysign(s, y[right]), s)
        eta[right] = np.abs(y[right]) / s

    left = (x < 0.0)
    if np.any(left):
        e = np.sqrt(r[left] - x[left])            # e >= sqrt(|x|) > 0
        eta[left] = e
        xi[left] = y[left] / e

    return xi, eta


def to_cartesian(p: ParabolicPoint):
    """Cartesian image of a point, as a (x, y) tuple of floats."""
    x, y = chart_to_cartesian(p.xi, p.eta)
    return float(x), float(y)


def from_cartesian(x: float, y: float) -> ParabolicPoint:
    """Preimage of a cartesian point under the chart, with eta >= 0."""
    xi, eta = chart_from_cartesian(x, y)
    return ParabolicPoint(float(xi), float(eta))


# ---------------------------------------------------------------------------
# metric quantities
# ---------------------------------------------------------------------------

def distance(p: ParabolicPoint, q: ParabolicPoint) -> float:
    """Euclidean distance between the cartesian images of p and q."""
    return 0.5 * math.hypot(p.xi - q.xi, p.eta - q.eta) \
               * math.hypot(p.xi + q.xi, p.eta + q.eta)


def jacobian(p: ParabolicPoint) -> float:
    """Area element of the chart, xi^2 + eta^2 (vanishes at the focus)."""
    return p.xi * p.xi + p.eta * p.eta


def is_interior(parabola: Parabola, x: float, y: float) -> bool:
    """True when the cartesian point lies strictly inside the parabola."""
    _, eta = chart_from_cartesian(x, y)
    return bool(eta < parabola.eta0)
