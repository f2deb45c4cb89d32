"""Built-in 3x3 example: tracking the worst-case diagonal along a perturbation path.

``A`` is perturbed by ``0.3 E(t)`` with ``E(t) = M(t) / ||M(t)||_F`` on
``t in [0, 1]`` and ``m = 0.5``.  The worst-case diagonal is followed on the
grid ``h = 0.05`` with the plain sign iteration warm-started from the
previous grid point, so a switch is reported only when the old vertex stops
being a fixed point.
"""

import csv
import io
from typing import NamedTuple

import numpy as np

from .extremal import diag_gradient, find_extremizer

__all__ = ["A_ILLUSTRATIVE", "EPSILON", "M_SLOPE", "direction", "TrackPoint", "Transition", "track", "schedule_csv"]

A_ILLUSTRATIVE = np.array([
    [-0.39, -1.16, 0.74],
    [1.14, 0.96, 0.15],
    [0.42, -0.14, -2.32],
])
EPSILON = 0.3
M_SLOPE = 0.5


def direction(t) -> np.ndarray:
    """Unit-norm perturbation direction ``E(t)``."""
    M = np.array([
        [-np.sin(2 * t) / 2, np.sin(t * t), t],
        [-t / 4, -t, np.sin(t / 2)],
        [-np.sin(t) ** 2, np.cos(t), t],
    ])
    return M / np.linalg.norm(M)


class TrackPoint(NamedTuple):
    t: float
    mu: float
    d_star: np.ndarray
    gradient: np.ndarray


class Transition(NamedTuple):
    """A change of worst-case diagonal, with the gradient under the old and new vertex."""

    t: float
    d_old: np.ndarray
    d_new: np.ndarray
    gradient_old: np.ndarray
    gradient_new: np.ndarray


def track(h=0.05, t_end=1.0, A=A_ILLUSTRATIVE, eps=EPSILON, m=M_SLOPE):
    """Follow the worst-case diagonal on ``t = 0, h, ..., t_end``.

    Returns ``(points, transitions)``.
    """
    steps = int(round(t_end / h))
    points, transitions = [], []
    d = None
    for k in range(steps + 1):
        t = k * h
        B = A + eps * direction(t)
        rep = find_extremizer(B, m, warm_start=d, polish=False)
        if d is not None and not np.array_equal(rep.d_star, d):
            transitions.append(Transition(t, d, rep.d_star, diag_gradient(B, d), diag_gradient(B, rep.d_star)))
        d = rep.d_star
        points.append(TrackPoint(t, rep.mu_value, d, diag_gradient(B, d)))
    return points, transitions


def _dstr(d, m):
    return " ".join("m" if v == m else "1" for v in d)


def schedule_csv(points, m=M_SLOPE) -> str:
    """CSV with columns ``t, mu, d_star, g1, g2, g3``."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t", "mu", "d_star"] + [f"g{i + 1}" for i in range(len(points[0].gradient))])
    for p in points:
        w.writerow([f"{p.t:.2f}", repr(p.mu), _dstr(p.d_star, m)] + [repr(float(v)) for v in p.gradient])
    return buf.getvalue()
