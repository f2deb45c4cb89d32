"""
Worst-case activation slopes along a perturbation path
======================================================

A 3x3 weight matrix is perturbed by ``0.3 E(t)`` with a unit-norm direction
``E(t)``.  For every ``t`` on a grid we find the diagonal ``D`` in
``[0.5, 1]^3`` that maximizes ``mu2(D (A + 0.3 E(t)))`` and watch it switch.
"""

# %%
# The built-in instance and the tracking grid ``h = 0.05``.
import numpy as np

from logstab.extremal import vertex_oracle
from logstab.illustrative import A_ILLUSTRATIVE, EPSILON, M_SLOPE, direction, schedule_csv, track

print(A_ILLUSTRATIVE)
points, transitions = track()

# %%
# The worst-case value decreases along the path and the maximizer is a vertex
# of the box at every grid point.
print(schedule_csv(points))

# %%
# A single switch of the worst-case vertex.  The gradient with respect to
# ``d`` tells which slope wants to move: a positive entry pushes towards 1,
# a negative one towards ``m``.
for tr in transitions:
    print(f"t = {tr.t:.2f}: {tr.d_old} -> {tr.d_new}")
    print("  gradient at old vertex", np.round(tr.gradient_old, 4))
    print("  gradient at new vertex", np.round(tr.gradient_new, 4))

# %%
# The tracker follows a fixed point of the sign iteration, which is a local
# maximizer.  Enumerating the 8 vertices shows that the new vertex is already
# slightly better at ``t = 0.40``; the old one is abandoned only once it
# stops being a fixed point.
for p in points:
    best = vertex_oracle(A_ILLUSTRATIVE + EPSILON * direction(p.t), M_SLOPE)
    if best.mu_value > p.mu + 1e-12:
        print(f"t = {p.t:.2f}: tracked {p.d_star} {p.mu:.6f}, global {best.d_star} {best.mu_value:.6f}")
