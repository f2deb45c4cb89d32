"""
Stabilizing a two-layer field
=============================

For ``x' = A2 phi(A1 x)`` the relevant quantity is the worst case of
``mu2(D2 A2 D1 A1)`` over two diagonals.  Both weights are perturbed with the
same amplitude and independent unit-norm directions.
"""

# %%
import numpy as np

from logstab.two_layer import TwoLayerInstance, double_vertex_oracle, format_two_layer_result, two_layer_stabilize

rng = np.random.default_rng(104)
A1, A2 = rng.standard_normal((3, 3)), rng.standard_normal((3, 3))
m = 0.5
mu0 = double_vertex_oracle(A1, A2, m).mu_value
res = two_layer_stabilize(TwoLayerInstance(A1, A2, m, 0.5 * mu0))

# %%
# The result document lists both worst-case diagonals, both directions and
# the Newton trace.
print(format_two_layer_result(res))

# %%
# Enumeration over all 64 pairs of vertices confirms the certificate.
print("target", 0.5 * mu0, "enumerated", double_vertex_oracle(res.A1_hat, res.A2_hat, m).mu_value)
