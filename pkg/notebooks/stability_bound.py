"""
Checking the amplification bound of a stabilized neural ODE
===========================================================

Trajectories of ``x' = phi(A x + b)`` with a smoothed LeakyReLU ``phi`` obey
``||x1(T) - x2(T)|| <= exp(delta T) ||x1(0) - x2(0)||`` whenever every
``D`` in ``[alpha, 1]^n`` gives ``mu2(D A) <= delta``.  We stabilize a random
layer and compare the empirical amplification with the bound.
"""

# %%
import numpy as np

from logstab.extremal import vertex_oracle
from logstab.node import NeuralOdeModel, SmoothedLeakyReLU, format_report, verify_bound
from logstab.outer import stabilize

rng = np.random.default_rng(1)
A, b = rng.standard_normal((4, 4)), rng.standard_normal(4)
act = SmoothedLeakyReLU(0.1)
print("worst-case log-norm before:", vertex_oracle(A, 0.1).mu_value)

# %%
# Stabilize to a contractive target and integrate both models with 2000
# explicit Euler steps on ``[0, 1]``.
delta = -0.2
res = stabilize(A, delta, 0.1)
for label, W in (("original", A), ("stabilized", res.A_hat)):
    model = NeuralOdeModel([(W, b)], act, 1.0, 2000)
    rep = verify_bound(model, delta, trials=300)
    print(label)
    print(format_report(rep))
