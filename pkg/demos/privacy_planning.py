# Planning a privacy budget before training.
#
# Before spending compute on a DP run you usually want two numbers: how much
# noise a target epsilon needs, and how epsilon grows as training goes on.

import numpy as np

from dpge import account, calibrate_sigma, rdp_curve, compose, rdp_to_eps

# A dataset of 60k records, lots of 600 (so q = 0.01), 2000 steps.
N, B, T = 60_000, 600, 2000
q = B / N
delta = 1e-5

sigma = calibrate_sigma(target_epsilon=3.0, delta=delta, q=q, steps=T)
eps, order = account(q, sigma, T, delta)
print(f"sigma for eps<=3: {sigma:.4f}  (accounted eps {eps:.4f} at order {order})")

# The per-step curve only needs computing once. Composition is just a scale,
# so the whole epsilon trajectory is cheap.
curve = rdp_curve(q, sigma)
for t in (1, 10, 100, 500, 1000, 2000):
    e, a = rdp_to_eps(compose(curve, t), delta)
    print(f"step {t:5d}  eps {e:8.4f}  best order {a}")

# More noise means a smaller epsilon, with diminishing returns.
for s in np.linspace(0.6, 2.0, 8):
    print(f"sigma {s:.2f} -> eps {account(q, s, T, delta)[0]:.3f}")
