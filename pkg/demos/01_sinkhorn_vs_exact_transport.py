"""Entropic vs exact optimal transport on small point clouds.

Walks through the three transport quantities the library exposes: the sharp
entropic cost (training loss backbone), the debiased divergence (what the
trainer actually minimizes) and exact EMD (the evaluation metric), showing
how the entropic cost approaches the exact one as the regularization
shrinks.
"""

import numpy as np

from bridgeforge import ot
from bridgeforge.ot import SinkhornConfig

rng = np.random.default_rng(0)

print("=== two interleaved crescent clouds, n = 64 ===")
theta = rng.uniform(0, np.pi, 64)
a = np.stack([np.cos(theta), np.sin(theta)], axis=1) + 0.05 * rng.normal(size=(64, 2))
b = np.stack([1 - np.cos(theta), 0.6 - np.sin(theta)], axis=1) + 0.05 * rng.normal(size=(64, 2))

exact = ot.emd_exact(a, b)
print(f"exact transport cost (assignment solve): {exact:.6f}")
print(f"metric form sqrt(cost):                  {ot.mdd(a, b):.6f}\n")

print("epsilon     entropic cost   gap to exact   iterations")
for eps in (1.0, 0.1, 0.01, 1e-3):
    res = ot.sinkhorn_cost(a, b, SinkhornConfig(epsilon=eps, max_iters=20000, tol=1e-9))
    print(f"{eps:8.0e}   {float(res.value):13.6f}   {float(res.value) - exact:12.3e}"
          f"   {res.iterations:10d}")

print("\nThe gap shrinks monotonically: the plan sharpens onto the optimal")
print("assignment while the annealed log-domain solver stays stable.\n")

print("=== debiased divergence ===")
same = ot.sinkhorn_divergence(a, a.copy())
print(f"divergence of a cloud with itself: {float(same.value):.2e} (exactly zero)")
for shift in (2.0, 1.0, 0.5, 0.1):
    moved = a + np.array([shift, 0.0])
    res = ot.sinkhorn_divergence(a, moved)
    print(f"cloud shifted by {shift:4.1f}: divergence {float(res.value):10.6f}")
print("\nShrinking the shift drives the divergence to zero, unlike the raw")
print("entropic cost which would keep an entropy bias.")

print("\n=== 1-d sanity: sorted pairing is optimal ===")
x = rng.normal(size=(512, 1))
y = 0.7 * rng.normal(size=(512, 1)) + 0.3
sorted_cost = float(np.mean((np.sort(x[:, 0]) - np.sort(y[:, 0])) ** 2))
print(f"assignment solver: {ot.emd_exact(x, y):.9f}")
print(f"sorted pairing:    {sorted_cost:.9f}")
