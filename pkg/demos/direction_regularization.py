"""Move only the negative of a hard triplet by gradient descent and watch the
cosine between (n - a) and (p - a) with and without the direction penalty.

Run: python3 demos/direction_regularization.py
"""

import numpy as np

from metric_forge import direction_cos, directed_triplet_loss

rng = np.random.default_rng(1)
a = rng.standard_normal(8)
v = rng.standard_normal(8)
v /= np.linalg.norm(v)
p = a + 1.0 * v
n0 = a + 0.2 * (0.8 * v + 0.6 * np.linalg.qr(np.stack([v, rng.standard_normal(8)]).T)[0][:, 1])

for gamma in (0.0, 1.0):
    n = n0.copy()
    trace = [direction_cos(a, p, n).value]
    for _ in range(200):
        out = directed_triplet_loss(a, p, n, alpha=0.2, gamma=gamma)
        n = n - 0.05 * out.grad_embeddings[2]
        trace.append(direction_cos(a, p, n).value)
    marks = ", ".join(f"{trace[i]:+.3f}" for i in (0, 10, 50, 100, 200))
    print(f"gamma={gamma}: cos at steps 0/10/50/100/200 = {marks}; |n-a| = {np.linalg.norm(n - a):.3f}")
