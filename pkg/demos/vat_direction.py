"""Compare the power-iteration VAT direction with a brute-force search over
3600 directions for a random two-dimensional linear softmax head.

Power iteration recovers an eigenvector, so the sign is arbitrary; at finite
radius KL is not symmetric and one of +d, -d is slightly better.
"""
import numpy as np

from adaptlab import nn
from adaptlab.vat import VatConfig, epsilon_abs, lds_loss, vat_direction

rng = np.random.default_rng(3)
W, b = rng.standard_normal((3, 2)) * 2, rng.standard_normal(3)
head = nn.MLP([(W, b)], "identity")
z = rng.standard_normal((1, 2))

angles = np.arange(3600) * 2 * np.pi / 3600
D = np.stack([np.cos(angles), np.sin(angles)], axis=1)

for k in (1, 2, 5, 10):
    config = VatConfig(power_iters=k)
    eps = epsilon_abs(z, config)
    p = nn.softmax(z @ W.T + b)
    q = nn.softmax((z + eps * D) @ W.T + b)
    best = D[np.argmax((p * (np.log(p) - np.log(q))).sum(axis=1))]
    d = vat_direction(head, z, config, seed=0)
    print(f"K={k:<3d} |cos| to brute force {abs(d[0] @ best):.6f}  "
          f"LDS along +d {lds_loss(head, z, d, eps):.3e}, -d {lds_loss(head, z, -d, eps):.3e}  grid best {lds_loss(head, z, best[None], eps):.3e}")
