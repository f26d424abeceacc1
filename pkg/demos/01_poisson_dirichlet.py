"""
Poisson-Dirichlet partitions
============================

Sample a truncated PD(x, 0) partition, read the tail index off the
rank-weight slope, and compare the mean top weight with its exact value.
"""

import numpy as np

from rostlab.pointproc import estimate_pd_x, sample_pd
from rostlab.streams import replica_rng

# one sample: 10^4 atoms plus the mean mass of everything below the last one
mp = sample_pd(0.5, 10_000, replica_rng(1, "demo/pd"))
print("top five weights:", np.round(mp.weights[:5], 4))
print("unstored remainder:", f"{mp.remainder_mass:.2e}")

# log xi_n against log n has slope -1/x far enough into the tail
fit = estimate_pd_x(mp, (100, 10_000), n_boot=100, rng=replica_rng(1, "demo/boot"))
print(f"x_hat = {fit.x_hat:.4f} +- {fit.stderr:.4f}")

# E[xi_1] for x = 0.5 is 0.62651 (Laplace-transform integral, see tests/oracles)
top = [sample_pd(0.5, 10_000, replica_rng(2, "demo/top", i)).weights[0] for i in range(2000)]
print(f"mean top weight over 2000 samples: {np.mean(top):.4f} +- {np.std(top) / np.sqrt(2000):.4f}")
