"""
Adaptive pooling windows and their structural maps
==================================================

How a pooling projector compresses a patch grid, and why its
query-to-patch map is known without any gradients.
"""

import numpy as np

from rgaekit import compressor as C

# 576 patches (24 x 24) pooled to 144 tokens: uniform 2 x 2 windows
plan = C.plan_bins(24, 12)
print(plan.describe().splitlines()[0])

# 6 -> 4 does not divide evenly, so neighbouring bins overlap by one cell
plan = C.plan_bins(6, 4)
print("6 -> 4 bins:", plan.bins)

# a ramp whose value is the column index makes the overlap visible
side = 6
ramp = np.tile(np.arange(side, dtype=float), side)[:, None]
print(C.pool_avg(ramp, plan).reshape(4, 4))

# the pooled tokens are a fixed linear map of the patches
S = C.structural_map_avg(plan)
x = np.random.default_rng(0).normal(size=(plan.n_in, 3))
print("max |pool(x) - S x| =", np.abs(C.pool_avg(x, plan) - S @ x).max())

# each row of S lights exactly its window with weight 1/|window|
for m in range(plan.n_out):
    window = plan.window_indices(m)
    print(f"token {m:2d}: patches {window.tolist()} weight {S[m, window[0]]:.3f}")

# max pooling picks one patch per channel; the map follows the channel majority
values, argmax = C.pool_max(x, plan)
print("max-pool map rows pick patches", C.structural_map_max(plan, argmax).argmax(axis=1))
