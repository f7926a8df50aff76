"""
Sinkhorn K-means
================

The assignment step is a balanced entropic transport plan between points and
prototypes, so every prototype receives the same mass.
"""

import numpy as np

from nexvitad.inference import lloyd_assign, sinkhorn_assign, sinkhorn_kmeans_fit

rng = np.random.default_rng(0)
Z, P = rng.standard_normal((200, 2)), rng.standard_normal((5, 2))
plan = sinkhorn_assign(Z, P)
print(f"eps {plan.eps:.4f}, {plan.n_iter} sweeps, row violation {plan.row_violation:.1e}, "
      f"column violation {plan.col_violation:.1e}")
print("column masses:", np.round(plan.T.sum(0), 6))

# uneven blobs: equal column mass drags the small-blob prototype toward the large blob
big = rng.normal([0, 0], 0.5, (150, 2))
small = rng.normal([8, 0], 0.5, (50, 2))
Z = np.concatenate([big, small])
res = sinkhorn_kmeans_fit(Z, 2, seed=0)
print("sinkhorn prototypes:\n", np.round(res.prototypes, 2))
print("hard-assignment counts:", np.bincount(lloyd_assign(Z, res.prototypes), minlength=2))
