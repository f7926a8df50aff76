"""
Inference time against bank size
=================================

Encode plus nearest-prototype scoring, warm-up excluded; the cost of the
distance search grows linearly with the number of prototypes.
"""

import numpy as np

from nexvitad.backbone import Backbones
from nexvitad.fusion import FusionEncoder
from nexvitad.inference import bench_inference, linear_fit_r2

enc = FusionEncoder(Backbones())
imgs = np.random.default_rng(0).random((15, 64, 64, 3)).astype(np.float32)
Ks = (5, 10, 20, 30, 40)
rows = bench_inference(enc, imgs, bank_sizes=Ks, batch_sizes=(1, 15), repeats=5)
for r in rows:
    print(f"K={r['K']:2d} batch={r['batch']:2d}  {r['mean_ms']:7.2f} +- {r['std_ms']:.2f} ms")
t = [r["mean_ms"] for r in rows if r["batch"] == 15]
r2, (slope, icpt) = linear_fit_r2(Ks, t)
print(f"batch 15: {slope:.3f} ms per prototype, R^2 {r2:.3f}")
