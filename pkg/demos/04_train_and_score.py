"""
Training, memory bank and anomaly maps
======================================

A short training run on an 11/1 split, then decoder-free scoring with a
per-scale prototype bank built from ten normal target images.
"""

import sys

import numpy as np

from nexvitad.datagen import SplitConfig, make_split, synth_dataset
from nexvitad.inference import anomaly_score_map, build_memory_bank
from nexvitad.metrics import evaluate
from nexvitad.trainer import TrainConfig, Trainer, build_model

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 6
cfg = SplitConfig.random(11, seed=0)
split = make_split(synth_dataset(cfg), cfg)
tc = TrainConfig(epochs=epochs, warmup_epochs=min(5, epochs - 1), phase1_epochs=min(10, epochs // 2), seed=0)
model = build_model(split, tc)
Trainer(model, split, tc, log=lambda r: print(f"epoch {r['epoch']:2d} phase {r['phase']} loss {r['loss']:.4f} "
                                              f"valid {r['valid_pixel_frac']:.3f}")).run()

c = cfg.target_classes[0]
bank = build_memory_bank(model.encoder, np.stack(split.bank[c]).astype(np.float32), K=30)
print("prototypes per scale:", [p.shape for p in bank.prototypes])
imgs = np.stack([s.image for s in split.target_test]).astype(np.float32)
masks = [s.mask for s in split.target_test]
am = anomaly_score_map(model.encoder, bank, imgs)
rep = evaluate(list(am.A_prime), masks)
dec = evaluate(list(model.positive_probability(imgs, c)), masks)
print(f"memory bank: AUC {rep.auc:.4f} AP {rep.ap:.4f} PRO {rep.pro:.4f} (tau {rep.pro_threshold:.2f})")
print(f"decoder head: AUC {dec.auc:.4f} AP {dec.ap:.4f} PRO {dec.pro:.4f}")
