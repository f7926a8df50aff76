"""Losses, augmentation with exact restore, and the two-phase training loop.

Each optimisation step pairs one class-homogeneous source batch (so each
source head sees its own class, and batch statistics stay per-class) with
at most one target batch. Target batches are spread evenly over the epoch's
steps so every target image is visited once per epoch.

Phase 1 trains the source heads and warms each pseudo-label head against
its own stored labels. Phase 2 adds the target segmentation cross-entropy
against the pseudo-labels and the augment-restore consistency term.
"""

from dataclasses import dataclass, field, asdict
import json
import math
from pathlib import Path

import numpy as np

from .backbone import Backbones, BackboneSpec, DESK_DINO_DIM, DESK_HIERA_DIMS
from .decoder import DESK_DECODER_CHANNELS, IGNORE, PSEUDO_HIDDEN, HeadBank, PseudoLabelMap, make_pseudo_labels
from .errors import ConfigError, NumericError, ParameterError
from .fusion import FusionEncoder
from .numkernel import (bilinear_resize, bilinear_resize_backward, load_tensor, log_softmax_channel, lr_at,
                        save_tensor, softmax_channel, softmax_channel_backward)
from .numkernel.optim import Adam


# --------------------------------------------------------------------------
# losses (each returns the value and, on request, the gradient w.r.t. its input)


def _onehot_index(masks):
    m = np.asarray(masks)
    if m.ndim == 4:  # one-hot (b, 2, H, W)
        m = np.argmax(m, axis=1)
    return m.astype(np.int64)


def source_ce_loss(logits, masks, with_grad=False):
    """Mean pixel cross-entropy of ``(b, 2, H, W)`` logits against binary masks."""
    logits = np.asarray(logits)
    if logits.shape[0] == 0:
        raise ParameterError("source cross-entropy needs a non-empty batch")
    y = _onehot_index(masks)
    logp = log_softmax_channel(logits)
    picked = np.take_along_axis(logp, y[:, None], axis=1)[:, 0]
    n = picked.size
    loss = float(-picked.sum(dtype=np.float64) / n)
    if not with_grad:
        return loss
    g = np.exp(logp)
    np.put_along_axis(g, y[:, None], np.take_along_axis(g, y[:, None], axis=1) - 1.0, axis=1)
    return loss, g / n


def target_ce_loss(logits, pseudo, with_grad=False):
    """Cross-entropy over pixels with a pseudo-label; zero when none is valid."""
    logits = np.asarray(logits)
    labels = pseudo.labels
    valid = labels != IGNORE
    n = int(valid.sum())
    if n == 0:
        return (0.0, np.zeros_like(logits)) if with_grad else 0.0
    y = np.where(valid, labels, 0).astype(np.int64)
    logp = log_softmax_channel(logits)
    picked = np.take_along_axis(logp, y[:, None], axis=1)[:, 0]
    loss = float(-(picked * valid).sum(dtype=np.float64) / n)
    if not with_grad:
        return loss
    g = np.exp(logp)
    np.put_along_axis(g, y[:, None], np.take_along_axis(g, y[:, None], axis=1) - 1.0, axis=1)
    return loss, g * valid[:, None] / n


def consistency_mse_loss(S_prime, pseudo, with_grad=False):
    """Mean squared gap between restored positive-class probability and pseudo-labels on valid pixels."""
    S_prime = np.asarray(S_prime)
    valid = pseudo.labels != IGNORE
    n = int(valid.sum())
    if n == 0:
        return (0.0, np.zeros_like(S_prime)) if with_grad else 0.0
    target = np.where(valid, pseudo.labels, 0).astype(S_prime.dtype)
    diff = (S_prime - target) * valid
    loss = float((diff.astype(np.float64) ** 2).sum() / n)
    if not with_grad:
        return loss
    return loss, 2.0 * diff / n


@dataclass
class LossWeights:
    lambda1: float = 1.0
    lambda2: float = 0.5

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ParameterError(f"loss weights must be >= 0, got {self.lambda1}, {self.lambda2}")


def total_loss(L_s, L_t_ce, L_t_mse, w):
    return L_s + w.lambda1 * L_t_ce + w.lambda2 * L_t_mse


# --------------------------------------------------------------------------
# augmentation


AUG_KINDS = ("hflip", "vflip", "rot90k", "scale")


@dataclass
class AugmentRecord:
    """A geometric transform and its inverse on the two spatial ``axes``."""

    kind: str
    k: int = 0
    scale: float = 1.0
    size: tuple = None  # original (H, W), recorded for scale restores

    def _size_for(self, H, W):
        return int(round(H * self.scale)), int(round(W * self.scale))

    def apply(self, x, axes=(-2, -1)):
        ah, aw = axes
        if self.kind == "hflip":
            return np.flip(x, axis=aw).copy()
        if self.kind == "vflip":
            return np.flip(x, axis=ah).copy()
        if self.kind == "rot90k":
            return np.rot90(x, self.k, axes=(ah, aw)).copy()
        if self.kind == "scale":
            H, W = x.shape[ah], x.shape[aw]
            self.size = (H, W)
            return bilinear_resize(x, *self._size_for(H, W), axes=axes)
        raise ParameterError(f"unknown augmentation {self.kind!r}")

    def restore(self, y, axes=(-2, -1)):
        ah, aw = axes
        if self.kind in ("hflip", "vflip"):
            return self.apply(y, axes)
        if self.kind == "rot90k":
            return np.rot90(y, -self.k, axes=(ah, aw)).copy()
        if self.kind == "scale":
            return bilinear_resize(y, *self.size, axes=axes)
        raise ParameterError(f"unknown augmentation {self.kind!r}")

    def restore_backward(self, d, axes=(-2, -1)):
        """Adjoint of :meth:`restore` (flips and rotations are permutations)."""
        ah, aw = axes
        if self.kind in ("hflip", "vflip"):
            return self.apply(d, axes)
        if self.kind == "rot90k":
            return np.rot90(d, self.k, axes=(ah, aw)).copy()
        H, W = self._size_for(*self.size)
        return bilinear_resize_backward(d, H, W, axes=axes)

    def to_dict(self):
        return {"kind": self.kind, "k": self.k, "scale": self.scale}


def sample_augment(rng, size, stride=32):
    """Pick one geometric transform; scaling keeps the size a multiple of ``stride``."""
    kind = AUG_KINDS[int(rng.integers(len(AUG_KINDS)))]
    if kind == "rot90k":
        return AugmentRecord(kind, k=int(rng.integers(1, 4)))
    if kind == "scale":
        choices = [size + stride] + ([size - stride] if size - stride >= 2 * stride else [])
        new = choices[int(rng.integers(len(choices)))]
        return AugmentRecord(kind, scale=new / size)
    return AugmentRecord(kind)


def augment_and_restore(images, rng=None, record=None):
    """Augment an NHWC batch; returns ``(augmented, record)`` with ``record.restore`` for predictions."""
    images = np.asarray(images)
    if record is None:
        record = sample_augment(np.random.default_rng(0) if rng is None else rng, images.shape[1])
    return record.apply(images, axes=(1, 2)), record


def augment_source(images, masks, rng, p=0.5, noise_sigma=0.02):
    """Per-sample flips/rotations applied jointly to image and mask, then optional noise."""
    images, masks = images.copy(), masks.copy()
    for i in range(len(images)):
        if rng.random() < p:
            images[i], masks[i] = images[i][:, ::-1], masks[i][:, ::-1]
        if rng.random() < p:
            images[i], masks[i] = images[i][::-1], masks[i][::-1]
        if rng.random() < p:
            k = int(rng.integers(1, 4))
            images[i], masks[i] = np.rot90(images[i], k), np.rot90(masks[i], k)
        if rng.random() < p:
            images[i] = np.clip(images[i] + rng.normal(0, noise_sigma, images[i].shape), 0.0, 1.0)
    return images, masks


# --------------------------------------------------------------------------
# configuration and model


@dataclass
class ModelConfig:
    hiera_dims: tuple = DESK_HIERA_DIMS
    dino_dim: int = DESK_DINO_DIM
    dino_stride: int = 16
    backbone_seed: int = 1234
    decoder_channels: tuple = DESK_DECODER_CHANNELS
    pseudo_hidden: tuple = PSEUDO_HIDDEN

    def __post_init__(self):
        self.hiera_dims = tuple(int(d) for d in self.hiera_dims)
        self.decoder_channels = tuple(int(d) for d in self.decoder_channels)
        self.pseudo_hidden = tuple(int(d) for d in self.pseudo_hidden)

    def backbone_spec(self):
        return BackboneSpec(self.hiera_dims, self.dino_dim, self.dino_stride, self.backbone_seed)


@dataclass
class TrainConfig:
    epochs: int = 50
    base_lr: float = 1e-4
    warmup_epochs: int = 5
    batch_size: int = 8
    target_batch_size: int = 8
    theta: float = 0.7
    pseudo_refresh_every: int = 5
    phase1_epochs: int = 10
    mtl_enabled: bool = True
    pseudo_enabled: bool = True
    augment_prob: float = 0.5
    noise_sigma: float = 0.02
    lambda1: float = 1.0
    lambda2: float = 0.5
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        for name in ("epochs", "batch_size", "target_batch_size", "pseudo_refresh_every"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.base_lr <= 0:
            raise ConfigError("base_lr must be > 0")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigError("warmup_epochs must lie in [0, epochs)")
        if not 0 <= self.phase1_epochs <= self.epochs:
            raise ConfigError("phase1_epochs must lie in [0, epochs]")
        if not 0 < self.theta < 1:
            raise ConfigError("theta must lie in (0, 1)")
        if not 0 <= self.augment_prob <= 1:
            raise ConfigError("augment_prob must lie in [0, 1]")
        LossWeights(self.lambda1, self.lambda2)

    @property
    def weights(self):
        return LossWeights(self.lambda1, self.lambda2)

    def to_dict(self):
        return asdict(self)


class Model:
    """Frozen backbones, trainable fusion encoder, and the head bank."""

    def __init__(self, model_cfg, source_classes, target_classes, mtl_enabled=True, seed=0, dtype=np.float32):
        self.cfg = model_cfg
        self.dtype = dtype
        self.backbones = Backbones(model_cfg.backbone_spec(), dtype)
        self.encoder = FusionEncoder(self.backbones, seed, dtype)
        self.heads = HeadBank(source_classes, target_classes, self.encoder.dims, model_cfg.decoder_channels,
                              model_cfg.pseudo_hidden, mtl_enabled, seed, dtype)

    def params(self):
        return {**{f"enc.{k}": v for k, v in self.encoder.params().items()}, **self.heads.params()}

    def batchnorms(self):
        """Every batch-norm layer by a stable name (running statistics live here)."""
        out = {}
        for key, head in self.heads.heads.items():
            if hasattr(head, "stages"):
                for i, st in enumerate(head.stages):
                    out[f"{key}.stage{i}"] = st.block.bn
                out[f"{key}.final"] = head.final.bn
        return out

    def zero_grad(self):
        for p in self.params().values():
            p.zero_grad()

    def positive_probability(self, images, class_id, batch_size=16):
        """Decoder-head inference: target segmentation head, eval mode, positive-class softmax."""
        head = self.heads.route("target_seg", class_id)
        out = []
        for s in range(0, len(images), batch_size):
            batch = np.asarray(images[s:s + batch_size], dtype=self.dtype)
            pyr = self.encoder.forward(batch)[0]
            logits = head.forward(pyr, "eval", batch.shape[1:3])[0]
            out.append(softmax_channel(logits)[:, 1])
        return np.concatenate(out)

    def pseudo_labels(self, images, class_id, theta, batch_size=16):
        head = self.heads.route("target_pseudo", class_id)
        labels, conf = [], []
        for s in range(0, len(images), batch_size):
            batch = np.asarray(images[s:s + batch_size], dtype=self.dtype)
            F4 = self.encoder.forward(batch)[0][3]
            pl = make_pseudo_labels(head.forward(F4, "eval", batch.shape[1:3])[0], theta)
            labels.append(pl.labels)
            conf.append(pl.confidence)
        return PseudoLabelMap(np.concatenate(labels), np.concatenate(conf))


# --------------------------------------------------------------------------
# one step


@dataclass
class StepBatch:
    src_images: np.ndarray
    src_masks: np.ndarray
    src_class: int
    tgt_images: np.ndarray = None
    tgt_class: int = None
    tgt_pseudo: PseudoLabelMap = None
    tgt_aug_images: np.ndarray = None
    tgt_record: AugmentRecord = None
    warm_pseudo: bool = False
    # optional precomputed frozen-backbone outputs for the three image batches
    src_feats: tuple = None
    tgt_feats: tuple = None
    aug_feats: tuple = None


def step_loss(model, batch, weights, phase, backward=True):
    """Loss components for one step; with ``backward`` parameter gradients are accumulated.

    Returned ``loss`` is ``L_s + l1 * (L_t_ce + L_pl_ce + L_pl_src) + l2 * L_t_mse``.
    ``L_pl_ce`` is the pseudo head's cross-entropy against its stored labels
    and ``L_pl_src`` (only with ``warm_pseudo``) its cross-entropy on the
    source masks.
    """
    enc, heads = model.encoder, model.heads
    l1, l2 = weights.lambda1, weights.lambda2
    out = {"L_s": 0.0, "L_t_ce": 0.0, "L_t_mse": 0.0, "L_pl_ce": 0.0, "L_pl_src": 0.0}
    used = out["heads"] = []
    hw = (batch.src_images if batch.src_images is not None else batch.tgt_images).shape[1:3]

    if batch.src_images is not None:
        pyr, cache = enc.forward(batch.src_images, batch.src_feats)
        head = heads.route("source", batch.src_class)
        used.append(heads.routing["source"][batch.src_class])
        logits, hc = head.forward(pyr, "train", hw)
        r = source_ce_loss(logits, batch.src_masks, with_grad=backward)
        out["L_s"] = r[0] if backward else r
        dpyr = head.backward(r[1], hc) if backward else None
        if batch.warm_pseudo:
            for c in heads.target_classes:
                ph = heads.route("target_pseudo", c)
                used.append(heads.routing["target_pseudo"][c])
                logits_pl, pc = ph.forward(pyr[3], "train", hw)
                r = source_ce_loss(logits_pl, batch.src_masks, with_grad=backward)
                out["L_pl_src"] += (r[0] if backward else r) / len(heads.target_classes)
                if backward:
                    dpyr[3] = dpyr[3] + ph.backward(l1 * r[1] / len(heads.target_classes), pc)
        if backward:
            enc.backward(dpyr, cache)

    if batch.tgt_images is not None:
        pl = batch.tgt_pseudo
        pyr_t, cache_t = enc.forward(batch.tgt_images, batch.tgt_feats)
        ph = heads.route("target_pseudo", batch.tgt_class)
        used.append(heads.routing["target_pseudo"][batch.tgt_class])
        logits_pl, pc = ph.forward(pyr_t[3], "train", hw)
        r = target_ce_loss(logits_pl, pl, with_grad=backward)
        out["L_pl_ce"] = r[0] if backward else r
        dpyr_t = [None, None, None, None]
        if backward:
            dpyr_t[3] = ph.backward(l1 * r[1], pc)
        if phase == 2:
            sh = heads.route("target_seg", batch.tgt_class)
            used.append(heads.routing["target_seg"][batch.tgt_class])
            logits_t, sc = sh.forward(pyr_t, "train", hw)
            r = target_ce_loss(logits_t, pl, with_grad=backward)
            out["L_t_ce"] = r[0] if backward else r
            if backward:
                d = sh.backward(l1 * r[1], sc)
                d[3] = d[3] + dpyr_t[3]
                dpyr_t = d

            rec = batch.tgt_record
            pyr_a, cache_a = enc.forward(batch.tgt_aug_images, batch.aug_feats)
            logits_a, ac = sh.forward(pyr_a, "train", batch.tgt_aug_images.shape[1:3])
            p_a = softmax_channel(logits_a)
            S_prime = rec.restore(p_a[:, 1])
            r = consistency_mse_loss(S_prime, pl, with_grad=backward)
            out["L_t_mse"] = r[0] if backward else r
            if backward:
                dp = np.zeros_like(p_a)
                dp[:, 1] = rec.restore_backward(l2 * r[1])
                enc.backward(sh.backward(softmax_channel_backward(dp, p_a), ac), cache_a)
        if backward:
            enc.backward(dpyr_t, cache_t)
    out["loss"] = total_loss(out["L_s"], out["L_t_ce"] + out["L_pl_ce"] + out["L_pl_src"], out["L_t_mse"], weights)
    return out


# --------------------------------------------------------------------------
# training loop


def _epoch_rng(seed, epoch, stream):
    return np.random.default_rng(np.random.SeedSequence([seed, 17, epoch, stream]))


def _chunks(idx, size):
    return [idx[s:s + size] for s in range(0, len(idx), size)]


class Trainer:
    """Stateful trainer; all randomness is derived from ``(seed, epoch)`` so runs resume exactly."""

    def __init__(self, model, split, cfg, model_cfg=None, log=None):
        cfg.validate()
        self.model, self.split, self.cfg = model, split, cfg
        self.model_cfg = model_cfg or model.cfg
        self.params = model.params()
        self.frozen_params = model.backbones.params()
        self.opt = Adam(self.params, lr=cfg.base_lr)
        # heads a step did not touch are left alone, as with parameters that received no gradient
        self.enc_names = [n for n in self.params if n.startswith("enc.")]
        self.head_names = {key: [n for n in self.params if n.startswith(f"head.{key}.")]
                           for key in model.heads.heads}
        self.epoch = 0
        self.history = []
        self.log = log  # callable receiving each epoch record
        self.source_by_class = {}
        for s in split.source:
            self.source_by_class.setdefault(s.class_id, []).append(s)
        self.target_by_class = {}
        for t in split.target_train:
            self.target_by_class.setdefault(t.class_id, []).append(t)
        self.pseudo = {}
        self.valid_frac = None

    # -- pseudo-labels -------------------------------------------------------
    def refresh_pseudo_labels(self):
        fracs = []
        for c, items in sorted(self.target_by_class.items()):
            imgs = np.stack([t.image for t in items])
            pl = self.model.pseudo_labels(imgs, c, self.cfg.theta)
            self.pseudo[c] = pl.labels
            fracs.append(pl.valid_fraction)
        self.valid_frac = float(np.mean(fracs)) if fracs else 0.0

    # -- batches ---------------------------------------------------------------
    def epoch_batches(self, epoch):
        cfg = self.cfg
        rs = _epoch_rng(cfg.seed, epoch, 0)
        src = []
        for c in sorted(self.source_by_class):
            items = self.source_by_class[c]
            src += [(c, ch) for ch in _chunks(rs.permutation(len(items)), cfg.batch_size)]
        order = rs.permutation(len(src))
        src = [src[i] for i in order]
        steps = []
        for c, idx in src:
            items = self.source_by_class[c]
            imgs = np.stack([items[i].image for i in idx]).astype(self.model.dtype)
            masks = np.stack([items[i].mask for i in idx]).astype(np.int64)
            imgs, masks = augment_source(imgs, masks, rs, cfg.augment_prob, cfg.noise_sigma)
            steps.append(StepBatch(imgs.astype(self.model.dtype), masks, c,
                                   warm_pseudo=cfg.pseudo_enabled and epoch < cfg.phase1_epochs))
        if not cfg.pseudo_enabled or not self.target_by_class:
            return steps
        rt = _epoch_rng(cfg.seed, epoch, 1)
        tgt = []
        for c in sorted(self.target_by_class):
            tgt += [(c, ch) for ch in _chunks(rt.permutation(len(self.target_by_class[c])), cfg.target_batch_size)]
        tgt = [tgt[i] for i in rt.permutation(len(tgt))]
        n_steps = len(steps)
        for j, (c, idx) in enumerate(tgt):
            items = self.target_by_class[c]
            imgs = np.stack([items[i].image for i in idx]).astype(self.model.dtype)
            aug, rec = augment_and_restore(imgs, rt)
            pl = PseudoLabelMap(self.pseudo[c][idx], None)
            step = steps[min(n_steps - 1, (j * n_steps) // len(tgt))]
            if step.tgt_images is not None:  # more target than source batches: add a target-only step
                step = StepBatch(None, None, None)
                steps.append(step)
            step.tgt_images, step.tgt_class, step.tgt_pseudo = imgs, c, pl
            step.tgt_aug_images, step.tgt_record = aug.astype(self.model.dtype), rec
        return steps

    # -- loop ----------------------------------------------------------------
    def train_epoch(self):
        cfg = self.cfg
        e = self.epoch
        if cfg.pseudo_enabled and (e % cfg.pseudo_refresh_every == 0 or not self.pseudo):
            self.refresh_pseudo_labels()
        phase = 1 if e < cfg.phase1_epochs else 2
        lr = lr_at(e, cfg.epochs, cfg.warmup_epochs, cfg.base_lr)
        weights = cfg.weights
        sums = {"L_s": 0.0, "L_t_ce": 0.0, "L_t_mse": 0.0, "L_pl_ce": 0.0, "L_pl_src": 0.0, "loss": 0.0}
        n_s = n_t = 0
        steps = self.epoch_batches(e)
        for batch in steps:
            self.opt.zero_grad()
            comp = step_loss(self.model, batch, weights, phase)
            if not math.isfinite(comp["loss"]):
                raise NumericError(f"non-finite loss at epoch {e}: {comp}")
            names = list(self.enc_names)
            for key in dict.fromkeys(comp["heads"]):
                names += self.head_names[key]
            self.opt.step(lr, names)
            sums["loss"] += comp["loss"]
            if batch.src_images is not None:
                n_s += 1
                sums["L_s"] += comp["L_s"]
                sums["L_pl_src"] += comp["L_pl_src"]
            if batch.tgt_images is not None:
                n_t += 1
                for k in ("L_t_ce", "L_t_mse", "L_pl_ce"):
                    sums[k] += comp[k]
        rec = {"epoch": e + 1, "phase": phase, "lr": lr, "L_s": sums["L_s"] / max(n_s, 1),
               "L_t_ce": sums["L_t_ce"] / max(n_t, 1), "L_t_mse": sums["L_t_mse"] / max(n_t, 1),
               "L_pl_ce": sums["L_pl_ce"] / max(n_t, 1), "L_pl_src": sums["L_pl_src"] / max(n_s, 1),
               "loss": sums["loss"] / len(steps),
               "valid_pixel_frac": self.valid_frac if cfg.pseudo_enabled else None}
        self.history.append(rec)
        if self.log is not None:
            self.log(rec)
        self.epoch += 1
        return rec

    def run(self, until=None):
        until = self.cfg.epochs if until is None else min(until, self.cfg.epochs)
        while self.epoch < until:
            self.train_epoch()
        return self.history

    # -- checkpoints -----------------------------------------------------------
    def save_checkpoint(self, out_dir):
        out = Path(out_dir)
        (out / "params").mkdir(parents=True, exist_ok=True)
        (out / "adam").mkdir(exist_ok=True)
        (out / "bn").mkdir(exist_ok=True)
        for name, p in sorted(self.params.items()):
            save_tensor(out / "params" / f"{name}.nxt", p.value)
            st = self.opt.states[name]
            save_tensor(out / "adam" / f"{name}.m.nxt", st.m)
            save_tensor(out / "adam" / f"{name}.v.nxt", st.v)
        for name, bn in self.model.batchnorms().items():
            save_tensor(out / "bn" / f"{name}.mean.nxt", bn.state.running_mean)
            save_tensor(out / "bn" / f"{name}.var.nxt", bn.state.running_var)
        for c, labels in self.pseudo.items():
            save_tensor(out / f"pseudo_{c}.nxt", labels.astype(np.float32))
        meta = {"epoch": self.epoch, "train_config": self.cfg.to_dict(), "model_config": asdict(self.model_cfg),
                "source_classes": list(self.model.heads.source_classes),
                "target_classes": list(self.model.heads.target_classes),
                "routing": self.model.heads.routing_table(), "history": self.history,
                "valid_frac": self.valid_frac, "pseudo_classes": sorted(int(c) for c in self.pseudo),
                "adam_steps": {n: s.step_count for n, s in sorted(self.opt.states.items())},
                "backbone_checksum": self.model.backbones.checksum()}
        (out / "checkpoint.json").write_text(json.dumps(meta, indent=2, sort_keys=True))

    def load_checkpoint(self, ckpt_dir):
        d = Path(ckpt_dir)
        meta = json.loads((d / "checkpoint.json").read_text())
        if meta["backbone_checksum"] != self.model.backbones.checksum():
            raise ConfigError("checkpoint was trained against different backbone weights")
        for name, p in self.params.items():
            p.value[...] = load_tensor(d / "params" / f"{name}.nxt")
            st = self.opt.states[name]
            st.m[...] = load_tensor(d / "adam" / f"{name}.m.nxt")
            st.v[...] = load_tensor(d / "adam" / f"{name}.v.nxt")
            st.step_count = meta["adam_steps"][name]
        for name, bn in self.model.batchnorms().items():
            bn.state.running_mean[...] = load_tensor(d / "bn" / f"{name}.mean.nxt")
            bn.state.running_var[...] = load_tensor(d / "bn" / f"{name}.var.nxt")
        self.pseudo = {c: load_tensor(d / f"pseudo_{c}.nxt").astype(np.uint8) for c in meta["pseudo_classes"]}
        self.epoch = meta["epoch"]
        self.history = meta["history"]
        self.valid_frac = meta["valid_frac"]
        return meta


def load_model(ckpt_dir, dtype=np.float32):
    """Rebuild a :class:`Model` from a checkpoint directory (parameters and batch-norm statistics)."""
    d = Path(ckpt_dir)
    meta = json.loads((d / "checkpoint.json").read_text())
    mc = ModelConfig(**meta["model_config"])
    tc = meta["train_config"]
    model = Model(mc, meta["source_classes"], meta["target_classes"], tc["mtl_enabled"], tc["seed"], dtype)
    if meta["backbone_checksum"] != model.backbones.checksum():
        raise ConfigError("checkpoint was trained against different backbone weights")
    for name, p in model.params().items():
        p.value[...] = load_tensor(d / "params" / f"{name}.nxt")
    for name, bn in model.batchnorms().items():
        bn.state.running_mean[...] = load_tensor(d / "bn" / f"{name}.mean.nxt")
        bn.state.running_var[...] = load_tensor(d / "bn" / f"{name}.var.nxt")
    return model, meta


def build_model(split, cfg, model_cfg=None, dtype=np.float32):
    model_cfg = model_cfg or ModelConfig()
    sc = split.config
    return Model(model_cfg, sc.source_classes, sc.target_classes, cfg.mtl_enabled, cfg.seed, dtype)


def train(model, split, cfg, log=None):
    """Train ``model`` in place on ``split``; returns the per-epoch log."""
    return Trainer(model, split, cfg, log=log).run()


# --------------------------------------------------------------------------
# gradient check of the full objective


GRADCHECK_MODEL = ModelConfig(hiera_dims=(4, 4, 4, 4), dino_dim=4, decoder_channels=(4, 4, 4), pseudo_hidden=(4, 4))


def grad_check_full_loss(seed=0, h=1e-5, tol=1e-4, model_cfg=GRADCHECK_MODEL, size=32, max_entries=None):
    """Central differences against the analytic gradient of one full training step.

    Runs in float64 on a tiny model: a phase-2 step with a source batch, the
    pseudo head's source warm-up, and a target batch whose pseudo-labels mix
    both classes with ignored pixels, under a scale augmentation (which
    exercises the resize adjoint in the restore path).
    """
    from .datagen import SplitConfig, make_split, synth_dataset
    from .numkernel import finite_diff_check

    split_cfg = SplitConfig((0,), (1,), seed=seed, n_classes=2)
    split = make_split(synth_dataset(split_cfg, n_train=2, n_test=1, size=size), split_cfg, n_bank=1)
    model = Model(model_cfg, (0,), (1,), True, seed, np.float64)
    rng = np.random.default_rng(seed)
    for p in model.params().values():  # lift the small adapter init so every path carries signal
        if p.value.ndim == 2 and np.abs(p.value).max() < 0.1:
            p.value[...] = rng.standard_normal(p.shape) * 0.5
    src = [s for s in split.source if s.class_id == 0]
    src_imgs = np.stack([s.image for s in src]).astype(np.float64)
    src_masks = np.stack([s.mask for s in src]).astype(np.int64)
    src_masks[:, : size // 4, : size // 4] = 1  # guarantee both classes
    tgt = np.stack([t.image for t in split.target_train]).astype(np.float64)
    labels = rng.integers(0, 2, (len(tgt), size, size)).astype(np.uint8)
    labels[rng.random(labels.shape) < 0.3] = IGNORE
    aug, rec = augment_and_restore(tgt, record=AugmentRecord("scale", scale=2.0))
    bb = model.backbones
    batch = StepBatch(src_imgs, src_masks, 0, tgt, 1, PseudoLabelMap(labels, None), aug, rec, warm_pseudo=True,
                      src_feats=bb.forward(src_imgs), tgt_feats=bb.forward(tgt), aug_feats=bb.forward(aug))
    weights = LossWeights(1.0, 0.5)
    params = model.params()

    # batch norm running statistics do not enter the training-mode loss, so repeated calls are pure
    def f():
        return step_loss(model, batch, weights, phase=2, backward=False)["loss"]

    model.zero_grad()
    step_loss(model, batch, weights, phase=2, backward=True)
    report = finite_diff_check(f, params, h=h, tol=tol, max_entries=max_entries)
    report.skipped_frozen.extend(sorted(model.backbones.params()))
    return report
