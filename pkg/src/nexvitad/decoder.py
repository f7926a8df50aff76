"""Multi-task decoder: one segmentation head per class plus target pseudo-label heads.

Each :class:`DecoderHead` walks the fused pyramid coarse-to-fine: a learned
2x upsample, concatenation with the skip map, and a conv block per stage,
then a final block and a 1x1 conv to two logits. Logits are returned
channel-first, ``(b, 2, H, W)``, so the class softmax runs over axis -3.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .numkernel import bilinear_resize, bilinear_resize_backward, relu, relu_backward, softmax_channel
from .numkernel.layers import Conv2d, ConvBlock, ConvTranspose2d

PAPER_DECODER_CHANNELS = (256, 128, 64)
DESK_DECODER_CHANNELS = (64, 32, 16)
PSEUDO_HIDDEN = (64, 32)
IGNORE = 255


def _to_nchw(x):
    return np.ascontiguousarray(x.transpose(0, 3, 1, 2))


def _to_nhwc(x):
    return np.ascontiguousarray(x.transpose(0, 2, 3, 1))


class DecodeStage:
    def __init__(self, c_coarse, c_skip, c_out, rng, dtype=np.float32):
        self.up = ConvTranspose2d(c_coarse, c_out, 2, 2, rng=rng, dtype=dtype)
        self.block = ConvBlock(c_out + c_skip, c_out, rng=rng, dtype=dtype)
        self.c_out = c_out

    def params(self):
        return {**self.up.named_params("up"), **self.block.named_params("block")}


def decode_stage(F_coarse, F_skip, stage, mode="train"):
    """``ConvBlock(concat(Up(F_coarse), F_skip))``; returns ``(out, cache)``."""
    u, cu = stage.up.forward(F_coarse)
    if u.shape[1:3] != F_skip.shape[1:3]:
        raise ShapeError("upsampled map does not match the skip connection", ("up", u.shape), ("skip", F_skip.shape))
    out, cb = stage.block.forward(np.concatenate([u, F_skip], axis=-1), mode)
    return out, (cu, cb)


def decode_stage_backward(dout, cache, stage):
    """Returns ``(dF_coarse, dF_skip)``."""
    cu, cb = cache
    dcat = stage.block.backward(dout, cb)
    c = stage.c_out
    return stage.up.backward(dcat[..., :c], cu), dcat[..., c:]


class DecoderHead:
    """Three decode stages, a final conv block, and a 1x1 conv to two logits."""

    def __init__(self, in_dims, channels=DESK_DECODER_CHANNELS, seed=0, dtype=np.float32):
        if len(in_dims) != 4 or len(channels) != 3:
            raise ConfigError("decoder needs four pyramid widths and three stage widths")
        rng = np.random.default_rng(seed)
        self.in_dims, self.channels = tuple(in_dims), tuple(channels)
        self.stages = []
        c_coarse = in_dims[3]
        for i, c in enumerate(channels):
            self.stages.append(DecodeStage(c_coarse, in_dims[2 - i], c, rng, dtype))
            c_coarse = c
        self.final = ConvBlock(channels[-1], channels[-1], rng=rng, dtype=dtype)
        self.out = Conv2d(channels[-1], 2, 1, rng=rng, dtype=dtype, gain=1.0)

    def params(self):
        out = {}
        for i, st in enumerate(self.stages):
            out.update({f"stage{i}.{k}": v for k, v in st.params().items()})
        out.update(self.final.named_params("final"))
        out.update(self.out.named_params("out"))
        return out

    def forward(self, pyramid, mode="train", out_hw=None):
        if len(pyramid) != 4:
            raise ConfigError(f"decoder needs a 4-scale pyramid, got {len(pyramid)}")
        for F, d in zip(pyramid, self.in_dims):
            if F.shape[-1] != d:
                raise ShapeError("pyramid width does not match the head", ("F", F.shape), ("expected", (d,)))
        x = pyramid[3]
        stage_caches = []
        for i, st in enumerate(self.stages):
            x, c = decode_stage(x, pyramid[2 - i], st, mode)
            stage_caches.append(c)
        x, cf = self.final.forward(x, mode)
        logits, co = self.out.forward(x)
        h, w = logits.shape[1:3]
        H, W = out_hw if out_hw is not None else (4 * h, 4 * w)
        up = bilinear_resize(_to_nchw(logits), H, W)
        return up, (stage_caches, cf, co, (h, w))

    def backward(self, dlogits, cache):
        """Accumulates parameter gradients; returns per-scale pyramid gradients."""
        stage_caches, cf, co, (h, w) = cache
        d = _to_nhwc(bilinear_resize_backward(dlogits, h, w))
        d = self.final.backward(self.out.backward(d, co), cf)
        dpyr = [None, None, None, None]
        for i in reversed(range(len(self.stages))):
            d, dskip = decode_stage_backward(d, stage_caches[i], self.stages[i])
            dpyr[2 - i] = dskip
        dpyr[3] = d
        return dpyr


def head_forward(head, pyramid, mode="eval", out_hw=None):
    return head.forward(pyramid, mode, out_hw)[0]


class PseudoLabelHead:
    """Pointwise MLP (three 1x1 convs, ReLU between) on the coarsest fused scale."""

    def __init__(self, cin, hidden=PSEUDO_HIDDEN, seed=0, dtype=np.float32):
        rng = np.random.default_rng(seed)
        widths = (cin,) + tuple(hidden) + (2,)
        self.cin = cin
        self.layers = [Conv2d(a, b, 1, rng=rng, dtype=dtype, gain=2.0 if i < len(hidden) else 1.0)
                       for i, (a, b) in enumerate(zip(widths[:-1], widths[1:]))]

    @property
    def widths(self):
        return tuple([self.cin] + [l.weight.shape[-1] for l in self.layers])

    def params(self):
        out = {}
        for i, l in enumerate(self.layers):
            out.update(l.named_params(f"fc{i}"))
        return out

    def forward(self, F4, mode="train", out_hw=None):
        if F4.shape[-1] != self.cin:
            raise ShapeError("pseudo head input width", ("F_4", F4.shape), ("expected", (self.cin,)))
        x = F4
        caches = []
        for i, l in enumerate(self.layers):
            y, c = l.forward(x)
            pre = None
            if i < len(self.layers) - 1:
                pre, y = y, relu(y)
            caches.append((c, pre))
            x = y
        h, w = x.shape[1:3]
        H, W = out_hw if out_hw is not None else (32 * h, 32 * w)
        return bilinear_resize(_to_nchw(x), H, W), (caches, (h, w))

    def backward(self, dlogits, cache):
        caches, (h, w) = cache
        d = _to_nhwc(bilinear_resize_backward(dlogits, h, w))
        for l, (c, pre) in zip(reversed(self.layers), reversed(caches)):
            if pre is not None:
                d = relu_backward(d, pre)
            d = l.backward(d, c)
        return d


def pseudo_head_forward(head, F4, out_hw=None):
    return head.forward(F4, out_hw=out_hw)[0]


@dataclass
class PseudoLabelMap:
    labels: np.ndarray      # uint8, 0/1 or IGNORE
    confidence: np.ndarray  # max class probability

    @property
    def valid(self):
        return self.labels != IGNORE

    @property
    def valid_fraction(self):
        return float(self.valid.mean()) if self.labels.size else 0.0


def pseudo_labels_from_probs(p, theta=0.7):
    """Label by argmax where the top probability is strictly above ``theta``."""
    conf = p.max(axis=-3)
    labels = np.argmax(p, axis=-3).astype(np.uint8)
    labels[~(conf > theta)] = IGNORE
    return PseudoLabelMap(labels, conf)


def make_pseudo_labels(L_t, theta=0.7):
    """Softmax the 2-channel logits ``(..., 2, H, W)`` and threshold confidence."""
    if L_t.shape[-3] != 2:
        raise ShapeError("pseudo-label logits need 2 channels", ("L_t", L_t.shape), ("expected", (2,)))
    return pseudo_labels_from_probs(softmax_channel(np.asarray(L_t, dtype=np.float64)), theta)


class HeadBank:
    """All task heads and the class -> head routing.

    With ``mtl_enabled`` every source class gets its own head; otherwise one
    shared head serves all source classes. Every target class always owns a
    segmentation head and a pseudo-label head.
    """

    def __init__(self, source_classes, target_classes, in_dims, channels=DESK_DECODER_CHANNELS,
                 pseudo_hidden=PSEUDO_HIDDEN, mtl_enabled=True, seed=0, dtype=np.float32):
        self.source_classes = tuple(sorted(source_classes))
        self.target_classes = tuple(sorted(target_classes))
        self.mtl_enabled = mtl_enabled
        self.heads = {}
        self.routing = {"source": {}, "target_seg": {}, "target_pseudo": {}}

        def child(*keys):
            return int(np.random.SeedSequence([seed, 5, *keys]).generate_state(1)[0])

        if mtl_enabled:
            for c in self.source_classes:
                key = f"source.{c}"
                self.heads[key] = DecoderHead(in_dims, channels, child(0, c), dtype)
                self.routing["source"][c] = key
        else:
            self.heads["source.shared"] = DecoderHead(in_dims, channels, child(0, 999), dtype)
            self.routing["source"] = {c: "source.shared" for c in self.source_classes}
        for c in self.target_classes:
            self.heads[f"target_seg.{c}"] = DecoderHead(in_dims, channels, child(1, c), dtype)
            self.heads[f"target_pseudo.{c}"] = PseudoLabelHead(in_dims[3], pseudo_hidden, child(2, c), dtype)
            self.routing["target_seg"][c] = f"target_seg.{c}"
            self.routing["target_pseudo"][c] = f"target_pseudo.{c}"

    def __len__(self):
        return len(self.heads)

    def route(self, role, class_id):
        try:
            return self.heads[self.routing[role][class_id]]
        except KeyError:
            raise ConfigError(f"no {role} head for class {class_id}") from None

    def params(self):
        out = {}
        for key, head in self.heads.items():
            out.update({f"head.{key}.{k}": v for k, v in head.params().items()})
        return out

    def routing_table(self):
        return {role: {str(c): k for c, k in table.items()} for role, table in self.routing.items()}
