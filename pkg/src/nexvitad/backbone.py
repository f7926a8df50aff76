"""Frozen random-weight stand-ins for the two pretrained feature extractors.

``HierarchicalEncoder`` plays the multi-scale role (four stages at strides
4/8/16/32) and ``DenseEncoder`` the single-scale dense-feature role. Weights
are drawn once from a fixed seed and never trained.
"""

from dataclasses import dataclass, asdict
import hashlib
import json

import numpy as np

from .errors import ShapeError
from .numkernel import gelu
from .numkernel.layers import Conv2d

PAPER_HIERA_DIMS = (256, 512, 1024, 2048)
PAPER_DINO_DIM = 384
DESK_HIERA_DIMS = (32, 64, 128, 256)
DESK_DINO_DIM = 48
HIERA_STRIDES = (4, 8, 16, 32)


def _normalize(images):
    # images: (b, H, W, 3) in [0, 1]
    return (images - 0.5) / 0.25


@dataclass
class BackboneSpec:
    hiera_dims: tuple = DESK_HIERA_DIMS
    dino_dim: int = DESK_DINO_DIM
    dino_stride: int = 16
    seed: int = 1234

    def __post_init__(self):
        self.hiera_dims = tuple(int(d) for d in self.hiera_dims)

    @property
    def strides(self):
        return HIERA_STRIDES

    def to_json(self):
        d = asdict(self)
        d["hiera_dims"] = list(self.hiera_dims)
        d["strides"] = list(self.strides)
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        d.pop("strides", None)
        return cls(**d)


class HierarchicalEncoder:
    """Four conv stages: a strided patch conv followed by a 3x3 conv, GELU after each."""

    def __init__(self, dims=DESK_HIERA_DIMS, seed=1234, dtype=np.float32):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
        self.dims = tuple(dims)
        self.strides = HIERA_STRIDES
        self.stages = []
        cin = 3
        for n, d in enumerate(self.dims):
            k = 4 if n == 0 else 2
            down = Conv2d(cin, d, k, stride=k, rng=rng, dtype=dtype, frozen=True)
            mix = Conv2d(d, d, 3, 1, 1, rng=rng, dtype=dtype, frozen=True)
            for conv in (down, mix):
                conv.bias.value[:] = rng.normal(0, 0.1, d)
            self.stages.append((down, mix))
            cin = d

    def params(self):
        out = {}
        for n, (down, mix) in enumerate(self.stages):
            out.update(down.named_params(f"hiera.{n}.down"))
            out.update(mix.named_params(f"hiera.{n}.mix"))
        return out

    def forward(self, images):
        """``(b, H, W, 3)`` -> list of four ``(b, H/s, W/s, d_n)`` maps."""
        b, H, W, _ = images.shape
        if H % 32 or W % 32:
            raise ShapeError("input size must be divisible by 32", ("images", images.shape), ("stride", (32,)))
        x = _normalize(images.astype(self.stages[0][0].weight.value.dtype, copy=False))
        feats = []
        for down, mix in self.stages:
            x = gelu(down.forward(x)[0])
            x = gelu(mix.forward(x)[0])
            feats.append(x)
        return feats


class DenseEncoder:
    """Patch conv at ``stride``, then a 3x3 and a 1x1 conv, GELU between."""

    def __init__(self, dim=DESK_DINO_DIM, stride=16, seed=1234, dtype=np.float32):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 2]))
        self.dim, self.stride = dim, stride
        self.patch = Conv2d(3, dim, stride, stride=stride, rng=rng, dtype=dtype, frozen=True)
        self.mix = Conv2d(dim, dim, 3, 1, 1, rng=rng, dtype=dtype, frozen=True)
        self.out = Conv2d(dim, dim, 1, rng=rng, dtype=dtype, frozen=True, gain=1.0)
        for conv in (self.patch, self.mix):
            conv.bias.value[:] = rng.normal(0, 0.1, dim)

    def params(self):
        return {**self.patch.named_params("dense.patch"), **self.mix.named_params("dense.mix"),
                **self.out.named_params("dense.out")}

    def forward(self, images):
        b, H, W, _ = images.shape
        if H % self.stride or W % self.stride:
            raise ShapeError("input size must be divisible by the dense stride", ("images", images.shape),
                             ("stride", (self.stride,)))
        x = _normalize(images.astype(self.patch.weight.value.dtype, copy=False))
        x = gelu(self.patch.forward(x)[0])
        x = gelu(self.mix.forward(x)[0])
        return self.out.forward(x)[0]


class Backbones:
    """Both frozen encoders built from one :class:`BackboneSpec`."""

    def __init__(self, spec=None, dtype=np.float32):
        self.spec = spec or BackboneSpec()
        self.hiera = HierarchicalEncoder(self.spec.hiera_dims, self.spec.seed, dtype)
        self.dense = DenseEncoder(self.spec.dino_dim, self.spec.dino_stride, self.spec.seed, dtype)

    def params(self):
        return {**self.hiera.params(), **self.dense.params()}

    def forward(self, images):
        return self.hiera.forward(images), self.dense.forward(images)

    def checksum(self):
        h = hashlib.sha256()
        for name, p in sorted(self.params().items()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.value).tobytes())
        return h.hexdigest()


def hiera_forward(encoder, images):
    return encoder.forward(images)


def dense_forward(encoder, images):
    return encoder.forward(images)
