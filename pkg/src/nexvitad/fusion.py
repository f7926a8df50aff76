"""Shared-subspace fusion of the two frozen encoders.

Per scale ``n``: a bottleneck residual adapter on the hierarchical map, a
linear projection of the (resized) dense map into the same channel count,
and slice-by-slice channel interleaving of the two.
"""

import numpy as np

from .errors import ShapeError
from .numkernel import affine, bilinear_resize, gelu, gelu_backward
from .numkernel.optim import ParamTensor


class Adapter:
    """``gelu(x @ W_down + b_down) @ W_up + b_up + x`` with bottleneck ``d/4``."""

    def __init__(self, dim, rng=None, dtype=np.float32, init_std=0.02):
        if dim % 4:
            raise ShapeError("adapter width must be divisible by 4", ("dim", (dim,)), ("divisor", (4,)))
        rng = np.random.default_rng(0) if rng is None else rng
        r = dim // 4
        self.dim, self.rank = dim, r
        self.W_down = ParamTensor((rng.standard_normal((dim, r)) * init_std).astype(dtype))
        self.b_down = ParamTensor(np.zeros(r, dtype=dtype))
        self.W_up = ParamTensor((rng.standard_normal((r, dim)) * init_std).astype(dtype))
        self.b_up = ParamTensor(np.zeros(dim, dtype=dtype))

    def params(self):
        return {"W_down": self.W_down, "b_down": self.b_down, "W_up": self.W_up, "b_up": self.b_up}

    def forward(self, x):
        if x.shape[-1] != self.dim:
            raise ShapeError("adapter input channels", ("x", x.shape), ("W_down", self.W_down.shape))
        z = affine(x, self.W_down.value, self.b_down.value)
        a = gelu(z)
        return affine(a, self.W_up.value, self.b_up.value) + x, (x, z, a)

    def backward(self, dout, cache):
        """Accumulate parameter gradients; the input is frozen so no input gradient is returned."""
        x, z, a = cache
        d2 = dout.reshape(-1, self.dim)
        self.W_up.grad += a.reshape(-1, self.rank).T @ d2
        self.b_up.grad += d2.sum(axis=0)
        dz = gelu_backward(dout @ self.W_up.value.T, z).reshape(-1, self.rank)
        self.W_down.grad += x.reshape(-1, self.dim).T @ dz
        self.b_down.grad += dz.sum(axis=0)


def adapter_forward(x, adapter):
    return adapter.forward(x)[0]


class Projection:
    """Linear map from the dense channel count onto one hierarchical scale."""

    def __init__(self, d_in, d_out, rng=None, dtype=np.float32):
        rng = np.random.default_rng(0) if rng is None else rng
        self.d_in, self.d_out = d_in, d_out
        self.W = ParamTensor((rng.standard_normal((d_in, d_out)) / np.sqrt(d_in)).astype(dtype))
        self.b = ParamTensor(np.zeros(d_out, dtype=dtype))

    def params(self):
        return {"W_proj": self.W, "b_proj": self.b}

    def forward(self, x):
        if x.shape[-1] != self.d_in:
            raise ShapeError("projection input channels", ("x", x.shape), ("W_proj", self.W.shape))
        return affine(x, self.W.value, self.b.value), x

    def backward(self, dout, x):
        d2 = dout.reshape(-1, self.d_out)
        self.W.grad += x.reshape(-1, self.d_in).T @ d2
        self.b.grad += d2.sum(axis=0)


def project_dense(x, projection):
    return projection.forward(x)[0]


def interleave(a, b):
    """``out[..., 2j] = a[..., j]`` and ``out[..., 2j+1] = b[..., j]``."""
    if a.shape != b.shape:
        raise ShapeError("interleave operands differ", ("hierarchical", a.shape), ("dense", b.shape))
    out = np.empty(a.shape[:-1] + (2 * a.shape[-1],), dtype=np.result_type(a, b))
    out[..., 0::2] = a
    out[..., 1::2] = b
    return out


def deinterleave(x):
    return x[..., 0::2], x[..., 1::2]


class FusionEncoder:
    """Trainable adapters and projections over a pair of frozen backbones."""

    def __init__(self, backbones, seed=0, dtype=np.float32):
        self.backbones = backbones
        spec = backbones.spec
        rng = np.random.default_rng(np.random.SeedSequence([seed, 3]))
        self.adapters = [Adapter(d, rng, dtype) for d in spec.hiera_dims]
        self.projections = [Projection(spec.dino_dim, d, rng, dtype) for d in spec.hiera_dims]

    @property
    def dims(self):
        return tuple(2 * d for d in self.backbones.spec.hiera_dims)

    def params(self):
        out = {}
        for n, (ad, pr) in enumerate(zip(self.adapters, self.projections)):
            out.update({f"adapter.{n}.{k}": v for k, v in ad.params().items()})
            out.update({f"proj.{n}.{k}": v for k, v in pr.params().items()})
        return out

    def forward(self, images, features=None):
        """Return the fused pyramid ``[F_1..F_4]`` and a cache for :meth:`backward`.

        ``features`` may carry precomputed ``(hiera_maps, dense_map)``.
        """
        hiera, dense = self.backbones.forward(images) if features is None else features
        pyramid, caches = [], []
        for n, fh in enumerate(hiera):
            a, ca = self.adapters[n].forward(fh)
            d = bilinear_resize(dense, fh.shape[1], fh.shape[2], axes=(1, 2))
            p, cp = self.projections[n].forward(d)
            pyramid.append(interleave(a, p))
            caches.append((ca, cp))
        return pyramid, caches

    def backward(self, dpyramid, caches):
        for n, (dF, (ca, cp)) in enumerate(zip(dpyramid, caches)):
            if dF is None:
                continue
            dA, dP = deinterleave(dF)
            self.adapters[n].backward(dA, ca)
            self.projections[n].backward(dP, cp)


def encode(images, encoder):
    """Fused multi-scale representation of ``images`` (no gradient cache)."""
    return encoder.forward(images)[0]
