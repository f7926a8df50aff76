"""Parameterised layers on top of :mod:`ops`.

``forward`` returns ``(out, cache)`` and ``backward(dout, cache)`` returns the
input gradient while accumulating parameter gradients, so a layer can be run
several times in one step (each call keeps its own cache).
"""

import numpy as np

from . import ops
from .optim import ParamTensor


def he_normal(rng, shape, fan_in, dtype, gain=2.0):
    return (rng.standard_normal(shape) * np.sqrt(gain / fan_in)).astype(dtype)


class Layer:
    def params(self):
        return {}

    def named_params(self, prefix):
        return {f"{prefix}.{k}": v for k, v in self.params().items()}


class Conv2d(Layer):
    def __init__(self, cin, cout, kernel, stride=1, pad=0, bias=True, rng=None, dtype=np.float32,
                 frozen=False, gain=2.0):
        rng = np.random.default_rng(0) if rng is None else rng
        self.stride, self.pad = stride, pad
        w = he_normal(rng, (kernel, kernel, cin, cout), kernel * kernel * cin, dtype, gain)
        self.weight = ParamTensor(w, frozen=frozen)
        self.bias = ParamTensor(np.zeros(cout, dtype=dtype), frozen=frozen) if bias else None

    def params(self):
        out = {"weight": self.weight}
        if self.bias is not None:
            out["bias"] = self.bias
        return out

    def forward(self, x):
        k = self.weight.value
        cols = None
        if not (k.shape[0] == k.shape[1] == 1 and self.stride == 1 and self.pad == 0):
            cols, _ = ops.im2col(x, k.shape[0], k.shape[1], self.stride, self.pad)
        y = ops.conv2d(x, k, self.stride, self.pad, cols=cols)
        if self.bias is not None:
            y = y + self.bias.value
        return y, (x, cols)

    def backward(self, dout, cache):
        x, cols = cache
        dx, dk = ops.conv2d_backward(dout, x, self.weight.value, self.stride, self.pad, cols=cols)
        if not self.weight.frozen:
            self.weight.grad += dk
            if self.bias is not None:
                self.bias.grad += dout.reshape(-1, dout.shape[-1]).sum(axis=0)
        return dx


class ConvTranspose2d(Layer):
    """Learned upsampling; ``k`` is stored as ``(kh, kw, cout, cin)`` for the adjoint op."""

    def __init__(self, cin, cout, kernel, stride, rng=None, dtype=np.float32):
        rng = np.random.default_rng(0) if rng is None else rng
        self.stride = stride
        # each output pixel receives (kernel/stride)^2 taps of cin channels
        fan_in = cin * max(1, (kernel // stride) ** 2)
        self.weight = ParamTensor(he_normal(rng, (kernel, kernel, cout, cin), fan_in, dtype))
        self.bias = ParamTensor(np.zeros(cout, dtype=dtype))

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def forward(self, x):
        return ops.conv_transpose2d(x, self.weight.value, self.stride) + self.bias.value, x

    def backward(self, dout, x):
        dx, dk = ops.conv_transpose2d_backward(dout, x, self.weight.value, self.stride)
        self.weight.grad += dk
        self.bias.grad += dout.reshape(-1, dout.shape[-1]).sum(axis=0)
        return dx


class BatchNorm2d(Layer):
    def __init__(self, channels, eps=1e-5, momentum=0.1, dtype=np.float32):
        self.eps = eps
        self.gamma = ParamTensor(np.ones(channels, dtype=dtype))
        self.beta = ParamTensor(np.zeros(channels, dtype=dtype))
        self.state = ops.BatchNormState(channels, momentum, dtype)

    def params(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def forward(self, x, mode="train"):
        return ops.batchnorm2d(x, self.gamma.value, self.beta.value, self.eps, mode, self.state)

    def backward(self, dout, cache):
        dx, dg, db = ops.batchnorm2d_backward(dout, cache)
        self.gamma.grad += dg
        self.beta.grad += db
        return dx


class ConvBlock(Layer):
    """3x3 convolution (no bias), batch normalisation, ReLU."""

    def __init__(self, cin, cout, rng=None, dtype=np.float32):
        self.conv = Conv2d(cin, cout, 3, 1, 1, bias=False, rng=rng, dtype=dtype)
        self.bn = BatchNorm2d(cout, dtype=dtype)

    def params(self):
        return {**self.conv.named_params("conv"), **self.bn.named_params("bn")}

    def forward(self, x, mode="train"):
        y, c1 = self.conv.forward(x)
        z, c2 = self.bn.forward(y, mode)
        return ops.relu(z), (c1, c2, z)

    def backward(self, dout, cache):
        c1, c2, z = cache
        return self.conv.backward(self.bn.backward(ops.relu_backward(dout, z), c2), c1)
