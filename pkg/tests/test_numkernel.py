import math

import numpy as np
import pytest
from scipy import ndimage

from nexvitad import numkernel as nk
from nexvitad.errors import ContractError, ParameterError, ShapeError


def conv2d_bruteforce(x, k, stride, pad):
    b, h, w, cin = x.shape
    kh, kw, _, cout = k.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((b, oh, ow, cout))
    for n in range(b):
        for i in range(oh):
            for j in range(ow):
                patch = xp[n, i * stride:i * stride + kh, j * stride:j * stride + kw, :]
                out[n, i, j] = np.einsum("abc,abcd->d", patch, k)
    return out


def numeric_grad(f, x, h=1e-5):
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gf[i] = (fp - fm) / (2 * h)
    return g


def max_rel(a, b):
    return float(nk.relative_error(a, b, floor=1e-7).max())


# ---------------------------------------------------------------- affine

def test_affine_examples():
    x = np.array([1.0, 2.0])
    assert np.array_equal(nk.affine(x, np.eye(2), np.zeros(2)), [1, 2])
    assert np.array_equal(nk.affine(x, np.zeros((2, 2)), np.array([3.0, 4.0])), [3, 4])
    assert np.array_equal(nk.affine(x, np.array([[1.0, 2], [3, 4]]), np.ones(2)), [8, 11])


def test_affine_shape_error_names_operands():
    with pytest.raises(ShapeError) as err:
        nk.affine(np.ones(3), np.ones((2, 2)), np.ones(2))
    assert err.value.left[0] == "x" and err.value.right[0] == "W"


def test_affine_gradients_random():
    rng = np.random.default_rng(1)
    for _ in range(100):
        x = rng.standard_normal((2, rng.integers(1, 4), 3))
        W = rng.standard_normal((3, 2))
        b = rng.standard_normal(2)
        R = rng.standard_normal(x.shape[:-1] + (2,))
        dx, dW, db = nk.affine_backward(R, x, W)
        f = lambda: float((nk.affine(x, W, b) * R).sum())
        assert max_rel(dx, numeric_grad(f, x)) < 1e-4
        assert max_rel(dW, numeric_grad(f, W)) < 1e-4
        assert max_rel(db, numeric_grad(f, b)) < 1e-4


# ---------------------------------------------------------------- conv2d

def test_conv2d_examples():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 5, 5, 1))
    assert np.array_equal(nk.conv2d(x, np.ones((1, 1, 1, 1))), x)
    x = np.array([[1.0, 2], [3, 4]]).reshape(1, 2, 2, 1)
    assert nk.conv2d(x, np.ones((2, 2, 1, 1))).ravel().tolist() == [10.0]
    assert not nk.conv2d(x, np.zeros((2, 2, 1, 3))).any()


@pytest.mark.parametrize("stride,pad,kernel", [(1, 0, 3), (1, 1, 3), (2, 1, 3), (2, 0, 2), (4, 0, 4)])
def test_conv2d_matches_bruteforce(stride, pad, kernel):
    rng = np.random.default_rng(stride * 10 + pad)
    x = rng.standard_normal((2, 8, 8, 3))
    k = rng.standard_normal((kernel, kernel, 3, 4))
    got = nk.conv2d(x, k, stride, pad)
    want = conv2d_bruteforce(x, k, stride, pad)
    assert got.shape == want.shape == (2, (8 + 2 * pad - kernel) // stride + 1, (8 + 2 * pad - kernel) // stride + 1, 4)
    np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-12)


def test_conv2d_kernel_too_large():
    with pytest.raises(ShapeError):
        nk.conv2d(np.ones((1, 2, 2, 1)), np.ones((5, 5, 1, 1)))


def test_conv2d_gradients_random():
    rng = np.random.default_rng(2)
    for trial in range(100):
        stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
        kern = int(rng.integers(1, 4))
        x = rng.standard_normal((2, 5, 4, 2))
        k = rng.standard_normal((kern, kern, 2, 3))
        R = rng.standard_normal(nk.conv2d(x, k, stride, pad).shape)
        dx, dk = nk.conv2d_backward(R, x, k, stride, pad)
        f = lambda: float((nk.conv2d(x, k, stride, pad) * R).sum())
        assert max_rel(dx, numeric_grad(f, x)) < 1e-4
        assert max_rel(dk, numeric_grad(f, k)) < 1e-4


# ---------------------------------------------------------------- conv_transpose2d

def test_conv_transpose_single_tap():
    x = np.ones((1, 1, 1, 1))
    k = np.array([[1.0, 2], [3, 4]]).reshape(2, 2, 1, 1)
    assert nk.conv_transpose2d(x, k, 2)[0, :, :, 0].tolist() == [[1, 2], [3, 4]]
    assert not nk.conv_transpose2d(np.zeros((1, 3, 3, 1)), k, 2).any()


@pytest.mark.parametrize("stride,kernel,size", [(2, 2, 4), (1, 3, 4), (2, 4, 6), (3, 3, 9)])
def test_conv_transpose_is_adjoint(stride, kernel, size):
    rng = np.random.default_rng(size + stride)
    for _ in range(20):
        a = rng.standard_normal((2, size, size, 3))
        k = rng.standard_normal((kernel, kernel, 3, 2))
        y = nk.conv2d(a, k, stride, 0)
        bb = rng.standard_normal(y.shape)
        lhs = float((y * bb).sum())
        back = nk.conv_transpose2d(bb, k, stride)
        # geometry matches when (size - kernel) is a multiple of stride
        assert back.shape == a.shape
        rhs = float((a * back).sum())
        assert abs(lhs - rhs) <= 1e-6 * max(abs(lhs), 1.0)


def test_conv_transpose_gradients_random():
    rng = np.random.default_rng(3)
    for _ in range(100):
        stride = int(rng.integers(1, 3))
        kern = int(rng.integers(1, 4))
        x = rng.standard_normal((2, 3, 2, 3))
        k = rng.standard_normal((kern, kern, 2, 3))
        R = rng.standard_normal(nk.conv_transpose2d(x, k, stride).shape)
        dx, dk = nk.conv_transpose2d_backward(R, x, k, stride)
        f = lambda: float((nk.conv_transpose2d(x, k, stride) * R).sum())
        assert max_rel(dx, numeric_grad(f, x)) < 1e-4
        assert max_rel(dk, numeric_grad(f, k)) < 1e-4


# ---------------------------------------------------------------- batchnorm

def test_batchnorm_examples():
    x = np.full((2, 3, 3, 1), 4.0)
    out, _ = nk.batchnorm2d(x, np.ones(1), np.zeros(1))
    assert not out.any()
    x = np.array([1.0, 3.0]).reshape(2, 1, 1, 1)
    out, _ = nk.batchnorm2d(x, np.ones(1), np.zeros(1), eps=1e-12)
    np.testing.assert_allclose(out.ravel(), [-1.0, 1.0], atol=1e-9)
    x = np.random.default_rng(0).standard_normal((2, 3, 3, 2))
    out, _ = nk.batchnorm2d(x, np.zeros(2), np.array([0.5, -2.0]))
    assert np.array_equal(out, np.broadcast_to([0.5, -2.0], out.shape))


def test_batchnorm_eps_must_be_positive():
    with pytest.raises(ParameterError):
        nk.batchnorm2d(np.ones((1, 1, 1, 1)), np.ones(1), np.zeros(1), eps=0.0)


def test_batchnorm_running_stats_and_eval():
    rng = np.random.default_rng(4)
    st = nk.BatchNormState(2, momentum=0.1, dtype=np.float64)
    x = rng.standard_normal((4, 3, 3, 2)) * 2 + 5
    nk.batchnorm2d(x, np.ones(2), np.zeros(2), mode="train", state=st)
    n = 4 * 9
    np.testing.assert_allclose(st.running_mean, 0.1 * x.mean(axis=(0, 1, 2)))
    np.testing.assert_allclose(st.running_var, 0.9 + 0.1 * x.var(axis=(0, 1, 2)) * n / (n - 1))
    out, _ = nk.batchnorm2d(x, np.ones(2), np.zeros(2), mode="eval", state=st)
    np.testing.assert_allclose(out, (x - st.running_mean) / np.sqrt(st.running_var + 1e-5))


@pytest.mark.parametrize("mode", ["train", "eval"])
def test_batchnorm_gradients_random(mode):
    rng = np.random.default_rng(5)
    for _ in range(100):
        x = rng.standard_normal((2, 3, 2, 3))
        g = rng.standard_normal(3)
        b = rng.standard_normal(3)
        st = nk.BatchNormState(3, dtype=np.float64)
        st.running_mean[:] = rng.standard_normal(3)
        st.running_var[:] = rng.uniform(0.5, 2, 3)
        R = rng.standard_normal(x.shape)

        def f():
            frozen = nk.BatchNormState(3, dtype=np.float64)
            frozen.running_mean[:], frozen.running_var[:] = st.running_mean, st.running_var
            return float((nk.batchnorm2d(x, g, b, mode=mode, state=frozen)[0] * R).sum())

        out, cache = nk.batchnorm2d(x, g, b, mode=mode, state=None if mode == "train" else st)
        dx, dg, db = nk.batchnorm2d_backward(R, cache)
        assert max_rel(dx, numeric_grad(f, x)) < 1e-4
        assert max_rel(dg, numeric_grad(f, g)) < 1e-4
        assert max_rel(db, numeric_grad(f, b)) < 1e-4


# ---------------------------------------------------------------- activations

def test_activation_examples():
    assert nk.gelu(np.array(0.0)) == 0.0
    assert abs(nk.gelu(np.array(1.0)) - 0.5 * (1 + math.erf(1 / math.sqrt(2)))) < 1e-15
    assert abs(nk.gelu(np.array(1.0)) - 0.8413447) < 1e-7
    p = nk.softmax_channel(np.array([2.0, 0.0]).reshape(2, 1, 1))
    np.testing.assert_allclose(p.ravel(), [0.880797, 0.119203], atol=1e-6)
    np.testing.assert_allclose(p.ravel()[0], math.exp(2) / (math.exp(2) + 1), rtol=1e-14)


def test_softmax_properties():
    rng = np.random.default_rng(6)
    x = rng.standard_normal((3, 4, 5, 6)) * 10
    p = nk.softmax_channel(x)
    assert np.all(np.abs(p.sum(axis=1) - 1) < 1e-6)
    assert np.all((p > 0) & (p < 1))
    np.testing.assert_allclose(np.exp(nk.log_softmax_channel(x)), p, rtol=1e-12)


def test_activation_gradients_random():
    rng = np.random.default_rng(7)
    for _ in range(100):
        x = rng.standard_normal((2, 3, 4))
        R = rng.standard_normal(x.shape)
        f = lambda: float((nk.gelu(x) * R).sum())
        assert max_rel(nk.gelu_backward(R, x), numeric_grad(f, x)) < 1e-4
        xr = x + np.sign(x) * 1e-3  # keep clear of the kink
        f = lambda: float((nk.relu(xr) * R).sum())
        assert max_rel(nk.relu_backward(R, xr), numeric_grad(f, xr)) < 1e-4
        f = lambda: float((nk.softmax_channel(x) * R).sum())
        assert max_rel(nk.softmax_channel_backward(R, nk.softmax_channel(x)), numeric_grad(f, x)) < 1e-4


# ---------------------------------------------------------------- resize / blur

def test_bilinear_examples():
    assert np.all(nk.bilinear_resize(np.full((3, 5), 5.0), 7, 2) == 5.0)
    up = nk.bilinear_resize(np.array([[1.0, 2], [3, 4]]), 4, 4)
    np.testing.assert_allclose(up[0], [1, 4 / 3, 5 / 3, 2], rtol=1e-12)
    np.testing.assert_allclose(up[:, 0], [1, 5 / 3, 7 / 3, 3], rtol=1e-12)
    x = np.random.default_rng(0).standard_normal((2, 5, 6))
    assert np.array_equal(nk.bilinear_resize(x, 5, 6), x)


def test_bilinear_matches_scipy_zoom_corner_aligned():
    x = np.random.default_rng(8).standard_normal((5, 7))
    got = nk.bilinear_resize(x, 9, 13)
    rows = np.linspace(0, 4, 9)
    cols = np.linspace(0, 6, 13)
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    want = ndimage.map_coordinates(x, [rr, cc], order=1)
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_bilinear_nhwc_axes_and_adjoint():
    rng = np.random.default_rng(9)
    x = rng.standard_normal((2, 4, 3, 5))
    y = nk.bilinear_resize(x, 8, 7, axes=(1, 2))
    assert y.shape == (2, 8, 7, 5)
    np.testing.assert_allclose(y[1, :, :, 2], nk.bilinear_resize(x[1, :, :, 2], 8, 7), atol=1e-12)
    g = rng.standard_normal(y.shape)
    back = nk.bilinear_resize_backward(g, 4, 3, axes=(1, 2))
    assert abs((y * g).sum() - (x * back).sum()) < 1e-10


def test_gaussian_kernel_and_constant():
    for sigma in (0.5, 1.0, 2.0, 3.3):
        w = nk.gaussian_kernel1d(sigma)
        assert len(w) == 2 * math.ceil(3 * sigma) + 1
        assert abs(w.sum() - 1) < 1e-9
    x = np.full((20, 17), 0.37)
    np.testing.assert_allclose(nk.gaussian_blur(x, 2.0), x, rtol=1e-14)
    with pytest.raises(ParameterError):
        nk.gaussian_blur(x, 0.0)


def test_gaussian_impulse_is_outer_product():
    sigma = 2.0
    x = np.zeros((31, 31))
    x[15, 15] = 1.0
    r = math.ceil(3 * sigma)
    t = np.arange(-r, r + 1)
    k = np.exp(-t ** 2 / (2 * sigma ** 2))
    k /= k.sum()
    out = nk.gaussian_blur(x, sigma)
    np.testing.assert_allclose(out[15 - r:15 + r + 1, 15 - r:15 + r + 1], np.outer(k, k), atol=1e-15)
    assert abs(out.sum() - 1.0) < 1e-6


def test_gaussian_matches_scipy_reflect():
    x = np.random.default_rng(10).random((12, 9))
    sigma = 2.0
    want = ndimage.gaussian_filter(x, sigma, mode="reflect", truncate=math.ceil(3 * sigma) / sigma)
    np.testing.assert_allclose(nk.gaussian_blur(x, sigma), want, atol=1e-12)


# ---------------------------------------------------------------- optimiser

def test_adam_first_step_is_signed_lr():
    p = nk.ParamTensor(np.array([1.0, -2.0, 0.5]))
    p.grad[:] = [3.0, -0.2, 1e-2]
    s = nk.AdamState.for_param(p, lr=1e-3)
    before = p.value.copy()
    nk.adam_step(p, s)
    np.testing.assert_allclose(p.value - before, -1e-3 * np.sign([3.0, -0.2, 1e-2]), atol=1e-6 * 1e-3)
    assert s.step_count == 1


def test_adam_zero_grad_and_monotone():
    p = nk.ParamTensor(np.array([1.0]))
    s = nk.AdamState.for_param(p)
    nk.adam_step(p, s)
    assert p.value[0] == 1.0 and s.step_count == 1
    q = nk.ParamTensor(np.array([0.0]))
    q.grad[:] = 0.7
    sq = nk.AdamState.for_param(q, lr=0.1)
    trace = [q.value[0]]
    for _ in range(2):
        nk.adam_step(q, sq)
        trace.append(q.value[0])
    assert trace[0] > trace[1] > trace[2]


def test_adam_refuses_frozen():
    p = nk.ParamTensor(np.zeros(2), frozen=True)
    with pytest.raises(ContractError):
        nk.adam_step(p, nk.AdamState.for_param(p))


def test_lr_schedule():
    assert nk.lr_at(4, 50, 5, 1e-4) == pytest.approx(1e-4)
    assert nk.lr_at(0, 50, 5, 1e-4) == pytest.approx(2e-5)
    assert nk.lr_at(49, 50, 5, 1e-4) <= 1e-6
    lrs = [nk.lr_at(e, 50, 5, 1.0) for e in range(5, 50)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    with pytest.raises(ParameterError):
        nk.lr_at(0, 5, 5, 1e-4)


# ---------------------------------------------------------------- finite differences

def test_finite_diff_check_affine_mse():
    rng = np.random.default_rng(11)
    x = rng.standard_normal((6, 3))
    y = rng.standard_normal((6, 2))
    W = nk.ParamTensor(rng.standard_normal((3, 2)))
    b = nk.ParamTensor(rng.standard_normal(2))
    frozen = nk.ParamTensor(rng.standard_normal(2), frozen=True)

    def loss():
        return float(((nk.affine(x, W.value, b.value + frozen.value) - y) ** 2).mean())

    out = nk.affine(x, W.value, b.value + frozen.value)
    dout = 2 * (out - y) / out.size
    _, dW, db = nk.affine_backward(dout, x, W.value)
    W.grad[...], b.grad[...] = dW, db
    rep = nk.finite_diff_check(loss, {"W": W, "b": b, "frozen": frozen}, h=1e-5, tol=1e-5)
    assert rep.passed and rep.max_rel_err < 1e-5
    assert "frozen" not in rep.per_param and rep.skipped_frozen == ["frozen"]
    # a wrong gradient is reported, not raised
    W.grad[0, 0] += 1.0
    assert not nk.finite_diff_check(loss, {"W": W}).passed


def test_finite_diff_conv_bn_relu_chain():
    rng = np.random.default_rng(12)
    x = rng.standard_normal((2, 5, 5, 2))
    conv = nk.layers.Conv2d(2, 3, 3, 1, 1, bias=False, rng=rng, dtype=np.float64)
    bn = nk.layers.BatchNorm2d(3, dtype=np.float64)
    bn.gamma.value[:] = rng.uniform(0.5, 1.5, 3)
    bn.beta.value[:] = rng.standard_normal(3) * 0.1
    R = rng.standard_normal((2, 5, 5, 3))

    def forward():
        y, c1 = conv.forward(x)
        z, c2 = nk.batchnorm2d(y, bn.gamma.value, bn.beta.value)
        return y, c1, z, c2

    def loss():
        return float((nk.relu(forward()[2]) * R).sum())

    y, c1, z, c2 = forward()
    dz = nk.relu_backward(R, z)
    dy, dg, db = nk.batchnorm2d_backward(dz, c2)
    bn.gamma.grad += dg
    bn.beta.grad += db
    conv.backward(dy, c1)
    params = {**conv.named_params("conv"), **bn.named_params("bn")}
    rep = nk.finite_diff_check(loss, params)
    assert rep.max_rel_err < 1e-4, rep.worst()


# ---------------------------------------------------------------- io

def test_nxt1_roundtrip(tmp_path):
    x = np.arange(24, dtype=np.float32).reshape(2, 3, 4) / 7
    path = tmp_path / "t.nxt"
    nk.save_tensor(path, x)
    raw = path.read_bytes()
    assert raw[:4] == b"NXT1" and raw[4] == 3
    assert np.frombuffer(raw[5:17], "<u4").tolist() == [2, 3, 4]
    assert len(raw) == 17 + 24 * 4
    assert np.array_equal(nk.load_tensor(path), x)


def test_determinism_bitwise():
    rng = np.random.default_rng(13)
    x = rng.standard_normal((2, 8, 8, 3)).astype(np.float32)
    k = rng.standard_normal((3, 3, 3, 4)).astype(np.float32)
    a = nk.gaussian_blur(nk.conv2d(x, k, 1, 1)[..., 0], 2.0)
    b = nk.gaussian_blur(nk.conv2d(x, k, 1, 1)[..., 0], 2.0)
    assert a.tobytes() == b.tobytes()
