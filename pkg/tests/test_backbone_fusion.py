import numpy as np
import pytest

from nexvitad.backbone import (Backbones, BackboneSpec, DenseEncoder, HierarchicalEncoder, PAPER_DINO_DIM,
                               PAPER_HIERA_DIMS, dense_forward, hiera_forward)
from nexvitad.errors import ShapeError
from nexvitad.fusion import Adapter, FusionEncoder, Projection, deinterleave, encode, interleave
from nexvitad.numkernel import finite_diff_check


@pytest.fixture(scope="module")
def images():
    return np.random.default_rng(0).random((2, 64, 64, 3)).astype(np.float32)


def test_hiera_shapes_desk(images):
    feats = hiera_forward(HierarchicalEncoder(), images)
    assert [f.shape for f in feats] == [(2, 16, 16, 32), (2, 8, 8, 64), (2, 4, 4, 128), (2, 2, 2, 256)]


def test_hiera_paper_dims_shapes():
    enc = HierarchicalEncoder(PAPER_HIERA_DIMS)
    feats = enc.forward(np.zeros((1, 32, 32, 3), np.float32))
    assert [f.shape[-1] for f in feats] == list(PAPER_HIERA_DIMS)
    assert DenseEncoder(PAPER_DINO_DIM).forward(np.zeros((1, 32, 32, 3), np.float32)).shape == (1, 2, 2, 384)


def test_hiera_rejects_indivisible_size():
    with pytest.raises(ShapeError):
        HierarchicalEncoder().forward(np.zeros((1, 48, 64, 3), np.float32))


def test_backbones_deterministic(images):
    a, b = Backbones(), Backbones()
    fa, fb = a.forward(images), b.forward(images)
    for x, y in zip(fa[0] + [fa[1]], fb[0] + [fb[1]]):
        assert np.array_equal(x, y)
    assert a.checksum() == b.checksum()
    assert Backbones(BackboneSpec(seed=7)).checksum() != a.checksum()


def test_dense_shape_and_constant_image(images):
    enc = DenseEncoder()
    assert dense_forward(enc, images).shape == (2, 4, 4, 48)
    const = dense_forward(enc, np.full((1, 64, 64, 3), 0.3, np.float32))[0]
    centre = const[1:3, 1:3].reshape(-1, 48)
    np.testing.assert_allclose(centre, np.broadcast_to(centre[0], centre.shape), atol=1e-5)


def test_features_non_degenerate():
    imgs = np.random.default_rng(1).random((8, 64, 64, 3)).astype(np.float32)
    hiera, dense = Backbones().forward(imgs)
    for f in hiera + [dense]:
        std = f.reshape(-1, f.shape[-1]).std(axis=0)
        assert (std > 0).mean() >= 0.95


def test_backbone_params_frozen():
    assert all(p.frozen for p in Backbones().params().values())


def test_spec_json_roundtrip():
    spec = BackboneSpec((8, 16, 32, 64), 12, 16, 5)
    back = BackboneSpec.from_json(spec.to_json())
    assert back == spec
    assert '"strides": [4, 8, 16, 32]' in spec.to_json()


def test_adapter_zero_weights_is_identity():
    ad = Adapter(8)
    for p in ad.params().values():
        p.value[...] = 0
    x = np.random.default_rng(0).standard_normal((2, 3, 3, 8)).astype(np.float32)
    assert np.array_equal(ad.forward(x)[0], x)


def test_adapter_hand_example():
    # d=4, r=1: W_down picks channel 0, W_up writes channel 0; gelu(1) = 0.8413447
    ad = Adapter(4, dtype=np.float64)
    ad.W_down.value[...] = np.array([[1.0], [0], [0], [0]])
    ad.W_up.value[...] = np.array([[1.0, 0, 0, 0]])
    out = ad.forward(np.ones((1, 1, 1, 4)))[0]
    np.testing.assert_allclose(out.ravel(), [1.8413447, 1, 1, 1], atol=1e-7)


def test_adapter_rejects_bad_width():
    with pytest.raises(ShapeError):
        Adapter(6)
    with pytest.raises(ShapeError):
        Adapter(8).forward(np.zeros((1, 2, 2, 4), np.float32))


def test_projection_shape_and_linearity():
    pr = Projection(6, 10, dtype=np.float64)
    x = np.random.default_rng(0).standard_normal((1, 2, 2, 6))
    y1, y2 = pr.forward(x)[0], pr.forward(2 * x)[0]
    assert y1.shape == (1, 2, 2, 10)
    np.testing.assert_allclose(y2 - pr.b.value, 2 * (y1 - pr.b.value))
    with pytest.raises(ShapeError):
        pr.forward(np.zeros((1, 2, 2, 5)))


def test_interleave_example_and_inverse():
    a = np.array([[1.0, 2.0]])
    b = np.array([[10.0, 20.0]])
    np.testing.assert_array_equal(interleave(a, b), [[1.0, 10.0, 2.0, 20.0]])
    x, y = deinterleave(interleave(a, b))
    assert np.array_equal(x, a) and np.array_equal(y, b)
    with pytest.raises(ShapeError):
        interleave(np.zeros((1, 2)), np.zeros((1, 3)))


def test_interleave_is_a_permutation():
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal((3, 4, 5)), rng.standard_normal((3, 4, 5))
    out = interleave(a, b)
    assert np.array_equal(np.sort(out.ravel()), np.sort(np.concatenate([a.ravel(), b.ravel()])))


def test_encode_shapes(images):
    pyr = encode(images, FusionEncoder(Backbones()))
    assert [p.shape for p in pyr] == [(2, 16, 16, 64), (2, 8, 8, 128), (2, 4, 4, 256), (2, 2, 2, 512)]


def test_encoder_gradients_leave_backbone_untouched(images):
    enc = FusionEncoder(Backbones())
    before = enc.backbones.checksum()
    pyr, caches = enc.forward(images)
    enc.backward([np.ones_like(p) for p in pyr], caches)
    assert enc.backbones.checksum() == before
    assert all(not p.grad.any() for p in enc.backbones.params().values())
    assert all(p.grad.any() for p in enc.params().values())


def test_encode_gradcheck():
    spec = BackboneSpec((4, 4, 4, 4), 4, 16, 3)
    enc = FusionEncoder(Backbones(spec, np.float64), seed=1, dtype=np.float64)
    for p in enc.params().values():  # move off the near-zero init so every path carries signal
        p.value[...] = np.random.default_rng(2).standard_normal(p.shape) * 0.5
    imgs = np.random.default_rng(3).random((2, 32, 32, 3))
    feats = enc.backbones.forward(imgs)
    weights = [np.random.default_rng(10 + n).standard_normal(p.shape) for n, p in enumerate(enc.forward(imgs, feats)[0])]

    def loss():
        return sum(float((w * F ** 2).sum()) for w, F in zip(weights, enc.forward(imgs, feats)[0]))

    pyr, caches = enc.forward(imgs, feats)
    for p in enc.params().values():
        p.zero_grad()
    enc.backward([2 * w * F for w, F in zip(weights, pyr)], caches)
    report = finite_diff_check(loss, enc.params())
    assert report.passed, report.worst(5)
