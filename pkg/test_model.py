import math

import numpy as np
import pytest

from helpers import ConfigError, ShapeError
from model import (
    Activations,
    ConvModelParams,
    ModelParams,
    PoolingTopology,
    decode_conv,
    decode_fc,
    encode_conv,
    encode_fc,
    init_conv_params,
    init_params,
)
from numerics import matvec


def test_ring_topology_examples():
    t = PoolingTopology.ring(4, 2, 2)
    assert t.groups == ((0, 1), (2, 3))
    assert t.num_groups == 2

    t = PoolingTopology.ring(4, 2, 1)
    assert t.groups == ((0, 1), (1, 2), (2, 3), (3, 0))
    np.testing.assert_array_equal(t.membership, [[1, 1, 0, 0], [0, 1, 1, 0], [0, 0, 1, 1], [1, 0, 0, 1]])


def test_ring_group_count_is_ceil_n_over_stride():
    for n, size, stride in [(5, 2, 2), (7, 3, 3), (6, 6, 1), (9, 4, 4)]:
        t = PoolingTopology.ring(n, size, stride)
        assert t.num_groups == math.ceil(n / stride)
        assert all(len(g) == size for g in t.groups)


@pytest.mark.parametrize("n,size,stride", [(0, 1, 1), (4, 5, 1), (4, 0, 1), (4, 2, 0), (9, 1, 4), (8, 2, 3)])
def test_ring_rejects_invalid_dims(n, size, stride):
    with pytest.raises(ConfigError):
        PoolingTopology.ring(n, size, stride)


def test_topology_rejects_uncovered_units():
    with pytest.raises(ConfigError):
        PoolingTopology(num_hidden=3, groups=((0, 1),), group_size=2, stride=2)


def test_init_params_is_deterministic_and_bounded():
    a = init_params(9, 6, 2, 2, seed=4)
    b = init_params(9, 6, 2, 2, seed=4)
    np.testing.assert_array_equal(a.enc, b.enc)
    np.testing.assert_array_equal(a.dec, b.dec)
    assert a.enc.shape == (6, 10)
    assert a.dec.shape == (9, 6)
    np.testing.assert_array_equal(a.enc[:, -1], 0.0)
    assert np.all(np.abs(a.enc) <= 1 / math.sqrt(10))
    assert np.all(np.abs(a.dec) <= 1 / math.sqrt(6))
    c = init_params(9, 6, 2, 2, seed=5)
    assert not np.array_equal(a.enc, c.enc)


def test_params_are_read_only():
    params = init_params(4, 4, 2, 2, seed=0)
    with pytest.raises(ValueError):
        params.enc[0, 0] = 1.0


def test_params_reject_mismatched_decoder():
    topology = PoolingTopology.ring(3, 1, 1)
    with pytest.raises(ShapeError):
        ModelParams(enc=np.zeros((3, 5)), dec=np.zeros((3, 3)), topology=topology)


def test_encode_zero_encoder():
    params = init_params(5, 4, 2, 2, seed=0).replace_arrays(np.zeros((4, 6)), np.zeros((5, 4)))
    act = encode_fc(np.ones(5), params)
    np.testing.assert_array_equal(act.hidden, 0.0)
    np.testing.assert_array_equal(act.pooled, 0.0)


def test_encode_rectifies_by_hand():
    topology = PoolingTopology.ring(2, 2, 2)
    params = ModelParams(enc=[[1.0, 0.0], [-1.0, 0.0]], dec=[[1.0, 1.0]], topology=topology)
    act = encode_fc(np.array([2.0]), params)
    np.testing.assert_array_equal(act.hidden, [2.0, 0.0])
    np.testing.assert_array_equal(act.pooled, [2.0])
    act = encode_fc(np.array([-2.0]), params)
    np.testing.assert_array_equal(act.hidden, [0.0, 2.0])
    np.testing.assert_array_equal(act.pooled, [2.0])


def test_encode_matches_scalar_evaluation():
    rng = np.random.default_rng(21)
    params = init_params(4, 6, 2, 2, seed=21)
    enc = np.array(params.enc)
    enc[:, -1] = rng.uniform(-0.2, 0.2, size=6)
    params = params.replace_arrays(enc, params.dec)
    x = rng.standard_normal(4)

    h = []
    for j in range(6):
        s = enc[j, 4]
        for k in range(4):
            s += enc[j, k] * x[k]
        h.append(max(s, 0.0))
    z = [math.sqrt(sum(h[j] ** 2 for j in group)) for group in params.topology.groups]

    act = encode_fc(x, params)
    assert params.topology.num_groups == 3
    np.testing.assert_allclose(act.hidden, h, rtol=1e-12)
    np.testing.assert_allclose(act.pooled, z, rtol=1e-12)


@pytest.mark.parametrize("seed", range(10))
def test_encode_fc_is_positively_homogeneous(seed):
    rng = np.random.default_rng(seed)
    params = init_params(12, 8, 2, 2, seed=seed)
    x = rng.standard_normal(12)
    c = rng.uniform(0.5, 3.0)
    act = encode_fc(x, params)
    scaled = encode_fc(c * x, params)
    np.testing.assert_allclose(scaled.hidden, c * act.hidden, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(scaled.pooled, c * act.pooled, rtol=1e-12, atol=1e-12)


def test_pooled_zero_iff_group_inactive():
    rng = np.random.default_rng(31)
    params = init_params(6, 8, 2, 1, seed=31)
    enc = np.array(params.enc)
    enc[:, -1] = rng.uniform(-0.8, 0.1, size=8)
    params = params.replace_arrays(enc, params.dec)
    membership = params.topology.membership
    seen_zero = seen_active = False
    for _ in range(200):
        act = encode_fc(rng.standard_normal(6), params)
        inactive = membership @ (act.hidden > 0) == 0
        np.testing.assert_array_equal(act.pooled == 0.0, inactive)
        seen_zero |= bool(inactive.any())
        seen_active |= bool((~inactive).any())
    assert seen_zero and seen_active


def test_encode_rejects_wrong_length():
    with pytest.raises(ShapeError):
        encode_fc(np.zeros(3), init_params(4, 4, 2, 2, seed=0))


def test_decode_fc():
    params = init_params(3, 3, 1, 1, seed=2)
    np.testing.assert_array_equal(decode_fc(np.zeros(3), params), np.zeros(3))
    params = params.replace_arrays(params.enc, np.eye(3))
    np.testing.assert_array_equal(decode_fc(np.array([0.0, 1.0, 0.0]), params), [0.0, 1.0, 0.0])

    params = init_params(5, 4, 2, 2, seed=9)
    h = np.random.default_rng(9).uniform(0, 1, size=4)
    expected = [sum(params.dec[i, j] * h[j] for j in range(4)) for i in range(5)]
    np.testing.assert_allclose(decode_fc(h, params), expected, rtol=1e-12)
    np.testing.assert_array_equal(decode_fc(h, params), matvec(params.dec, h))
    with pytest.raises(ShapeError):
        decode_fc(np.zeros(5), params)


def test_conv_zero_kernels_give_zero_activations():
    params = init_conv_params((3, 3), 4, 2, 2, 1, seed=0)
    params = params.replace_arrays(np.zeros((4, 3, 3)), np.zeros(4), params.dec_kernels)
    act = encode_conv(np.ones((6, 6)), params)
    assert act.hidden.shape == (4, 4, 4)
    np.testing.assert_array_equal(act.hidden, 0.0)
    np.testing.assert_array_equal(act.pooled, 0.0)


@pytest.mark.parametrize("seed", range(20))
def test_conv_with_full_size_kernels_equals_fc(seed):
    rng = np.random.default_rng(seed)
    n = 6
    kh, kw = rng.integers(1, 6, size=2)
    conv = init_conv_params((kh, kw), n, 2, 2, 1, seed=seed)
    conv = conv.replace_arrays(conv.enc_kernels, rng.uniform(-0.3, 0.3, size=n), conv.dec_kernels)
    enc = np.hstack([conv.enc_kernels.reshape(n, -1), conv.enc_biases[:, None]])
    fc = ModelParams(enc=enc, dec=np.zeros((kh * kw, n)), topology=conv.topology)

    img = rng.standard_normal((kh, kw))
    act_conv = encode_conv(img, conv)
    act_fc = encode_fc(img.ravel(), fc)
    assert act_conv.hidden.shape == (n, 1, 1)
    np.testing.assert_allclose(act_conv.hidden.ravel(), act_fc.hidden, rtol=1e-12, atol=1e-15)
    np.testing.assert_allclose(act_conv.pooled.ravel(), act_fc.pooled, rtol=1e-12, atol=1e-15)


@pytest.mark.parametrize("dy,dx", [(1, 0), (0, 2), (2, 1)])
def test_conv_hidden_maps_are_shift_equivariant(dy, dx):
    rng = np.random.default_rng(23)
    params = init_conv_params((3, 3), 4, 2, 2, 1, seed=23)
    params = params.replace_arrays(params.enc_kernels, rng.uniform(-0.2, 0.2, size=4),
                                   params.dec_kernels)
    img = rng.standard_normal((10, 9))
    shifted = np.zeros_like(img)
    shifted[dy:, dx:] = img[:10 - dy, :9 - dx]
    hidden = encode_conv(img, params).hidden
    hidden_shifted = encode_conv(shifted, params).hidden
    ho, wo = hidden.shape[1:]
    np.testing.assert_array_equal(hidden_shifted[:, dy:, dx:], hidden[:, :ho - dy, :wo - dx])


def test_conv_pooling_matches_scalar_evaluation():
    rng = np.random.default_rng(13)
    params = init_conv_params((3, 3), 4, 2, 2, 2, seed=13)
    params = params.replace_arrays(params.enc_kernels, rng.uniform(-0.1, 0.1, size=4),
                                   params.dec_kernels)
    img = rng.standard_normal((8, 8))

    maps = np.zeros((4, 6, 6))
    for n in range(4):
        for r in range(6):
            for c in range(6):
                s = params.enc_biases[n]
                for u in range(3):
                    for v in range(3):
                        s += img[r + u, c + v] * params.enc_kernels[n, u, v]
                maps[n, r, c] = max(s, 0.0)
    expected = np.zeros((2, 3, 3))
    for i, group in enumerate(params.topology.groups):
        for wr in range(3):
            for wc in range(3):
                energy = 0.0
                for n in group:
                    for r in range(2 * wr, 2 * wr + 2):
                        for c in range(2 * wc, 2 * wc + 2):
                            energy += maps[n, r, c] ** 2
                expected[i, wr, wc] = math.sqrt(energy)

    act = encode_conv(img, params)
    np.testing.assert_allclose(act.hidden, maps, rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(act.pooled, expected, rtol=1e-12, atol=1e-14)


def test_conv_rejects_small_images():
    params = init_conv_params((3, 3), 2, 1, 1, 4, seed=0)
    with pytest.raises(ShapeError):
        encode_conv(np.zeros((2, 5)), params)
    with pytest.raises(ShapeError):
        encode_conv(np.zeros((5, 5)), params)  # 3x3 maps, 4x4 pooling window


def test_decode_conv_stamps_kernels():
    params = init_conv_params((2, 3), 2, 1, 1, 1, seed=3)
    zero = Activations(hidden=np.zeros((2, 4, 4)), pooled=np.zeros((2, 4, 4)))
    np.testing.assert_array_equal(decode_conv(zero, params), np.zeros((5, 6)))

    hidden = np.zeros((2, 4, 4))
    hidden[1, 2, 1] = 1.0
    out = decode_conv(Activations(hidden=hidden, pooled=None), params)
    expected = np.zeros((5, 6))
    expected[2:4, 1:4] = params.dec_kernels[1]
    np.testing.assert_allclose(out, expected, atol=1e-15)


def test_decode_conv_matches_brute_stamping():
    rng = np.random.default_rng(17)
    params = init_conv_params((3, 3), 3, 1, 1, 1, seed=17)
    hidden = np.maximum(rng.standard_normal((3, 4, 5)), 0.0)
    expected = np.zeros((6, 7))
    for n in range(3):
        for r in range(4):
            for c in range(5):
                expected[r:r + 3, c:c + 3] += hidden[n, r, c] * params.dec_kernels[n]
    out = decode_conv(Activations(hidden=hidden, pooled=None), params)
    np.testing.assert_allclose(out, expected, rtol=1e-12, atol=1e-14)


def test_conv_params_validate_shapes():
    topology = PoolingTopology.ring(2, 1, 1)
    with pytest.raises(ShapeError):
        ConvModelParams(enc_kernels=np.zeros((2, 3, 3)), enc_biases=np.zeros(3),
                        dec_kernels=np.zeros((2, 3, 3)), topology=topology)
