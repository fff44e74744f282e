"""Backend agreement and determinism of the hot kernels."""

import numpy as np
import pytest

from canonfscil import kernels as K


@pytest.fixture
def data():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((3, 2, 11, 9))
    fc = np.clip(rng.uniform(-1.1, 1.1, (3, 11)), -1, 1)
    tc = np.clip(rng.uniform(-1.1, 1.1, (3, 9)), -1, 1)
    gy = rng.standard_normal(x.shape)
    return x, fc, tc, gy


def test_warp_backends_agree(data):
    x, fc, tc, gy = data
    assert np.allclose(K.warp_forward_np(x, fc, tc), K.warp_forward_nb(x, fc, tc),
                       atol=1e-12)
    for a, b in zip(K.warp_backward_np(x, fc, tc, gy),
                    K.warp_backward_nb(x, fc, tc, gy)):
        assert np.allclose(a, b, atol=1e-12)


@pytest.mark.parametrize("stride,pad", [(1, 1), (2, 1), (1, 0), (2, 0)])
def test_conv_backends_agree(stride, pad):
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 3, 10, 8))
    w = rng.standard_normal((5, 3, 3, 3))
    y_np = K.conv2d_forward_np(x, w, stride, pad)
    y_nb = K.conv2d_forward_nb(x, w, stride, pad)
    assert np.allclose(y_np, y_nb, atol=1e-12)
    gy = rng.standard_normal(y_np.shape)
    assert np.allclose(K.conv2d_backward_input_np(gy, w, stride, pad, 10, 8),
                       K.conv2d_backward_input_nb(gy, w, stride, pad, 10, 8), atol=1e-12)
    assert np.allclose(K.conv2d_backward_weight_np(x, gy, stride, pad, 3, 3),
                       K.conv2d_backward_weight_nb(x, gy, stride, pad, 3, 3), atol=1e-12)


def test_kernels_bit_deterministic(data):
    x, fc, tc, gy = data
    for fn, args in [(K.warp_forward_nb, (x, fc, tc)),
                     (K.warp_backward_nb, (x, fc, tc, gy)),
                     (K.warp_forward_np, (x, fc, tc))]:
        first = fn(*args)
        second = fn(*args)
        if isinstance(first, tuple):
            assert all(np.array_equal(a, b) for a, b in zip(first, second))
        else:
            assert np.array_equal(first, second)


def test_edge_coordinates_replicate(data):
    x, _, _, _ = data
    fc = np.full((3, 11), -1.0)
    tc = np.full((3, 9), 1.0)
    out = K.warp_forward_np(x, fc, tc)
    # every output cell samples the (0, last) corner of its channel
    expect = np.broadcast_to(x[:, :, 0:1, -1:], x.shape)
    assert np.allclose(out, expect, atol=1e-12)
    assert np.allclose(K.warp_forward_nb(x, fc, tc), expect, atol=1e-12)


def test_backend_dispatch():
    prev = K.active_backend()
    try:
        assert K.set_backend("numpy") == "numpy"
        assert K.conv2d_forward is K.conv2d_forward_np
        assert K.set_backend("numba") == "numba"
        assert K.conv2d_forward is K.conv2d_forward_nb
        assert K.set_backend("auto") == "auto"
        assert K.warp_forward is K.warp_forward_nb
        assert K.conv2d_forward is K.conv2d_forward_np
        with pytest.raises(ValueError):
            K.set_backend("cuda")
    finally:
        K.set_backend(prev)
