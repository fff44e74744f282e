"""Tape correctness: every adjoint against central finite differences."""

import numpy as np
import pytest

from canonfscil import autodiff as ad
from canonfscil.autodiff import Tensor


def fd_grad(f, x, step=1e-6):
    """Central-difference gradient of scalar f at array x."""
    g = np.zeros_like(x)
    flat = x.ravel()
    for i in range(x.size):
        orig = flat[i]
        flat[i] = orig + step
        up = f(x)
        flat[i] = orig - step
        down = f(x)
        flat[i] = orig
        g.ravel()[i] = (up - down) / (2 * step)
    return g


def check_op(build, x0, atol=1e-6):
    """build(Tensor) -> scalar Tensor; compares tape grad with FD."""
    t = Tensor(x0.copy(), requires_grad=True)
    loss = build(t)
    loss.backward()

    def f(x):
        with ad.no_grad():
            return build(Tensor(x)).item()

    assert np.allclose(t.grad, fd_grad(f, x0.copy()), atol=atol)


@pytest.mark.parametrize("name,build", [
    ("exp", lambda t: ad.tsum(ad.exp(t))),
    ("log", lambda t: ad.tsum(ad.log(ad.add(ad.square(t), Tensor(1.0))))),
    ("tanh", lambda t: ad.tsum(ad.tanh(t))),
    ("sigmoid", lambda t: ad.tsum(ad.sigmoid(t))),
    ("softplus", lambda t: ad.tsum(ad.softplus(t))),
    ("sqrt", lambda t: ad.tsum(ad.sqrt(ad.add(ad.square(t), Tensor(0.5))))),
    ("mul_div", lambda t: ad.tsum(ad.div(ad.mul(t, t), ad.add(ad.square(t), Tensor(2.0))))),
    ("mean_axes", lambda t: ad.tsum(ad.square(ad.tmean(t, axis=(0, 2), keepdims=True)))),
    ("reshape_slice", lambda t: ad.tsum(ad.square(ad.reshape(t, (-1,))[3:10]))),
    ("transpose", lambda t: ad.tsum(ad.square(ad.matmul(ad.reshape(t, (6, 4)),
                                                        ad.transpose(ad.reshape(t, (6, 4))))))),
])
def test_op_gradients(name, build):
    rng = np.random.default_rng(hash(name) % 2**32)
    check_op(build, rng.uniform(0.2, 1.5, (2, 3, 4)))


def test_broadcasting_gradients():
    rng = np.random.default_rng(0)
    a0 = rng.standard_normal((4, 1, 3))
    b0 = rng.standard_normal((5, 1))

    a = Tensor(a0.copy(), requires_grad=True)
    b = Tensor(b0.copy(), requires_grad=True)
    loss = ad.tsum(ad.square(ad.add(a, b)))
    loss.backward()

    def fa(x):
        with ad.no_grad():
            return ad.tsum(ad.square(ad.add(Tensor(x), Tensor(b0)))).item()

    def fb(x):
        with ad.no_grad():
            return ad.tsum(ad.square(ad.add(Tensor(a0), Tensor(x)))).item()

    assert np.allclose(a.grad, fd_grad(fa, a0.copy()), atol=1e-6)
    assert np.allclose(b.grad, fd_grad(fb, b0.copy()), atol=1e-6)


def test_clip_gradient_zero_outside():
    t = Tensor(np.array([-2.0, -0.5, 0.5, 2.0]), requires_grad=True)
    ad.tsum(ad.clip(t, -1.0, 1.0)).backward()
    assert np.allclose(t.grad, [0.0, 1.0, 1.0, 0.0])


def test_abs_gradient_is_sign():
    t = Tensor(np.array([-1.5, 2.0, -0.1]), requires_grad=True)
    ad.tsum(ad.absolute(t)).backward()
    assert np.allclose(t.grad, [-1.0, 1.0, -1.0])


def test_conv_and_warp_gradients():
    rng = np.random.default_rng(1)
    x0 = rng.standard_normal((2, 2, 6, 5))
    w0 = rng.standard_normal((3, 2, 3, 3))
    fc0 = np.clip(rng.uniform(-0.9, 0.9, (2, 6)), -1, 1)
    tc0 = np.clip(rng.uniform(-0.9, 0.9, (2, 5)), -1, 1)

    def full(xa, wa, fca, tca):
        warped = ad.warp(xa, fca, tca)
        y = ad.conv2d(warped, wa, stride=1, pad=1)
        return ad.tmean(ad.square(y))

    xs = [Tensor(v.copy(), requires_grad=True) for v in (x0, w0, fc0, tc0)]
    full(*xs).backward()

    originals = (x0, w0, fc0, tc0)
    for k in range(4):
        def f(v, k=k):
            args = [Tensor(originals[i]) if i != k else Tensor(v) for i in range(4)]
            with ad.no_grad():
                return full(*args).item()
        assert np.allclose(xs[k].grad, fd_grad(f, originals[k].copy()), atol=2e-5), k


def test_warp_gradient_matches_fd_at_interior_coords():
    # the contract: 1e-4 steps, 1e-3 relative agreement at non-clipped coords
    rng = np.random.default_rng(2)
    x0 = rng.standard_normal((1, 8, 7))
    fc0 = np.clip(rng.uniform(-0.85, 0.85, 8), -1, 1)
    tc0 = np.clip(rng.uniform(-0.85, 0.85, 7), -1, 1)
    # keep coordinates off integer pixel boundaries for clean differencing
    fc0 += 1e-3 * np.sign(rng.standard_normal(8))
    from canonfscil.transform import SampleGrid, grid_sample

    def scalar(m, fc, tc):
        return grid_sample(m, SampleGrid(freq=fc, time=tc)).sum()

    xt = Tensor(x0[None].copy(), requires_grad=True)
    fct = Tensor(fc0[None].copy(), requires_grad=True)
    tct = Tensor(tc0[None].copy(), requires_grad=True)
    ad.tsum(ad.warp(xt, fct, tct)).backward()

    step = 1e-4
    for j in range(8):
        fp, fm = fc0.copy(), fc0.copy()
        fp[j] += step
        fm[j] -= step
        fd = (scalar(x0, fp, tc0) - scalar(x0, fm, tc0)) / (2 * step)
        analytic = fct.grad[0, j]
        assert abs(analytic - fd) <= 1e-3 * max(abs(fd), 1e-6)


def test_no_grad_and_detach():
    t = Tensor(np.ones(3), requires_grad=True)
    with ad.no_grad():
        out = ad.mul(t, t)
    assert not out.requires_grad
    d = t.detach()
    assert not d.requires_grad
    out2 = ad.tsum(ad.mul(t, Tensor(2.0)))
    out2.backward()
    assert np.allclose(t.grad, 2.0)


def test_gradient_accumulates_until_cleared():
    t = Tensor(np.ones(2), requires_grad=True)
    ad.tsum(t).backward()
    ad.tsum(t).backward()
    assert np.allclose(t.grad, 2.0)
    t.zero_grad()
    assert t.grad is None


def test_cross_entropy_uniform_and_peaked():
    logits = Tensor(np.zeros((4, 7)), requires_grad=True)
    loss = ad.cross_entropy(logits, np.array([0, 1, 2, 3]))
    assert loss.item() == pytest.approx(np.log(7))
    peaked = np.full((2, 3), -50.0)
    peaked[0, 1] = peaked[1, 2] = 50.0
    assert ad.cross_entropy(Tensor(peaked), np.array([1, 2])).item() == pytest.approx(0.0)


def test_cross_entropy_gradient():
    rng = np.random.default_rng(3)
    x0 = rng.standard_normal((3, 5))
    labels = np.array([1, 0, 4])
    check_op(lambda t: ad.cross_entropy(t, labels), x0)


def test_backward_requires_scalar():
    t = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        ad.mul(t, t).backward()
