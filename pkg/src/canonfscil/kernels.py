"""Hot numeric kernels: separable bilinear warping and 2-D convolution.

Every kernel exists twice: a numba ``@njit`` version and a vectorized
pure-numpy fallback. The active path is chosen once at import from the
``CANONFSCIL_BACKEND`` environment variable (``auto`` | ``numba`` |
``numpy``) and can be re-selected at runtime with :func:`set_backend`,
which the kernel benchmark uses to compare both.

Determinism contract: within one backend, every output element is
accumulated by a single thread in a fixed sequential order, so results
are bit-identical across runs and thread counts. The two backends agree
to floating-point roundoff, not bit-exactly.
"""

from __future__ import annotations

import os

import numpy as np

try:
    import numba as nb

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _HAVE_NUMBA = False


# ---------------------------------------------------------------------------
# numpy fallback implementations
# ---------------------------------------------------------------------------

_SNAP = 1e-9  # integer pixel coordinates reached through float noise snap exact


def _pixel_coords(coords, size):
    """Normalized [-1, 1] coords -> (floor index, fractional part)."""
    p = (coords + 1.0) * (0.5 * (size - 1))
    i0 = np.clip(np.floor(p).astype(np.int64), 0, max(size - 2, 0))
    a = p - i0
    a = np.where(a < _SNAP, 0.0, np.where(a > 1.0 - _SNAP, 1.0, a))
    return i0, a


def warp_forward_np(x, fc, tc):
    """Separable bilinear resample.

    x: (B, C, F, T); fc: (B, F) and tc: (B, T) normalized coordinates,
    already clipped to [-1, 1]. Returns (B, C, F, T).
    """
    B, C, F, T = x.shape
    i0, af = _pixel_coords(fc, F)
    j0, at = _pixel_coords(tc, T)
    xf0 = np.take_along_axis(x, i0[:, None, :, None], axis=2)
    xf1 = np.take_along_axis(x, (i0 + 1)[:, None, :, None], axis=2)
    g00 = np.take_along_axis(xf0, j0[:, None, None, :], axis=3)
    g01 = np.take_along_axis(xf0, (j0 + 1)[:, None, None, :], axis=3)
    g10 = np.take_along_axis(xf1, j0[:, None, None, :], axis=3)
    g11 = np.take_along_axis(xf1, (j0 + 1)[:, None, None, :], axis=3)
    af = af[:, None, :, None]
    at = at[:, None, None, :]
    return (1 - af) * ((1 - at) * g00 + at * g01) + af * ((1 - at) * g10 + at * g11)


def warp_backward_np(x, fc, tc, gy):
    """Adjoint of :func:`warp_forward_np`.

    Returns (gx, gfc, gtc): gradients w.r.t. the input grid and the two
    normalized coordinate vectors.
    """
    B, C, F, T = x.shape
    i0, af = _pixel_coords(fc, F)
    j0, at = _pixel_coords(tc, T)

    xf0 = np.take_along_axis(x, i0[:, None, :, None], axis=2)
    xf1 = np.take_along_axis(x, (i0 + 1)[:, None, :, None], axis=2)
    g00 = np.take_along_axis(xf0, j0[:, None, None, :], axis=3)
    g01 = np.take_along_axis(xf0, (j0 + 1)[:, None, None, :], axis=3)
    g10 = np.take_along_axis(xf1, j0[:, None, None, :], axis=3)
    g11 = np.take_along_axis(xf1, (j0 + 1)[:, None, None, :], axis=3)

    afb = af[:, None, :, None]
    atb = at[:, None, None, :]

    # d y / d pixel coordinate, then chain to normalized units.
    dpf = (1 - atb) * (g10 - g00) + atb * (g11 - g01)
    dpt = (1 - afb) * (g01 - g00) + afb * (g11 - g10)
    gfc = (gy * dpf).sum(axis=(1, 3)) * (0.5 * (F - 1))
    gtc = (gy * dpt).sum(axis=(1, 2)) * (0.5 * (T - 1))

    gx = np.zeros_like(x)
    w00 = (1 - afb) * (1 - atb) * gy
    w01 = (1 - afb) * atb * gy
    w10 = afb * (1 - atb) * gy
    w11 = afb * atb * gy
    # scatter along T into (B, C, F, T) buffers indexed by source f-row
    tmp0 = np.zeros_like(x)
    tmp1 = np.zeros_like(x)
    jj0 = np.broadcast_to(j0[:, None, None, :], gy.shape)
    jj1 = np.broadcast_to((j0 + 1)[:, None, None, :], gy.shape)
    np.add.at(tmp0, (np.arange(B)[:, None, None, None], np.arange(C)[None, :, None, None],
                     np.arange(F)[None, None, :, None], jj0), w00)
    np.add.at(tmp0, (np.arange(B)[:, None, None, None], np.arange(C)[None, :, None, None],
                     np.arange(F)[None, None, :, None], jj1), w01)
    np.add.at(tmp1, (np.arange(B)[:, None, None, None], np.arange(C)[None, :, None, None],
                     np.arange(F)[None, None, :, None], jj0), w10)
    np.add.at(tmp1, (np.arange(B)[:, None, None, None], np.arange(C)[None, :, None, None],
                     np.arange(F)[None, None, :, None], jj1), w11)
    ii0 = np.broadcast_to(i0[:, None, :, None], gy.shape)
    ii1 = np.broadcast_to((i0 + 1)[:, None, :, None], gy.shape)
    np.add.at(gx, (np.arange(B)[:, None, None, None], np.arange(C)[None, :, None, None],
                   ii0, np.arange(T)[None, None, None, :]), tmp0)
    np.add.at(gx, (np.arange(B)[:, None, None, None], np.arange(C)[None, :, None, None],
                   ii1, np.arange(T)[None, None, None, :]), tmp1)
    return gx, gfc, gtc


def _padded(x, ph, pw):
    if ph == 0 and pw == 0:
        return x
    B, C, H, W = x.shape
    xp = np.zeros((B, C, H + 2 * ph, W + 2 * pw), dtype=x.dtype)
    xp[:, :, ph:ph + H, pw:pw + W] = x
    return xp


def _im2col(x, kh, kw, sh, sw, ph, pw):
    B, C, H, W = x.shape
    Ho = (H + 2 * ph - kh) // sh + 1
    Wo = (W + 2 * pw - kw) // sw + 1
    xp = _padded(x, ph, pw)
    cols = np.empty((B, C, kh, kw, Ho, Wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + sh * Ho:sh, j:j + sw * Wo:sw]
    return cols.reshape(B, C * kh * kw, Ho * Wo), Ho, Wo


def conv2d_forward_np(x, w, stride, pad):
    B = x.shape[0]
    Co, Ci, kh, kw = w.shape
    cols, Ho, Wo = _im2col(x, kh, kw, stride, stride, pad, pad)
    y = np.matmul(w.reshape(Co, -1), cols)
    return y.reshape(B, Co, Ho, Wo)


def conv2d_backward_input_np(gy, w, stride, pad, H, W):
    B, Co, Ho, Wo = gy.shape
    _, Ci, kh, kw = w.shape
    gcols = np.matmul(w.reshape(Co, -1).T, gy.reshape(B, Co, Ho * Wo))
    gcols = gcols.reshape(B, Ci, kh, kw, Ho, Wo)
    gxp = np.zeros((B, Ci, H + 2 * pad, W + 2 * pad), dtype=gy.dtype)
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += gcols[:, :, i, j]
    if pad:
        return np.ascontiguousarray(gxp[:, :, pad:pad + H, pad:pad + W])
    return gxp


def conv2d_backward_weight_np(x, gy, stride, pad, kh, kw):
    B, Co, Ho, Wo = gy.shape
    cols, _, _ = _im2col(x, kh, kw, stride, stride, pad, pad)
    gw = np.matmul(gy.reshape(B, Co, Ho * Wo), cols.transpose(0, 2, 1)).sum(axis=0)
    return gw.reshape(Co, x.shape[1], kh, kw)


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

if _HAVE_NUMBA:

    @nb.njit(cache=True, parallel=True)
    def warp_forward_nb(x, fc, tc):
        B, C, F, T = x.shape
        y = np.empty_like(x)
        for b in nb.prange(B):
            for f in range(F):
                pf = (fc[b, f] + 1.0) * (0.5 * (F - 1))
                i0 = int(np.floor(pf))
                if i0 > F - 2:
                    i0 = F - 2
                if i0 < 0:
                    i0 = 0
                af = pf - i0
                if af < 1e-9:
                    af = 0.0
                elif af > 1.0 - 1e-9:
                    af = 1.0
                for t in range(T):
                    pt = (tc[b, t] + 1.0) * (0.5 * (T - 1))
                    j0 = int(np.floor(pt))
                    if j0 > T - 2:
                        j0 = T - 2
                    if j0 < 0:
                        j0 = 0
                    at = pt - j0
                    if at < 1e-9:
                        at = 0.0
                    elif at > 1.0 - 1e-9:
                        at = 1.0
                    for c in range(C):
                        v0 = (1 - at) * x[b, c, i0, j0] + at * x[b, c, i0, j0 + 1]
                        v1 = (1 - at) * x[b, c, i0 + 1, j0] + at * x[b, c, i0 + 1, j0 + 1]
                        y[b, c, f, t] = (1 - af) * v0 + af * v1
        return y

    @nb.njit(cache=True, parallel=True)
    def warp_backward_nb(x, fc, tc, gy):
        B, C, F, T = x.shape
        gx = np.zeros_like(x)
        gfc = np.zeros_like(fc)
        gtc = np.zeros_like(tc)
        for b in nb.prange(B):
            for f in range(F):
                pf = (fc[b, f] + 1.0) * (0.5 * (F - 1))
                i0 = int(np.floor(pf))
                if i0 > F - 2:
                    i0 = F - 2
                if i0 < 0:
                    i0 = 0
                af = pf - i0
                if af < 1e-9:
                    af = 0.0
                elif af > 1.0 - 1e-9:
                    af = 1.0
                for t in range(T):
                    pt = (tc[b, t] + 1.0) * (0.5 * (T - 1))
                    j0 = int(np.floor(pt))
                    if j0 > T - 2:
                        j0 = T - 2
                    if j0 < 0:
                        j0 = 0
                    at = pt - j0
                    if at < 1e-9:
                        at = 0.0
                    elif at > 1.0 - 1e-9:
                        at = 1.0
                    for c in range(C):
                        g = gy[b, c, f, t]
                        gx[b, c, i0, j0] += g * (1 - af) * (1 - at)
                        gx[b, c, i0, j0 + 1] += g * (1 - af) * at
                        gx[b, c, i0 + 1, j0] += g * af * (1 - at)
                        gx[b, c, i0 + 1, j0 + 1] += g * af * at
                        dpf = ((1 - at) * (x[b, c, i0 + 1, j0] - x[b, c, i0, j0])
                               + at * (x[b, c, i0 + 1, j0 + 1] - x[b, c, i0, j0 + 1]))
                        dpt = ((1 - af) * (x[b, c, i0, j0 + 1] - x[b, c, i0, j0])
                               + af * (x[b, c, i0 + 1, j0 + 1] - x[b, c, i0 + 1, j0]))
                        gfc[b, f] += g * dpf * (0.5 * (F - 1))
                        gtc[b, t] += g * dpt * (0.5 * (T - 1))
        return gx, gfc, gtc

    @nb.njit(cache=True)
    def _pad_input(x, pad):
        B, C, H, W = x.shape
        xp = np.zeros((B, C, H + 2 * pad, W + 2 * pad), dtype=x.dtype)
        xp[:, :, pad:pad + H, pad:pad + W] = x
        return xp

    @nb.njit(cache=True, parallel=True, fastmath=True)
    def conv2d_forward_nb(x, w, stride, pad):
        B, Ci, H, W = x.shape
        Co, _, kh, kw = w.shape
        Ho = (H + 2 * pad - kh) // stride + 1
        Wo = (W + 2 * pad - kw) // stride + 1
        xp = _pad_input(x, pad) if pad > 0 else x
        y = np.zeros((B, Co, Ho, Wo), dtype=x.dtype)
        for b in nb.prange(B):
            for co in range(Co):
                for ci in range(Ci):
                    for i in range(kh):
                        for j in range(kw):
                            wv = w[co, ci, i, j]
                            if stride == 1:
                                for ho in range(Ho):
                                    ih = ho + i
                                    for wo in range(Wo):
                                        y[b, co, ho, wo] += wv * xp[b, ci, ih, j + wo]
                            else:
                                for ho in range(Ho):
                                    ih = ho * stride + i
                                    for wo in range(Wo):
                                        y[b, co, ho, wo] += wv * xp[b, ci, ih, j + wo * stride]
        return y

    @nb.njit(cache=True, parallel=True, fastmath=True)
    def conv2d_backward_input_nb(gy, w, stride, pad, H, W):
        B, Co, Ho, Wo = gy.shape
        _, Ci, kh, kw = w.shape
        gxp = np.zeros((B, Ci, H + 2 * pad, W + 2 * pad), dtype=gy.dtype)
        for b in nb.prange(B):
            for ci in range(Ci):
                for co in range(Co):
                    for i in range(kh):
                        for j in range(kw):
                            wv = w[co, ci, i, j]
                            if stride == 1:
                                for ho in range(Ho):
                                    ih = ho + i
                                    for wo in range(Wo):
                                        gxp[b, ci, ih, j + wo] += wv * gy[b, co, ho, wo]
                            else:
                                for ho in range(Ho):
                                    ih = ho * stride + i
                                    for wo in range(Wo):
                                        gxp[b, ci, ih, j + wo * stride] += wv * gy[b, co, ho, wo]
        if pad > 0:
            return np.ascontiguousarray(gxp[:, :, pad:pad + H, pad:pad + W])
        return gxp

    @nb.njit(cache=True, parallel=True, fastmath=True)
    def conv2d_backward_weight_nb(x, gy, stride, pad, kh, kw):
        B, Ci, H, W = x.shape
        _, Co, Ho, Wo = gy.shape
        xp = _pad_input(x, pad) if pad > 0 else x
        gw = np.zeros((Co, Ci, kh, kw), dtype=x.dtype)
        for co in nb.prange(Co):
            for ci in range(Ci):
                for i in range(kh):
                    for j in range(kw):
                        s = 0.0
                        if stride == 1:
                            for b in range(B):
                                for ho in range(Ho):
                                    ih = ho + i
                                    for wo in range(Wo):
                                        s += gy[b, co, ho, wo] * xp[b, ci, ih, j + wo]
                        else:
                            for b in range(B):
                                for ho in range(Ho):
                                    ih = ho * stride + i
                                    for wo in range(Wo):
                                        s += gy[b, co, ho, wo] * xp[b, ci, ih, j + wo * stride]
                        gw[co, ci, i, j] = s
        return gw


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------

_BACKEND = "numpy"

warp_forward = warp_forward_np
warp_backward = warp_backward_np
conv2d_forward = conv2d_forward_np
conv2d_backward_input = conv2d_backward_input_np
conv2d_backward_weight = conv2d_backward_weight_np


def set_backend(name: str) -> str:
    """Bind the kernel dispatch; returns the choice.

    ``auto`` mixes per kernel family based on what the benchmark shows
    on training-sized problems: the warp is an order of magnitude faster
    under numba, while the convolutions are served just as well by the
    im2col + BLAS path without paying JIT and threading overhead.
    ``numba`` / ``numpy`` force a uniform path for comparison.
    """
    global _BACKEND, warp_forward, warp_backward
    global conv2d_forward, conv2d_backward_input, conv2d_backward_weight
    if name == "auto" and not _HAVE_NUMBA:  # pragma: no cover - numba is declared
        name = "numpy"
    if name == "auto":
        warp_forward = warp_forward_nb
        warp_backward = warp_backward_nb
        conv2d_forward = conv2d_forward_np
        conv2d_backward_input = conv2d_backward_input_np
        conv2d_backward_weight = conv2d_backward_weight_np
    elif name == "numba":
        if not _HAVE_NUMBA:
            raise RuntimeError("numba backend requested but numba is not importable")
        warp_forward = warp_forward_nb
        warp_backward = warp_backward_nb
        conv2d_forward = conv2d_forward_nb
        conv2d_backward_input = conv2d_backward_input_nb
        conv2d_backward_weight = conv2d_backward_weight_nb
    elif name == "numpy":
        warp_forward = warp_forward_np
        warp_backward = warp_backward_np
        conv2d_forward = conv2d_forward_np
        conv2d_backward_input = conv2d_backward_input_np
        conv2d_backward_weight = conv2d_backward_weight_np
    else:
        raise ValueError(f"unknown backend {name!r} (use auto|numba|numpy)")
    _BACKEND = name
    return name


def active_backend() -> str:
    return _BACKEND


set_backend(os.environ.get("CANONFSCIL_BACKEND", "auto"))
