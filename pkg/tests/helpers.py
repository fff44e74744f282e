"""Shared test oracles and frozen calibration constants.

Every oracle here recomputes its quantity from the mathematical
definition, independently of the package's implementation paths.
"""

from __future__ import annotations

import numpy as np

from canonfscil.autodiff import Tensor
from canonfscil.frontend import SynthSpec, synth_canonical
from canonfscil.transform import ContextBounds

# Interior round-trip l1 tolerance of the warp on the acceptance catalog
# (64 mel bins x 24 frames). Calibrated once over 100 random in-bounds
# contexts across three catalog seeds (observed max 0.0124) and frozen.
TOL_ROUNDTRIP = 0.03

# The catalog the tolerance was calibrated on.
CATALOG_SPEC = SynthSpec(material_count=10, per_class_count=2, resonance_count=3,
                         noise_std=0.0, mel_bins=64, frames=24, rng_seed=0)


def catalog():
    return [synth_canonical(m, CATALOG_SPEC) for m in range(CATALOG_SPEC.material_count)]


def brute_force_bilinear(m: np.ndarray, freq_coords: np.ndarray,
                         time_coords: np.ndarray) -> np.ndarray:
    """Direct per-cell bilinear interpolation with edge clamping."""
    C, F, T = m.shape
    out = np.empty_like(m)
    for f in range(F):
        pf = (freq_coords[f] + 1.0) * (F - 1) / 2.0
        i0 = min(max(int(np.floor(pf)), 0), F - 2)
        af = pf - i0
        if af < 1e-9:
            af = 0.0
        elif af > 1 - 1e-9:
            af = 1.0
        for t in range(T):
            pt = (time_coords[t] + 1.0) * (T - 1) / 2.0
            j0 = min(max(int(np.floor(pt)), 0), T - 2)
            at = pt - j0
            if at < 1e-9:
                at = 0.0
            elif at > 1 - 1e-9:
                at = 1.0
            for c in range(C):
                v0 = (1 - at) * m[c, i0, j0] + at * m[c, i0, j0 + 1]
                v1 = (1 - at) * m[c, i0 + 1, j0] + at * m[c, i0 + 1, j0 + 1]
                out[c, f, t] = (1 - af) * v0 + af * v1
    return out


def dft_magnitude(frame: np.ndarray, fft_size: int) -> np.ndarray:
    """Exhaustive DFT magnitude spectrum (rfft bins) by direct summation."""
    n = len(frame)
    bins = fft_size // 2 + 1
    out = np.empty(bins)
    for k in range(bins):
        ang = -2.0 * np.pi * k * np.arange(n) / fft_size
        out[k] = abs(np.sum(frame * (np.cos(ang) + 1j * np.sin(ang))))
    return out


def spectral_flatness(m: np.ndarray) -> np.ndarray:
    """Per-frame flatness of the power spectrum exp(m): geometric over
    arithmetic mean, computed by brute force."""
    power = np.exp(m)
    geo = np.exp(np.log(power).mean(axis=-2))
    arith = power.mean(axis=-2)
    return (geo / arith).reshape(-1)


def grid_posterior(mu_p: float, var_p: float, mu_y: float, var_y: float,
                   n_points: int = 40001, span: float = 12.0):
    """Posterior mean and variance of a scalar Gaussian prior x likelihood,
    by trapezoid integration on a wide fine grid."""
    sd = max(np.sqrt(var_p), np.sqrt(var_y))
    center = 0.5 * (mu_p + mu_y)
    xs = np.linspace(center - span * sd - abs(mu_p - mu_y),
                     center + span * sd + abs(mu_p - mu_y), n_points)
    log_post = (-0.5 * (xs - mu_p) ** 2 / var_p - 0.5 * (mu_y - xs) ** 2 / var_y)
    post = np.exp(log_post - log_post.max())
    z = np.trapezoid(post, xs)
    mean = np.trapezoid(xs * post, xs) / z
    var = np.trapezoid((xs - mean) ** 2 * post, xs) / z
    return mean, var


def spearman(a, b) -> float:
    ra = np.argsort(np.argsort(a))
    rb = np.argsort(np.argsort(b))
    return float(np.corrcoef(ra, rb)[0, 1])


class QueueContextEstimator:
    """Oracle estimator: answers successive calls from a queue of known
    per-batch context tables."""

    def __init__(self, batches):
        self._queue = [np.array([c.as_tuple() for c in batch]) for batch in batches]

    def contexts(self, x):
        if not self._queue:
            raise AssertionError("oracle estimator ran out of queued contexts")
        tab = self._queue.pop(0)
        if len(tab) != x.shape[0]:
            raise AssertionError(f"queued {len(tab)} contexts for batch of {x.shape[0]}")
        return tuple(Tensor(tab[:, j].copy()) for j in range(4))

    def eval(self):
        return self

    def train(self, flag=True):
        return self
