"""Acquisition-context transform family on log-Mel spectrograms.

A context is the quadruple c = (delta, tau, b, s): frequency-axis
translation in normalized coordinates, temporal scale factor, global
log-energy bias, and spectral tilt slope. The transform composes a
separable geometric warp with an additive amplitude envelope; the
approximate inverse undoes the envelope first and warps back with
negated translation and reciprocal scale.

All functions here operate on plain ndarrays of shape (C, F, T) or
batches (B, C, F, T); the differentiable counterparts live in
:mod:`canonfscil.autodiff`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels


@dataclass(frozen=True)
class ContextParams:
    """Low-dimensional acquisition context (delta, tau, b, s)."""

    delta: float
    tau: float
    b: float
    s: float

    def __post_init__(self):
        if not (self.tau > 0):
            raise ValueError(f"tau must be positive, got {self.tau}")
        for name in ("delta", "tau", "b", "s"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"context parameter {name} is not finite")

    def as_tuple(self):
        return (self.delta, self.tau, self.b, self.s)


IDENTITY_CONTEXT = ContextParams(0.0, 1.0, 0.0, 0.0)


@dataclass(frozen=True)
class ContextBounds:
    """Closed per-parameter intervals; the identity context is interior."""

    delta_max: float = 0.15
    tau_min: float = 0.85
    tau_max: float = 1.18
    b_max: float = 0.3
    s_max: float = 0.15

    def __post_init__(self):
        if not (0 < self.tau_min <= 1 <= self.tau_max):
            raise ValueError("tau bounds must satisfy 0 < tau_min <= 1 <= tau_max")
        if min(self.delta_max, self.b_max, self.s_max) < 0:
            raise ValueError("bound half-widths must be non-negative")

    def contains(self, c: ContextParams) -> bool:
        return (abs(c.delta) <= self.delta_max
                and self.tau_min <= c.tau <= self.tau_max
                and abs(c.b) <= self.b_max
                and abs(c.s) <= self.s_max)

    def half_widths(self):
        """Per-coordinate half-widths of the intervals, in (delta, tau, b, s) order."""
        return (self.delta_max, 0.5 * (self.tau_max - self.tau_min),
                self.b_max, self.s_max)


@dataclass(frozen=True)
class SampleGrid:
    """Separable normalized sampling coordinates, one vector per axis.

    The coordinate of output cell (f, t) is (freq[f], time[t]); both
    vectors are clipped to [-1, 1].
    """

    freq: np.ndarray  # (F,)
    time: np.ndarray  # (T,)


def freq_coords(n_bins: int) -> np.ndarray:
    """Normalized frequency coordinate r[f] = 2f/(F-1) - 1 on [-1, 1]."""
    if n_bins < 2:
        raise ValueError(f"need at least 2 bins, got {n_bins}")
    return 2.0 * np.arange(n_bins, dtype=np.float64) / (n_bins - 1) - 1.0


def make_grid(c: ContextParams, n_bins: int, n_frames: int) -> SampleGrid:
    """Sampling grid for the geometric warp part of the transform.

    The frequency axis is purely translated by delta; the time axis is
    purely scaled by tau about the grid center. Internally both axes go
    through the same (translation, scale) form so the axis assignment
    is one configuration rather than two code paths.
    """
    if n_bins < 2 or n_frames < 2:
        raise ValueError("grid needs at least 2 cells per axis")
    fc = _axis_coords(n_bins, translation=c.delta, scale=1.0)
    tc = _axis_coords(n_frames, translation=0.0, scale=c.tau)
    return SampleGrid(freq=fc, time=tc)


def _axis_coords(size: int, translation: float, scale: float) -> np.ndarray:
    r = freq_coords(size)
    return np.clip((r - translation) / scale, -1.0, 1.0)


def grid_sample(m: np.ndarray, grid: SampleGrid) -> np.ndarray:
    """Bilinear resample of a (C, F, T) spectrogram at the grid coordinates.

    Coordinates at the clipped border replicate edge values.
    """
    C, F, T = m.shape
    if grid.freq.shape != (F,) or grid.time.shape != (T,):
        raise ValueError(
            f"grid shape ({grid.freq.shape[0]}, {grid.time.shape[0]}) "
            f"does not match spectrogram ({F}, {T})")
    y = kernels.warp_forward(m[None], grid.freq[None], grid.time[None])
    return y[0]


def apply_amplitude(m: np.ndarray, b: float, s: float) -> np.ndarray:
    """Additive envelope m + b + s * r_f, broadcast over channels and frames."""
    r = freq_coords(m.shape[-2])
    return m + b + s * r[:, None]


def apply_transform(m: np.ndarray, c: ContextParams) -> np.ndarray:
    """Full context transform: geometric warp then amplitude envelope."""
    warped = grid_sample(m, make_grid(c, m.shape[-2], m.shape[-1]))
    return apply_amplitude(warped, c.b, c.s)


def apply_inverse(m: np.ndarray, c: ContextParams) -> np.ndarray:
    """Approximate inverse: strip the envelope, warp back with (-delta, 1/tau).

    Exact for amplitude-only contexts; on warped contexts it inverts the
    transform up to interpolation error away from clipped borders.
    """
    flat = apply_amplitude(m, -c.b, -c.s)
    inv = ContextParams(-c.delta, 1.0 / c.tau, 0.0, 0.0)
    return grid_sample(flat, make_grid(inv, m.shape[-2], m.shape[-1]))


def sample_pseudo_context(bounds: ContextBounds, rng: np.random.Generator) -> ContextParams:
    """Draw a context uniformly and independently per coordinate."""
    return ContextParams(
        delta=float(rng.uniform(-bounds.delta_max, bounds.delta_max)),
        tau=float(rng.uniform(bounds.tau_min, bounds.tau_max)),
        b=float(rng.uniform(-bounds.b_max, bounds.b_max)),
        s=float(rng.uniform(-bounds.s_max, bounds.s_max)),
    )


def interior_window(c: ContextParams, n_bins: int, n_frames: int):
    """Index slices unaffected by coordinate clipping and edge replication.

    Frequency: a translated band of ceil(|delta| (F-1)/2) + 1 bins at each
    edge is excluded. Time: scaling with tau > 1 makes the inverse pass
    clip near the edges, excluding ceil((1 - 1/tau)(T-1)/2) + 1 frames.
    """
    nf = math.ceil(abs(c.delta) * (n_bins - 1) / 2) + 1
    stretch = max(0.0, 1.0 - 1.0 / c.tau) if c.tau > 1 else max(0.0, 1.0 - c.tau)
    nt = math.ceil(stretch * (n_frames - 1) / 2) + 1
    return slice(nf, n_bins - nf), slice(nt, n_frames - nt)


def roundtrip_residual(m: np.ndarray, c: ContextParams, interior: bool = True) -> float:
    """Mean absolute residual of apply_inverse(apply_transform(m, c), c).

    With ``interior`` the borders affected by clipping are excluded; the
    full-grid variant also counts the information destroyed at the edges.
    """
    back = apply_inverse(apply_transform(m, c), c)
    diff = np.abs(back - m)
    if interior:
        fs, ts = interior_window(c, m.shape[-2], m.shape[-1])
        diff = diff[:, fs, ts]
        if diff.size == 0:
            raise ValueError("interior window is empty for this context")
    return float(diff.mean())
