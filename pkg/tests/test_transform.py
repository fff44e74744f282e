"""Transform family: coordinates, warping, amplitude, approximate inverse."""

import numpy as np
import pytest

from canonfscil import transform as tf
from canonfscil.transform import (ContextBounds, ContextParams, IDENTITY_CONTEXT,
                                  apply_amplitude, apply_inverse, apply_transform,
                                  freq_coords, grid_sample, interior_window,
                                  make_grid, roundtrip_residual, sample_pseudo_context)

from helpers import TOL_ROUNDTRIP, brute_force_bilinear, catalog, spearman


def test_freq_coords_endpoints():
    r = freq_coords(64)
    assert r[0] == -1.0 and r[63] == 1.0
    assert np.allclose(np.diff(r), r[1] - r[0])


def test_freq_coords_small_cases():
    assert np.allclose(freq_coords(3), [-1.0, 0.0, 1.0])
    assert freq_coords(5)[1] == pytest.approx(-0.5)


def test_freq_coords_rejects_single_bin():
    with pytest.raises(ValueError):
        freq_coords(1)


def test_identity_grid_is_identity():
    g = make_grid(IDENTITY_CONTEXT, 7, 5)
    assert np.allclose(g.freq, freq_coords(7))
    assert np.allclose(g.time, freq_coords(5))


def test_grid_frequency_shift_with_clipping():
    g = make_grid(ContextParams(0.5, 1.0, 0.0, 0.0), 5, 4)
    # per-cell evaluation: r - 0.5 then clip
    assert np.allclose(g.freq, [-1.0, -1.0, -0.5, 0.0, 0.5])
    assert np.allclose(g.time, freq_coords(4))


def test_grid_time_compression():
    g = make_grid(ContextParams(0.0, 2.0, 0.0, 0.0), 4, 9)
    assert g.time[0] == pytest.approx(-0.5)
    assert g.time[-1] == pytest.approx(0.5)
    assert np.allclose(g.freq, freq_coords(4))


def test_grid_sample_identity_exact():
    rng = np.random.default_rng(0)
    m = rng.standard_normal((2, 9, 7))
    out = grid_sample(m, make_grid(IDENTITY_CONTEXT, 9, 7))
    assert np.array_equal(out, m)


def test_grid_sample_integer_shift_moves_hot_bin():
    m = np.zeros((1, 9, 7))
    m[0, 3, 2] = 1.0
    k = 2
    delta = k * 2.0 / (9 - 1)
    out = grid_sample(m, make_grid(ContextParams(delta, 1.0, 0.0, 0.0), 9, 7))
    expected = np.zeros_like(m)
    expected[0, 3 + k, 2] = 1.0
    assert np.allclose(out, expected, atol=1e-12)


def test_grid_sample_half_bin_shift_splits_weight():
    m = np.zeros((1, 9, 7))
    m[0, 4, 3] = 1.0
    delta = 0.5 * 2.0 / (9 - 1)
    out = grid_sample(m, make_grid(ContextParams(delta, 1.0, 0.0, 0.0), 9, 7))
    assert out[0, 4, 3] == pytest.approx(0.5)
    assert out[0, 5, 3] == pytest.approx(0.5)
    assert out.sum() == pytest.approx(1.0)


def test_grid_sample_matches_brute_force():
    rng = np.random.default_rng(1)
    for _ in range(10):
        m = rng.standard_normal((2, 8, 6))
        fc = np.clip(rng.uniform(-1.2, 1.2, 8), -1, 1)
        tc = np.clip(rng.uniform(-1.2, 1.2, 6), -1, 1)
        out = grid_sample(m, tf.SampleGrid(freq=fc, time=tc))
        assert np.allclose(out, brute_force_bilinear(m, fc, tc), atol=1e-12)


def test_grid_sample_shape_mismatch():
    with pytest.raises(ValueError):
        grid_sample(np.zeros((1, 4, 4)), make_grid(IDENTITY_CONTEXT, 5, 4))


def test_grid_sample_linearity():
    rng = np.random.default_rng(2)
    g = make_grid(ContextParams(0.07, 1.1, 0.0, 0.0), 10, 8)
    m1 = rng.standard_normal((1, 10, 8))
    m2 = rng.standard_normal((1, 10, 8))
    a, b = 1.7, -0.4
    combined = grid_sample(a * m1 + b * m2, g)
    separate = a * grid_sample(m1, g) + b * grid_sample(m2, g)
    assert np.allclose(combined, separate, atol=1e-10)


def test_amplitude_identity_and_bias():
    m = np.zeros((1, 3, 2))
    assert np.array_equal(apply_amplitude(m, 0.0, 0.0), m)
    assert np.allclose(apply_amplitude(m, 1.0, 0.0), np.ones_like(m))


def test_amplitude_tilt_rows():
    out = apply_amplitude(np.zeros((1, 3, 2)), 0.0, 1.0)
    assert np.allclose(out[0, :, 0], [-1.0, 0.0, 1.0])
    assert np.allclose(out[0, :, 1], [-1.0, 0.0, 1.0])


def test_amplitude_group_law():
    rng = np.random.default_rng(3)
    m = rng.standard_normal((2, 6, 5))
    b1, s1, b2, s2 = rng.uniform(-1, 1, 4)
    twice = apply_amplitude(apply_amplitude(m, b1, s1), b2, s2)
    assert np.allclose(twice, apply_amplitude(m, b1 + b2, s1 + s2), atol=1e-12)


def test_transform_identity_and_pure_bias():
    rng = np.random.default_rng(4)
    m = rng.standard_normal((1, 8, 6))
    assert np.array_equal(apply_transform(m, IDENTITY_CONTEXT), m)
    out = apply_transform(m, ContextParams(0.0, 1.0, 0.3, 0.0))
    assert np.allclose(out, m + 0.3, atol=1e-12)


def test_transform_composition_order_matters():
    m = np.zeros((1, 9, 7))
    m[0, 4, 3] = 1.0
    c = ContextParams(0.25, 1.0, 0.0, 0.4)
    warp_then_amp = apply_transform(m, c)
    g = make_grid(c, 9, 7)
    amp_then_warp = grid_sample(apply_amplitude(m, c.b, c.s), g)
    assert not np.allclose(warp_then_amp, amp_then_warp)


def test_inverse_identity_and_amplitude_exact():
    rng = np.random.default_rng(5)
    m = rng.standard_normal((1, 10, 8))
    assert np.array_equal(apply_inverse(m, IDENTITY_CONTEXT), m)
    c = ContextParams(0.0, 1.0, 0.23, -0.11)
    back = apply_inverse(apply_transform(m, c), c)
    assert np.abs(back - m).max() < 1e-12


def test_roundtrip_residual_on_catalog():
    rng = np.random.default_rng(6)
    bounds = ContextBounds()
    for m in catalog()[:4]:
        for _ in range(5):
            c = sample_pseudo_context(bounds, rng)
            assert roundtrip_residual(m, c) <= TOL_ROUNDTRIP


def test_roundtrip_residual_monotone_in_context_magnitude():
    cat = catalog()[:6]
    rng = np.random.default_rng(7)
    deltas, dres, logts, tres = [], [], [], []
    for _ in range(40):
        d = rng.uniform(0.0, 0.15)
        deltas.append(d)
        dres.append(np.mean([roundtrip_residual(m, ContextParams(d, 1, 0, 0),
                                                interior=False) for m in cat]))
        t = rng.uniform(1.0, 1.18)
        logts.append(np.log(t))
        tres.append(np.mean([roundtrip_residual(m, ContextParams(0, t, 0, 0),
                                                interior=False) for m in cat]))
    assert spearman(deltas, dres) > 0.8
    assert spearman(logts, tres) > 0.8


def test_interior_window_excludes_shift_band():
    fs, ts = interior_window(ContextParams(0.15, 1.0, 0, 0), 64, 24)
    shift_bins = int(np.ceil(0.15 * 63 / 2)) + 1
    assert fs.start == shift_bins and fs.stop == 64 - shift_bins
    assert ts.start == 1  # tau = 1 leaves only the one-pixel guard


def test_pseudo_context_degenerate_bounds():
    bounds = ContextBounds(delta_max=0.0, tau_min=1.0, tau_max=1.0, b_max=0.0, s_max=0.0)
    rng = np.random.default_rng(8)
    for _ in range(10):
        assert sample_pseudo_context(bounds, rng) == IDENTITY_CONTEXT


def test_pseudo_context_membership_and_means():
    bounds = ContextBounds()
    rng = np.random.default_rng(9)
    n = 100_000
    table = np.empty((n, 4))
    for i in range(n):
        c = sample_pseudo_context(bounds, rng)
        assert bounds.contains(c)
        table[i] = c.as_tuple()
    mids = np.array([0.0, (bounds.tau_min + bounds.tau_max) / 2, 0.0, 0.0])
    widths = np.array([2 * bounds.delta_max, bounds.tau_max - bounds.tau_min,
                       2 * bounds.b_max, 2 * bounds.s_max])
    assert np.all(np.abs(table.mean(axis=0) - mids) < 0.01 * widths)


def test_context_params_validation():
    with pytest.raises(ValueError):
        ContextParams(0.0, -1.0, 0.0, 0.0)
    with pytest.raises(ValueError):
        ContextParams(np.nan, 1.0, 0.0, 0.0)
    with pytest.raises(ValueError):
        ContextBounds(tau_min=1.2)
