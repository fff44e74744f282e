"""Frontend: slicing, log-Mel extraction, synthesis, and file format."""

import os

import numpy as np
import pytest

from canonfscil import frontend as fe
from canonfscil.frontend import (MelConfig, RawRecording, SynthSpec, build_synthetic_dataset,
                                 catalog_separation, load_dataset, log_mel, mel_filterbank,
                                 read_record, slice_signal, synth_canonical, synth_observe,
                                 write_dataset, write_record)
from canonfscil.transform import ContextBounds, ContextParams, IDENTITY_CONTEXT, apply_transform

from helpers import dft_magnitude, spectral_flatness


# -- slicing ----------------------------------------------------------

def test_slice_published_configurations():
    # 1 kHz recording, 0.5 s slices: 5000 samples -> 10 x 500
    rec = RawRecording(np.arange(5000.0)[None], 1000.0, 3, label_coarse=1)
    slices = slice_signal(rec, 0.5)
    assert len(slices) == 10 and all(s.length == 500 for s in slices)
    assert all(s.label_fine == 3 and s.label_coarse == 1 for s in slices)
    # 10 kHz recording of 8500 samples, 0.8 s slices -> one slice, 500 dropped
    rec2 = RawRecording(np.zeros((2, 8500)), 10000.0, 0)
    slices2 = slice_signal(rec2, 0.8)
    assert len(slices2) == 1 and slices2[0].length == 8000


def test_slice_identity_case():
    rec = RawRecording(np.arange(400.0)[None], 100.0, 7)
    slices = slice_signal(rec, 4.0)
    assert len(slices) == 1
    assert np.array_equal(slices[0].samples, rec.samples)


def test_slice_conserves_samples():
    rng = np.random.default_rng(0)
    rec = RawRecording(rng.standard_normal((1, 1234)), 100.0, 0)
    slices = slice_signal(rec, 1.5)
    used = sum(s.length for s in slices)
    assert used + (rec.length - used) == rec.length
    assert rec.length - used < 150


def test_slice_short_recording_warns_empty():
    rec = RawRecording(np.zeros((1, 10)), 100.0, 0)
    with pytest.warns(UserWarning):
        assert slice_signal(rec, 1.0) == []


# -- log-Mel ----------------------------------------------------------

def test_frame_count_formula():
    cfg = MelConfig()
    x = np.random.default_rng(1).standard_normal((1, 500))
    out = log_mel(RawRecording(x, 1000.0, 0), cfg)
    assert out.shape == (1, 64, (500 - 128) // 16 + 1)
    assert out.shape[2] == 24


def test_zero_signal_hits_log_floor():
    cfg = MelConfig()
    out = log_mel(RawRecording(np.zeros((2, 300)), 1000.0, 0), cfg)
    assert np.allclose(out, np.log(1e-10))


def test_log_mel_rejects_bad_input():
    cfg = MelConfig()
    with pytest.raises(ValueError):
        log_mel(RawRecording(np.zeros((1, 64)), 1000.0, 0), cfg)
    bad = np.zeros((1, 300))
    bad[0, 5] = np.inf
    with pytest.raises(ValueError):
        log_mel(RawRecording(bad, 1000.0, 0), cfg)


def test_filterbank_rows_positive_and_contiguous():
    for cfg in (MelConfig(), MelConfig(sample_rate=10000.0),
                MelConfig(fft_size=256, mel_bins=8)):
        fb = mel_filterbank(cfg)
        assert fb.shape == (cfg.mel_bins, cfg.fft_size // 2 + 1)
        assert np.all(fb.sum(axis=1) > 0)
        for row in fb:
            nz = np.nonzero(row)[0]
            assert len(nz) == nz[-1] - nz[0] + 1


def test_sinusoid_concentrates_in_its_band():
    # wide bands (8 over 129 bins) so one band can dominate the Hann lobe
    cfg = MelConfig(fft_size=256, window_len=128, hop_len=16, mel_bins=8,
                    sample_rate=1000.0)
    fb = mel_filterbank(cfg)
    freqs = np.linspace(0.0, 500.0, 129)
    band = 5
    f0 = freqs[np.argmax(fb[band])]
    t = np.arange(500) / 1000.0
    x = np.sin(2 * np.pi * f0 * t)
    out = log_mel(RawRecording(x[None], 1000.0, 0), cfg)
    mel_energy = np.exp(out[0]) - 1e-10
    share = mel_energy[band] / mel_energy.sum(axis=0)
    assert share.min() >= 0.9

    # dense matrix-multiply oracle on an exhaustively computed spectrum
    win = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(128) / 128)
    mag = dft_magnitude(x[:128] * win, 256)
    mel_oracle = fb @ mag
    assert mel_oracle[band] / mel_oracle.sum() >= 0.9
    assert np.allclose(mel_energy[:, 0], mel_oracle, rtol=1e-9, atol=1e-9)


def test_time_shift_covariance_at_hop_granularity():
    cfg = MelConfig()
    rng = np.random.default_rng(2)
    t = np.arange(800) / 1000.0
    x = np.sin(2 * np.pi * 130.0 * t) + 0.3 * np.sin(2 * np.pi * 47.0 * t + 1.0)
    full = log_mel(RawRecording(x[None], 1000.0, 0), cfg)
    k = 3
    shifted = log_mel(RawRecording(x[None, k * cfg.hop_len:], 1000.0, 0), cfg)
    overlap = shifted.shape[2]
    assert np.allclose(full[:, :, k:k + overlap], shifted, atol=1e-6)


# -- synthetic generator ---------------------------------------------

SYNTH = SynthSpec(material_count=8, per_class_count=5, mel_bins=24, frames=16,
                  noise_std=0.05, rng_seed=11)


def test_canonical_determinism_and_range():
    a = synth_canonical(3, SYNTH)
    b = synth_canonical(3, SYNTH)
    assert np.array_equal(a, b)
    assert a.min() == pytest.approx(-1.0) and a.max() == pytest.approx(1.0)
    with pytest.raises(ValueError):
        synth_canonical(8, SYNTH)


def test_catalog_separation_floor():
    floor = catalog_separation(SYNTH)
    assert floor > 0.05
    a, b = synth_canonical(0, SYNTH), synth_canonical(1, SYNTH)
    assert np.abs(a - b).mean() >= floor


def test_class_separability_beats_intra_distance():
    # intra distance is 0 by determinism, so any positive floor suffices
    assert catalog_separation(SYNTH) > 0.0


def test_resonance_free_floor_is_flat():
    spec = SynthSpec(material_count=2, per_class_count=2, resonance_count=0,
                     mel_bins=64, frames=24, rng_seed=3)
    flat = spectral_flatness(synth_canonical(0, spec))
    assert flat.min() > 0.5


def test_observe_identity_and_composition():
    canon = synth_canonical(0, SYNTH)
    rng = np.random.default_rng(4)
    assert np.array_equal(synth_observe(canon, IDENTITY_CONTEXT, 0.0, rng), canon)
    c = ContextParams(0.08, 1.07, 0.2, -0.1)
    assert np.array_equal(synth_observe(canon, c, 0.0, rng), apply_transform(canon, c))


def test_observe_noise_scale_monte_carlo():
    canon = synth_canonical(1, SYNTH)
    c = ContextParams(0.05, 1.05, 0.1, 0.0)
    base = apply_transform(canon, c)
    rng = np.random.default_rng(5)
    draws = np.stack([synth_observe(canon, c, 0.1, rng) - base for _ in range(10_000)])
    per_bin_std = draws.std(axis=0)
    assert abs(per_bin_std.mean() - 0.1) < 0.005 * 10  # within 5% of 0.1
    assert np.all(np.abs(per_bin_std - 0.1) < 0.1 * 0.15)


def test_dataset_contexts_within_bounds():
    ds = build_synthetic_dataset(SYNTH)
    assert ds.spectra.shape == (40, 1, 24, 16)
    bounds = SYNTH.bounds
    for i in range(len(ds.labels)):
        assert bounds.contains(ds.context_of(i))


def test_dataset_determinism():
    a = build_synthetic_dataset(SYNTH)
    b = build_synthetic_dataset(SYNTH)
    assert np.array_equal(a.spectra, b.spectra)
    assert np.array_equal(a.contexts, b.contexts)


# -- file format ------------------------------------------------------

def test_record_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(6)
    path = str(tmp_path / "rec.bin")
    data = rng.standard_normal((3, 77)).astype("<f4")
    write_record(path, data, 42)
    back, label = read_record(path)
    assert label == 42
    assert back.dtype == np.float32
    assert np.array_equal(back, data)
    assert os.path.getsize(path) == 16 + 4 * data.size


def test_record_rejects_garbage(tmp_path):
    path = str(tmp_path / "bad.bin")
    with open(path, "wb") as fh:
        fh.write(b"NOPE" + b"\0" * 12)
    with pytest.raises(ValueError):
        read_record(path)


def test_dataset_directory_round_trip(tmp_path):
    ds = build_synthetic_dataset(SYNTH)
    out = str(tmp_path / "ds")
    write_dataset(out, ds, SYNTH)
    files = sorted(os.listdir(out))
    assert "manifest.txt" in files and "contexts.txt" in files
    assert sum(f.startswith("rec_") for f in files) == 40

    back = load_dataset(out)
    assert np.array_equal(back.spectra.astype("<f4"), ds.spectra.astype("<f4"))
    assert np.array_equal(back.labels, ds.labels)
    assert np.array_equal(back.contexts, ds.contexts)

    with pytest.raises(FileExistsError):
        write_dataset(out, ds, SYNTH)
    write_dataset(out, ds, SYNTH, force=True)  # force allows overwrite


def test_dataset_regeneration_identical_bytes(tmp_path):
    first = str(tmp_path / "a")
    second = str(tmp_path / "b")
    write_dataset(first, build_synthetic_dataset(SYNTH), SYNTH)
    write_dataset(second, build_synthetic_dataset(SYNTH), SYNTH)
    for name in sorted(os.listdir(first)):
        with open(os.path.join(first, name), "rb") as fa, \
                open(os.path.join(second, name), "rb") as fb:
            assert fa.read() == fb.read(), name


def test_time_series_dataset_loads_through_log_mel(tmp_path):
    rng = np.random.default_rng(7)
    out = tmp_path / "ts"
    out.mkdir()
    cfg = MelConfig()
    sigs = [rng.standard_normal((1, 500)).astype("<f4") for _ in range(3)]
    for i, sig in enumerate(sigs):
        write_record(str(out / f"rec_{i}.bin"), sig, i)
    with open(out / "manifest.txt", "w") as fh:
        fh.write("format_version = 1\nrecord_kind = timeseries\n"
                 "sample_rate = 1000\nchannel_count = 1\nslice_len_s = 0.5\n"
                 "record_count = 3\n")
    ds = load_dataset(str(out), cfg)
    assert ds.spectra.shape == (3, 1, 64, 24)
    ref = log_mel(RawRecording(sigs[0].astype(np.float64), 1000.0, 0), cfg)
    assert np.allclose(ds.spectra[0], ref)
    with pytest.raises(ValueError):
        load_dataset(str(out))  # needs a MelConfig
