"""Signal frontend: slicing, log-Mel extraction, and synthetic materials.

Raw tactile recordings are cut into fixed-length slices and converted to
multi-channel log-Mel spectrograms. The synthetic generator builds
material spectrograms directly in the spectrogram domain (smooth
resonance bumps over a textured floor) and corrupts them through the
context transform family, recording the injected ground-truth contexts
so estimator oracles can be tested.

Dataset directory layout: a human-readable ``manifest.txt``, one binary
record file per slice (16-byte header + channel-major little-endian
float32 samples), and for synthetic data a ``contexts.txt`` sidecar with
the true context per record.
"""

from __future__ import annotations

import os
import struct
import warnings
from dataclasses import dataclass, field

import numpy as np

from .transform import ContextBounds, ContextParams, apply_transform, sample_pseudo_context

RECORD_MAGIC = b"TREC"
LOG_FLOOR = 1e-10


@dataclass
class RawRecording:
    """Multi-channel time series with fine/coarse class labels."""

    samples: np.ndarray  # (channels, n) float
    sample_rate: float
    label_fine: int
    label_coarse: int = 0

    def __post_init__(self):
        self.samples = np.atleast_2d(np.asarray(self.samples, dtype=np.float64))
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")

    @property
    def channel_count(self) -> int:
        return self.samples.shape[0]

    @property
    def length(self) -> int:
        return self.samples.shape[1]


@dataclass(frozen=True)
class MelConfig:
    fft_size: int = 128
    window_len: int = 128
    hop_len: int = 16
    window: str = "hann"
    mel_bins: int = 64
    sample_rate: float = 1000.0

    def __post_init__(self):
        if self.window_len > self.fft_size:
            raise ValueError("window_len must not exceed fft_size")
        if self.hop_len < 1:
            raise ValueError("hop_len must be at least 1")
        if self.mel_bins < 2:
            raise ValueError("need at least 2 Mel bins")
        if self.window != "hann":
            raise ValueError(f"unsupported window {self.window!r}")


def slice_signal(rec: RawRecording, slice_len_s: float) -> list[RawRecording]:
    """Cut a recording into consecutive non-overlapping slices.

    Each slice is exactly round(slice_len_s * sample_rate) samples; the
    trailing remainder is discarded. A recording shorter than one slice
    yields an empty list with a warning.
    """
    n = int(round(slice_len_s * rec.sample_rate))
    if n < 1:
        raise ValueError("slice length is shorter than one sample")
    if rec.length < n:
        warnings.warn(f"recording of {rec.length} samples is shorter than one "
                      f"slice of {n}; nothing produced")
        return []
    count = rec.length // n
    return [RawRecording(rec.samples[:, i * n:(i + 1) * n].copy(), rec.sample_rate,
                         rec.label_fine, rec.label_coarse)
            for i in range(count)]


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(cfg: MelConfig) -> np.ndarray:
    """Triangular Mel filters over the rfft bins, spanning 0..sample_rate/2.

    A triangle too narrow to cover any bin (possible at coarse FFT
    resolution) degenerates to unit weight on the bin nearest its
    center, keeping every row positive and contiguous.
    """
    n_freqs = cfg.fft_size // 2 + 1
    freqs = np.linspace(0.0, cfg.sample_rate / 2.0, n_freqs)
    mel_pts = np.linspace(0.0, float(_hz_to_mel(cfg.sample_rate / 2.0)), cfg.mel_bins + 2)
    hz_pts = _mel_to_hz(mel_pts)
    fb = np.zeros((cfg.mel_bins, n_freqs))
    for m in range(cfg.mel_bins):
        lo, ctr, hi = hz_pts[m], hz_pts[m + 1], hz_pts[m + 2]
        up = (freqs - lo) / max(ctr - lo, 1e-12)
        down = (hi - freqs) / max(hi - ctr, 1e-12)
        fb[m] = np.clip(np.minimum(up, down), 0.0, None)
        if fb[m].sum() <= 0.0:
            fb[m, int(np.argmin(np.abs(freqs - ctr)))] = 1.0
    return fb


def _hann(n: int) -> np.ndarray:
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def frame_count(length: int, cfg: MelConfig) -> int:
    return (length - cfg.window_len) // cfg.hop_len + 1


def log_mel(rec: RawRecording, cfg: MelConfig) -> np.ndarray:
    """Log-compressed Mel spectrogram, shape (channels, mel_bins, frames).

    Magnitude short-time transform with a Hann taper and no center
    padding, Mel projection, then log(x + 1e-10).
    """
    if rec.length < cfg.window_len:
        raise ValueError(f"slice of {rec.length} samples is shorter than the "
                         f"window ({cfg.window_len})")
    if not np.all(np.isfinite(rec.samples)):
        raise ValueError("input samples contain non-finite values")
    win = _hann(cfg.window_len)
    fb = mel_filterbank(cfg)
    frames = np.lib.stride_tricks.sliding_window_view(
        rec.samples, cfg.window_len, axis=1)[:, ::cfg.hop_len]  # (C, T, win)
    spec = np.abs(np.fft.rfft(frames * win, n=cfg.fft_size, axis=2))  # (C, T, bins)
    mel = spec @ fb.T  # (C, T, mel)
    return np.log(mel + LOG_FLOOR).transpose(0, 2, 1)


# ---------------------------------------------------------------------------
# synthetic materials
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SynthSpec:
    material_count: int = 40
    per_class_count: int = 25
    resonance_count: int = 3
    noise_std: float = 0.05
    mel_bins: int = 32
    frames: int = 24
    channels: int = 1
    rng_seed: int = 0
    bounds: ContextBounds = field(default_factory=ContextBounds)

    def __post_init__(self):
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")
        if self.mel_bins < 2 or self.frames < 2:
            raise ValueError("spectrogram must be at least 2x2")


def _material_rng(spec: SynthSpec, material_id: int) -> np.random.Generator:
    return np.random.default_rng([spec.rng_seed, 1, material_id])


def _sample_rng(spec: SynthSpec, material_id: int, index: int) -> np.random.Generator:
    return np.random.default_rng([spec.rng_seed, 2, material_id, index])


def _smooth2d(x: np.ndarray, passes: int = 2) -> np.ndarray:
    for _ in range(passes):
        x = (x + np.roll(x, 1, 0) + np.roll(x, -1, 0)) / 3.0
        x = (x + np.roll(x, 1, 1) + np.roll(x, -1, 1)) / 3.0
    return x


# The fixed spectral tilt and temporal ramp give every material smooth
# large-scale structure whose edge loss under warping grows with the
# transform magnitude; bump widths stay well above the bin spacing so
# bilinear resampling error stays small against it.
_FLOOR_AMP = 0.18
_BASE_TILT = -0.4
_TIME_RAMP = 0.3
_SMOOTH_PASSES = 3


def synth_canonical(material_id: int, spec: SynthSpec) -> np.ndarray:
    """Canonical material spectrogram, deterministic in (id, rng_seed).

    A sum of smooth frequency-band bumps with material-specific centers,
    widths and slow temporal amplitude patterns, over a material-specific
    textured floor with fixed tilt and time ramp; normalized to [-1, 1].
    """
    if material_id >= spec.material_count:
        raise ValueError(f"material {material_id} >= material_count {spec.material_count}")
    rng = _material_rng(spec, material_id)
    F, T, C = spec.mel_bins, spec.frames, spec.channels
    f_axis = np.arange(F, dtype=np.float64)
    t_axis = np.arange(T, dtype=np.float64)
    rf = 2.0 * f_axis / (F - 1) - 1.0
    rt = 2.0 * t_axis / (T - 1) - 1.0
    out = np.empty((C, F, T))
    for ch in range(C):
        m = np.zeros((F, T))
        lo, hi = 0.12 * (F - 1), 0.88 * (F - 1)
        for k in range(spec.resonance_count):
            seg = lo + (hi - lo) * (k + rng.uniform(0.15, 0.85)) / max(spec.resonance_count, 1)
            width = rng.uniform(max(F / 16.0, 1.0), F / 7.0)
            amp = rng.uniform(0.9, 1.8)
            rate = rng.uniform(0.5, 2.5)
            phase = rng.uniform(0.0, 2.0 * np.pi)
            depth = rng.uniform(0.25, 0.55)
            env = 1.0 + depth * np.sin(2.0 * np.pi * rate * t_axis / T + phase)
            bump = np.exp(-0.5 * ((f_axis - seg) / width) ** 2)
            m += amp * bump[:, None] * env[None, :]
        floor = _smooth2d(rng.standard_normal((F, T)), passes=_SMOOTH_PASSES)
        tilt = (rng.uniform(-0.05, 0.05) + _BASE_TILT) * rf
        m += _FLOOR_AMP * floor + tilt[:, None] + _TIME_RAMP * rt[None, :]
        out[ch] = m
    span = out.max() - out.min()
    return 2.0 * (out - out.min()) / max(span, 1e-12) - 1.0


def synth_observe(canonical: np.ndarray, c: ContextParams, noise_std: float,
                  rng: np.random.Generator) -> np.ndarray:
    """Transform a canonical spectrogram by context c plus Gaussian residual."""
    obs = apply_transform(canonical, c)
    if noise_std > 0:
        obs = obs + rng.normal(0.0, noise_std, size=obs.shape)
    return obs


def catalog_separation(spec: SynthSpec) -> float:
    """Minimum pairwise mean-l1 distance over the canonical catalog."""
    catalog = [synth_canonical(m, spec) for m in range(spec.material_count)]
    best = np.inf
    for i in range(len(catalog)):
        for j in range(i + 1, len(catalog)):
            best = min(best, float(np.abs(catalog[i] - catalog[j]).mean()))
    return best


@dataclass
class SpectrogramDataset:
    """In-memory spectrogram dataset with optional synthetic ground truth."""

    spectra: np.ndarray            # (N, C, F, T)
    labels: np.ndarray             # (N,) fine labels
    coarse: np.ndarray | None = None
    contexts: np.ndarray | None = None   # (N, 4) true injected contexts
    canonical: np.ndarray | None = None  # (n_classes, C, F, T)
    meta: dict = field(default_factory=dict)

    @property
    def n_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self.labels) else 0

    def class_indices(self, label: int) -> np.ndarray:
        return np.nonzero(self.labels == label)[0]

    def context_of(self, index: int) -> ContextParams:
        if self.contexts is None:
            raise ValueError("dataset carries no ground-truth contexts")
        return ContextParams(*self.contexts[index])


def build_synthetic_dataset(spec: SynthSpec) -> SpectrogramDataset:
    """Generate the full observation set; deterministic in rng_seed."""
    n = spec.material_count * spec.per_class_count
    spectra = np.empty((n, spec.channels, spec.mel_bins, spec.frames))
    labels = np.empty(n, dtype=np.int64)
    contexts = np.empty((n, 4))
    canonical = np.empty((spec.material_count, spec.channels, spec.mel_bins, spec.frames))
    i = 0
    for m in range(spec.material_count):
        canonical[m] = synth_canonical(m, spec)
        for j in range(spec.per_class_count):
            rng = _sample_rng(spec, m, j)
            c = sample_pseudo_context(spec.bounds, rng)
            spectra[i] = synth_observe(canonical[m], c, spec.noise_std, rng)
            labels[i] = m
            contexts[i] = c.as_tuple()
            i += 1
    meta = {"source": "synthetic", "material_count": spec.material_count,
            "per_class_count": spec.per_class_count, "rng_seed": spec.rng_seed}
    return SpectrogramDataset(spectra, labels, coarse=labels.copy(),
                              contexts=contexts, canonical=canonical, meta=meta)


# ---------------------------------------------------------------------------
# dataset directory format
# ---------------------------------------------------------------------------

def write_record(path: str, data: np.ndarray, label: int):
    """One record file: TREC header (magic, channels, length, label) + f32 data."""
    arr = np.ascontiguousarray(data, dtype="<f4")
    channels, length = (1, arr.shape[0]) if arr.ndim == 1 else (arr.shape[0],
                                                                int(np.prod(arr.shape[1:])))
    with open(path, "wb") as fh:
        fh.write(RECORD_MAGIC)
        fh.write(struct.pack("<III", channels, length, label))
        fh.write(arr.tobytes())


def read_record(path: str):
    with open(path, "rb") as fh:
        if fh.read(4) != RECORD_MAGIC:
            raise ValueError(f"{path} is not a record file")
        channels, length, label = struct.unpack("<III", fh.read(12))
        data = np.frombuffer(fh.read(4 * channels * length), dtype="<f4")
    return data.reshape(channels, length).copy(), int(label)


def _write_manifest(path: str, fields: dict):
    with open(path, "w") as fh:
        for k, v in fields.items():
            fh.write(f"{k} = {v}\n")


def _read_manifest(path: str) -> dict:
    out = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            k, _, v = line.partition("=")
            out[k.strip()] = v.strip()
    return out


def write_dataset(out_dir: str, ds: SpectrogramDataset, spec: SynthSpec | None = None,
                  force: bool = False):
    """Persist a spectrogram dataset as manifest + record files + sidecar."""
    if os.path.isdir(out_dir) and os.listdir(out_dir) and not force:
        raise FileExistsError(f"{out_dir} exists and is not empty (use force)")
    os.makedirs(out_dir, exist_ok=True)
    n, C, F, T = ds.spectra.shape
    manifest = {
        "format_version": 1,
        "record_kind": "spectrogram",
        "sample_rate": ds.meta.get("sample_rate", 0),
        "channel_count": C,
        "slice_len_s": ds.meta.get("slice_len_s", 0),
        "record_count": n,
        "mel_bins": F,
        "frames": T,
    }
    if spec is not None:
        manifest.update(rng_seed=spec.rng_seed, material_count=spec.material_count,
                        per_class_count=spec.per_class_count,
                        resonance_count=spec.resonance_count, noise_std=spec.noise_std)
    _write_manifest(os.path.join(out_dir, "manifest.txt"), manifest)
    width = len(str(max(n - 1, 1)))
    for i in range(n):
        write_record(os.path.join(out_dir, f"rec_{i:0{width}d}.bin"),
                     ds.spectra[i].reshape(C, F * T), int(ds.labels[i]))
    if ds.contexts is not None:
        with open(os.path.join(out_dir, "contexts.txt"), "w") as fh:
            fh.write("# index delta tau b s\n")
            for i, row in enumerate(ds.contexts):
                vals = " ".join(repr(float(v)) for v in row)
                fh.write(f"{i} {vals}\n")


def load_dataset(path: str, mel: MelConfig | None = None) -> SpectrogramDataset:
    """Load a dataset directory; time-series records are run through log_mel."""
    manifest = _read_manifest(os.path.join(path, "manifest.txt"))
    kind = manifest.get("record_kind", "spectrogram")
    names = sorted(f for f in os.listdir(path) if f.startswith("rec_") and f.endswith(".bin"))
    if int(manifest.get("record_count", len(names))) != len(names):
        raise ValueError(f"manifest declares {manifest['record_count']} records, "
                         f"found {len(names)}")
    spectra, labels = [], []
    for name in names:
        data, label = read_record(os.path.join(path, name))
        if kind == "spectrogram":
            F, T = int(manifest["mel_bins"]), int(manifest["frames"])
            spectra.append(data.astype(np.float64).reshape(-1, F, T))
        else:
            if mel is None:
                raise ValueError("time-series dataset requires a MelConfig")
            rec = RawRecording(data.astype(np.float64),
                               float(manifest["sample_rate"]), label)
            spectra.append(log_mel(rec, mel))
        labels.append(label)
    contexts = None
    sidecar = os.path.join(path, "contexts.txt")
    if os.path.exists(sidecar):
        rows = np.loadtxt(sidecar, comments="#", ndmin=2)
        contexts = rows[np.argsort(rows[:, 0])][:, 1:5]
    return SpectrogramDataset(np.stack(spectra), np.asarray(labels, dtype=np.int64),
                              contexts=contexts,
                              meta={"source": path, **manifest})
