"""Fast invariant suites behind the ``selftest`` CLI verb.

Each check prints one PASS/FAIL line; the runner returns the failure
count. These are the always-on guarantees: transform algebra, protocol
bookkeeping, file round-trips, metric formulas, and run determinism.
"""

from __future__ import annotations

import dataclasses
import filecmp
import os
import tempfile

import numpy as np

from . import frontend as fe
from . import protocol as proto
from . import transform as tf
from .config import ExperimentConfig, parse_config, serialize_config
from .experiment import RESULTS_NAME, run_seed
from .frontend import SynthSpec
from .nets import EmbedderConfig, EstimatorConfig
from .training import TrainSchedule


def _check_transform_algebra():
    rng = np.random.default_rng(0)
    for _ in range(50):
        m = rng.standard_normal((1, 12, 10))
        if not np.array_equal(tf.apply_transform(m, tf.IDENTITY_CONTEXT), m):
            return "identity law violated"
        b1, s1, b2, s2 = rng.uniform(-0.5, 0.5, 4)
        once = tf.apply_amplitude(tf.apply_amplitude(m, b1, s1), b2, s2)
        joint = tf.apply_amplitude(m, b1 + b2, s1 + s2)
        if np.abs(once - joint).max() > 1e-10:
            return "amplitude composition is not additive"
        c = tf.sample_pseudo_context(tf.ContextBounds(), rng)
        g = tf.make_grid(c, 12, 10)
        m2 = rng.standard_normal((1, 12, 10))
        a, b = rng.uniform(-2, 2, 2)
        lin = tf.grid_sample(a * m + b * m2, g)
        sep = a * tf.grid_sample(m, g) + b * tf.grid_sample(m2, g)
        if np.abs(lin - sep).max() > 1e-10:
            return "warp is not linear in its input"
        amp_only = tf.ContextParams(0.0, 1.0, c.b, c.s)
        back = tf.apply_inverse(tf.apply_transform(m, amp_only), amp_only)
        if np.abs(back - m).max() > 1e-10:
            return "amplitude-only inversion is inexact"
    return None


def _check_pseudo_context_bounds():
    rng = np.random.default_rng(1)
    bounds = tf.ContextBounds()
    for _ in range(500):
        if not bounds.contains(tf.sample_pseudo_context(bounds, rng)):
            return "sampled context escaped its bounds"
    return None


def _check_metrics():
    row = [96.65, 92.27, 88.21, 86.54, 82.39, 78.74, 76.61, 74.85, 72.51, 70.96]
    m = proto.metrics(row)
    if abs(m.average_accuracy - 81.97) > 0.02 or abs(m.performance_drop - 25.69) > 0.02:
        return "published AA/PD row not reproduced"
    if abs(m.average_drop_rate - 3.03) > 0.02:
        return "published ADR row not reproduced"
    flat = proto.metrics([0.5, 0.5, 0.5])
    if flat.performance_drop != 0 or flat.average_drop_rate != 0:
        return "constant accuracies should give zero drops"
    return None


def _check_protocol_bookkeeping():
    labels = np.repeat(np.arange(20), 12)
    spec = proto.ProtocolSpec(ways=3, shots=4, sessions=3, seed=5)
    ledger = proto.build_sessions(labels, spec)
    seen = [c for cls in ledger.session_classes for c in cls]
    if len(seen) != len(set(seen)):
        return "session label sets overlap"
    for cls in ledger.session_classes[1:]:
        for c in cls:
            if len(ledger.support_indices[c]) != spec.shots:
                return f"novel class {c} does not hold exactly K supports"
    for c in seen:
        if set(ledger.support_indices[c]) & set(ledger.test_indices[c]):
            return f"class {c} support and test sets intersect"
    for session in range(spec.sessions + 1):
        want = set(ledger.classes_up_to(session))
        got = set()
        for c in want:
            got.add(int(labels[ledger.test_indices[c][0]]))
        if got != want:
            return "cumulative evaluation does not cover all seen classes"
    return None


def _check_record_roundtrip():
    rng = np.random.default_rng(2)
    with tempfile.TemporaryDirectory() as td:
        path = os.path.join(td, "r.bin")
        data = rng.standard_normal((3, 64)).astype("<f4")
        fe.write_record(path, data, 7)
        back, label = fe.read_record(path)
        if label != 7 or not np.array_equal(back, data):
            return "record round-trip is not bit-exact"
    return None


def _check_config_roundtrip():
    cfg = ExperimentConfig()
    if parse_config(serialize_config(cfg)) != cfg:
        return "config does not survive serialize/parse"
    return None


def _tiny_config() -> ExperimentConfig:
    return dataclasses.replace(
        ExperimentConfig(),
        synth=SynthSpec(material_count=8, per_class_count=8, resonance_count=2,
                        noise_std=0.05, mel_bins=12, frames=10, rng_seed=3),
        estimator=EstimatorConfig(block_count=1, base_width=4),
        embedder=EmbedderConfig(stage_widths=(4, 8), blocks_per_stage=1, embed_dim=8),
        pretrain=TrainSchedule(lr=0.05, epochs=1, batch_size=16),
        full_base=TrainSchedule(lr=0.01, epochs=1, batch_size=16),
        incremental=TrainSchedule(lr=0.1, epochs=3),
        protocol=proto.ProtocolSpec(ways=2, shots=3, sessions=2, seed=0),
        n_ucpc=2, seeds=(0,))


def _check_run_determinism():
    cfg = _tiny_config()
    with tempfile.TemporaryDirectory() as td:
        a = os.path.join(td, "a")
        b = os.path.join(td, "b")
        run_seed(cfg, 0, a)
        run_seed(cfg, 0, b)
        for name in (RESULTS_NAME, "checkpoint.ckpt"):
            if not filecmp.cmp(os.path.join(a, name), os.path.join(b, name), shallow=False):
                return f"repeated seeded runs differ in {name}"
    return None


CHECKS = [
    ("transform algebra", _check_transform_algebra),
    ("pseudo-context bounds", _check_pseudo_context_bounds),
    ("metric formulas", _check_metrics),
    ("protocol bookkeeping", _check_protocol_bookkeeping),
    ("record round-trip", _check_record_roundtrip),
    ("config round-trip", _check_config_roundtrip),
    ("run determinism", _check_run_determinism),
]


def run_selftest(verbose: bool = True) -> int:
    failures = 0
    for name, check in CHECKS:
        problem = check()
        if problem is None:
            if verbose:
                print(f"PASS {name}")
        else:
            failures += 1
            if verbose:
                print(f"FAIL {name}: {problem}")
    return failures
