"""Finite-difference verification of every loss term.

Builds compact networks and a small synthetic batch, then checks the
tape gradients of the base objective (cross-entropy through the warp,
consistency, context regularizer) and the incremental objective against
central differences. Pseudo-context draws are frozen per closure so the
losses are deterministic under re-evaluation.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import ExperimentConfig
from .frontend import SynthSpec, build_synthetic_dataset
from .nets import (ContextEstimator, Embedder, EmbedderConfig, EstimatorConfig,
                   canonicalize_batch, grad_check)
from .training import (CosineClassifier, LossWeights, PrototypeBank,
                       consistency_loss, loss_base, loss_incremental, loss_reg,
                       perturbed_stack)


def _small_setup(cfg: ExperimentConfig, seed: int):
    synth = SynthSpec(material_count=4, per_class_count=3, resonance_count=2,
                      noise_std=0.05, mel_bins=12, frames=10, rng_seed=seed,
                      bounds=cfg.bounds)
    ds = build_synthetic_dataset(synth)
    est = ContextEstimator(EstimatorConfig(block_count=2, base_width=6), cfg.bounds,
                           np.random.default_rng([seed, 1]))
    emb = Embedder(EmbedderConfig(stage_widths=(6, 8), blocks_per_stage=1, embed_dim=8),
                   np.random.default_rng([seed, 2]))
    # nudge the zero head so estimator-body gradients are exercised too
    head_rng = np.random.default_rng([seed, 3])
    est.head.weight.data += 0.05 * head_rng.standard_normal(est.head.weight.shape)
    batch = ds.spectra[:4]
    labels = ds.labels[:4] % 4
    return ds, est, emb, batch, labels


def run_gradcheck_suite(cfg: ExperimentConfig, seed: int = 0, probes: int = 12) -> dict:
    """Returns {loss name: GradCheckReport}; every report should pass."""
    ds, est, emb, batch, labels = _small_setup(cfg, seed)
    bounds = cfg.bounds
    weights = LossWeights(lambda_cat=0.05, lambda_reg=1e-4, lambda_old=1.0)
    clf = CosineClassifier(np.random.default_rng([seed, 4]).standard_normal((4, 8)))

    reports = {}

    # the consistency anchor is a stop-gradient target: freeze it (and the
    # pseudo-context draws) before differencing, per the loss definition
    pert = perturbed_stack(batch, bounds, np.random.default_rng([seed, 9]), p_count=1)
    with ad.no_grad():
        anchor = canonicalize_batch(est, Tensor(batch)).data

    def base_loss():
        ce_reg = loss_base(batch, labels, est, emb, clf, weights, bounds,
                           np.random.default_rng([seed, 5]), consistency_on=False)[0]
        cat = consistency_loss(est, pert, anchor)
        return ad.add(ce_reg, ad.mul(Tensor(weights.lambda_cat), cat))

    reports["base/estimator"] = grad_check(est, base_loss, probes,
                                           rng=np.random.default_rng([seed, 6]))
    reports["base/embedder"] = grad_check(emb, base_loss, probes,
                                          rng=np.random.default_rng([seed, 7]))
    reports["base/classifier"] = grad_check(clf, base_loss, probes,
                                            rng=np.random.default_rng([seed, 8]))

    def cat_loss():
        return consistency_loss(est, pert, anchor)

    reports["consistency/estimator"] = grad_check(est, cat_loss, probes,
                                                  rng=np.random.default_rng([seed, 10]))

    def reg_loss():
        d, t, b, s = est.contexts(Tensor(batch))
        return loss_reg(d, t, b, s)

    reports["regularizer/estimator"] = grad_check(est, reg_loss, probes,
                                                  rng=np.random.default_rng([seed, 11]))

    rng = np.random.default_rng([seed, 12])
    bank = PrototypeBank(rng.standard_normal((6, 8)), np.full(6, 0.05))
    new_z = rng.standard_normal((5, 8))
    eta = rng.standard_normal((6, 8))
    new_positions = np.array([4, 5])
    new_targets = np.array([0, 1, 0, 1, 0])
    old_queries = rng.standard_normal((4, 8))
    old_positions = np.arange(4)

    def inc_loss():
        return loss_incremental(bank, new_z, new_positions, new_targets,
                                old_queries, old_positions, 1.0, eta)

    reports["incremental/prototypes"] = grad_check(bank, inc_loss, probes,
                                                   rng=np.random.default_rng([seed, 13]))
    return reports
