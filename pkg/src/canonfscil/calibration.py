"""Prototype calibration from canonicalization stability.

Sample uncertainty is the mean l1 dispersion between canonicalizations
of pseudo-context perturbed anchors and the canonicalized observation,
normalized by spectrogram size so the scale is resolution-independent.
Class uncertainty feeds a monotone map onto a prototype variance, which
drives conjugate-Gaussian shrinkage of few-shot prototypes toward a
prior built from previously learned classes. Classification draws
stochastic prototypes around the calibrated centers and scores by
cosine softmax; evaluation uses the zero-noise centers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nets import canonicalize_batch
from .transform import ContextBounds, apply_transform, sample_pseudo_context

PRIOR_VAR_FLOOR = 1e-6


@dataclass
class ClassRecord:
    """Per-class classifier state: raw prototype, calibrated center and
    variance, and the class uncertainty frozen at its introduction session."""

    class_id: int
    session: int
    mu_raw: np.ndarray        # support-mean embedding
    mu_cal: np.ndarray        # calibrated center (trainable downstream)
    var_cal: float            # isotropic calibrated variance
    uncertainty: float = 0.0

    def __post_init__(self):
        if self.var_cal <= 0:
            raise ValueError("calibrated variance must be positive")


@dataclass(frozen=True)
class PriorStats:
    mu: np.ndarray
    var: float

    def __post_init__(self):
        if self.var <= 0:
            raise ValueError("prior variance must be positive")


@dataclass(frozen=True)
class UncertaintyMap:
    """Affine monotone map from class uncertainty to prototype variance."""

    alpha: float = 1.0
    beta: float = 0.05

    def __post_init__(self):
        if self.alpha <= 0 or self.beta <= 0:
            raise ValueError("alpha and beta must be positive")

    def variance(self, uncertainty: float) -> float:
        return self.beta + self.alpha * uncertainty


def sample_uncertainty(estimator, anchor: np.ndarray, observed: np.ndarray,
                       n_draws: int, bounds: ContextBounds,
                       rng: np.random.Generator, draws=None) -> float:
    """Canonicalization instability of one sample under pseudo-contexts.

    Applies ``n_draws`` pseudo-context transforms to ``anchor``,
    canonicalizes each, and averages the per-element l1 distance to the
    canonicalization of ``observed``. The anchor is the canonicalized
    observation by default; oracle tests pass the true canonical form
    and may pin the pseudo-context ``draws`` explicitly.
    """
    if n_draws < 1:
        raise ValueError("need at least one pseudo-context draw")
    if draws is None:
        draws = [sample_pseudo_context(bounds, rng) for _ in range(n_draws)]
    elif len(draws) != n_draws:
        raise ValueError(f"got {len(draws)} explicit draws for n_draws={n_draws}")
    ref = _canon_data(estimator, observed[None])[0]
    perturbed = np.stack([apply_transform(anchor, c) for c in draws])
    canon = _canon_data(estimator, perturbed)
    return float(np.abs(canon - ref[None]).mean(axis=(1, 2, 3)).mean())


def _canon_data(estimator, batch: np.ndarray) -> np.ndarray:
    was_training = getattr(estimator, "training", False)
    if hasattr(estimator, "eval"):
        estimator.eval()
    try:
        with ad.no_grad():
            out = canonicalize_batch(estimator, Tensor(batch))
    finally:
        if hasattr(estimator, "train"):
            estimator.train(was_training)
    return out.data


def class_uncertainty(sample_us) -> float:
    """Arithmetic mean of the support samples' uncertainties."""
    us = list(sample_us)
    if not us:
        raise ValueError("class uncertainty needs a non-empty support")
    return float(np.mean(us))


def prior_stats(old_records: list[ClassRecord]) -> PriorStats:
    """Gaussian summary of previously learned classes.

    Mean of the stored raw prototypes; variance is the per-dimension
    population variance averaged over dimensions, floored at 1e-6.
    """
    if len(old_records) < 2:
        raise ValueError("prior needs at least two previously learned classes")
    protos = np.stack([r.mu_raw for r in old_records])
    var = float(protos.var(axis=0, ddof=0).mean())
    return PriorStats(mu=protos.mean(axis=0), var=max(var, PRIOR_VAR_FLOOR))


def shrink(mu_y: np.ndarray, prior: PriorStats, var_y: float):
    """Precision-weighted posterior of the class center.

    Returns (calibrated center, calibrated variance, shrinkage weight):
    lam = prior_precision / (prior_precision + prototype_precision),
    center = (1 - lam) mu_y + lam mu_p, variance = 1 / total precision.
    """
    if var_y <= 0:
        raise ValueError("prototype variance must be positive")
    prec_p = 1.0 / prior.var
    prec_y = 1.0 / var_y
    lam = prec_p / (prec_p + prec_y)
    center = (1.0 - lam) * np.asarray(mu_y, dtype=np.float64) + lam * prior.mu
    return center, 1.0 / (prec_p + prec_y), lam


def classify(z: np.ndarray, records: list[ClassRecord],
             rng: np.random.Generator | None = None, stochastic: bool = False):
    """Cosine-softmax prediction over the cumulative label set.

    Stochastic mode perturbs each center by sqrt(var) * standard normal;
    deterministic mode scores the calibrated centers directly. Exact
    logit ties resolve to the lowest class id. Returns (label, probs)
    with probs aligned to the record order.
    """
    if not records:
        raise ValueError("no class records to classify against")
    z = np.asarray(z, dtype=np.float64)
    zn = np.linalg.norm(z)
    if zn == 0:
        raise ValueError("cannot classify a zero-norm embedding")
    centers = np.stack([r.mu_cal for r in records]).astype(np.float64)
    if stochastic:
        if rng is None:
            raise ValueError("stochastic classification needs an rng")
        noise = rng.standard_normal(centers.shape)
        scales = np.sqrt(np.array([r.var_cal for r in records]))
        centers = centers + scales[:, None] * noise
    norms = np.linalg.norm(centers, axis=1)
    if np.any(norms == 0):
        raise ValueError("a class center has zero norm")
    logits = (centers / norms[:, None]) @ (z / zn)
    shifted = np.exp(logits - logits.max())
    probs = shifted / shifted.sum()
    best = logits.max()
    tied = [records[i].class_id for i in np.nonzero(logits == best)[0]]
    return min(tied), probs
