"""Loss terms and the base / incremental optimization loops.

Base training runs two stages: cross-entropy pretraining with a plain
linear softmax head, then joint training with the cosine-prototype
classifier plus the consistency and context-magnitude regularizers.
Incremental sessions freeze the backbone and estimator and optimize the
calibrated class centers and variances with the new/old cosine losses,
keeping variances positive through a softplus reparameterization.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .calibration import (ClassRecord, UncertaintyMap, class_uncertainty,
                          prior_stats, sample_uncertainty, shrink)
from .nets import Embedder, Linear, Module, canonicalize_batch, inverse_warp_batch
from .transform import ContextBounds, apply_transform, sample_pseudo_context


class TrainingDiverged(RuntimeError):
    """Raised when a loss goes non-finite; surfacing beats masking."""


@dataclass(frozen=True)
class LossWeights:
    lambda_cat: float = 0.05
    lambda_reg: float = 1e-4
    lambda_old: float = 1.0
    pseudo_per_sample: int = 1

    def __post_init__(self):
        for name in ("lambda_cat", "lambda_reg", "lambda_old"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be a non-negative finite weight")


@dataclass(frozen=True)
class TrainSchedule:
    lr: float
    epochs: int
    decay: float = 0.5
    decay_every: int = 40
    batch_size: int = 64
    momentum: float = 0.9

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.decay ** (epoch // self.decay_every)


PRETRAIN_SCHEDULE = TrainSchedule(lr=0.1, epochs=100)
FULL_BASE_SCHEDULE = TrainSchedule(lr=0.01, epochs=10)
INCREMENTAL_SCHEDULE = TrainSchedule(lr=0.1, epochs=200)


class SGD:
    """Stochastic gradient descent with classical momentum."""

    def __init__(self, params, momentum: float = 0.9):
        self.params = list(params)
        self.momentum = momentum
        self._velocity = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self, lr: float):
        for p, v in zip(self.params, self._velocity):
            if p.grad is None:
                continue
            v *= self.momentum
            v += p.grad
            p.data -= lr * v
            if not np.all(np.isfinite(p.data)):
                raise TrainingDiverged("parameters went non-finite during update")


# ---------------------------------------------------------------------------
# classifier heads
# ---------------------------------------------------------------------------

class PretrainHead(Module):
    """Plain linear softmax head used only in the first base stage."""

    def __init__(self, embed_dim: int, n_classes: int, rng):
        super().__init__()
        self.fc = Linear(embed_dim, n_classes, rng)
        self.n_classes = n_classes

    def logits(self, z: Tensor) -> Tensor:
        return self.fc.forward(z)


class CosineClassifier(Module):
    """Cosine-similarity softmax over trainable prototype vectors."""

    def __init__(self, prototypes: np.ndarray):
        super().__init__()
        self.weight = Tensor(np.array(prototypes, dtype=np.float64), requires_grad=True)
        self.n_classes = self.weight.shape[0]

    def logits(self, z: Tensor) -> Tensor:
        zn = ad.l2_normalize_rows(z)
        wn = ad.l2_normalize_rows(self.weight)
        return ad.matmul(zn, ad.transpose(wn))


class PrototypeBank(Module):
    """Calibrated centers and variances as one trainable block.

    Variances live behind a softplus so they stay positive however far
    the optimizer moves the raw parameter.
    """

    def __init__(self, centers: np.ndarray, variances: np.ndarray):
        super().__init__()
        variances = np.asarray(variances, dtype=np.float64)
        if np.any(variances <= 0):
            raise ValueError("variances must be positive")
        self.centers = Tensor(np.array(centers, dtype=np.float64), requires_grad=True)
        self.rho = Tensor(np.log(np.expm1(variances)), requires_grad=True)

    def sampled(self, eta: np.ndarray | None) -> Tensor:
        """Row-normalized stochastic prototypes (reparameterized), or the
        plain normalized centers when eta is None."""
        mu = self.centers
        if eta is not None:
            scale = ad.sqrt(ad.softplus(self.rho))
            mu = ad.add(mu, ad.mul(ad.reshape(scale, (-1, 1)), Tensor(eta)))
        return ad.l2_normalize_rows(mu)

    def variances(self) -> np.ndarray:
        return np.logaddexp(0.0, self.rho.data)


# ---------------------------------------------------------------------------
# loss terms
# ---------------------------------------------------------------------------

def loss_reg(delta: Tensor, tau: Tensor, b: Tensor, s: Tensor) -> Tensor:
    """Squared deviation from the identity context, averaged over the batch."""
    per = ad.add(ad.add(ad.square(delta), ad.square(ad.log(tau))),
                 ad.add(ad.square(b), ad.square(s)))
    return ad.tmean(per)


def perturbed_stack(batch: np.ndarray, bounds: ContextBounds,
                    rng: np.random.Generator, p_count: int) -> np.ndarray:
    """Pseudo-context transformed copies of a batch, (p_count, B, C, F, T)."""
    return np.stack([
        np.stack([apply_transform(m, sample_pseudo_context(bounds, rng))
                  for m in batch])
        for _ in range(p_count)])


def consistency_loss(estimator, perturbed: np.ndarray, anchor: np.ndarray) -> Tensor:
    """L1 gap between canonicalized perturbations and a fixed anchor.

    The anchor enters as plain data, so gradients flow only through the
    perturbed branch.
    """
    total = None
    for pert in perturbed:
        out = canonicalize_batch(estimator, Tensor(pert))
        term = ad.tmean(ad.absolute(ad.sub(out, Tensor(anchor))))
        total = term if total is None else ad.add(total, term)
    return ad.mul(Tensor(1.0 / len(perturbed)), total)


def loss_cat(estimator, batch: np.ndarray, bounds: ContextBounds,
             rng: np.random.Generator, p_count: int = 1) -> Tensor:
    """Pseudo-context consistency loss.

    Perturbs each observed spectrogram with pseudo-contexts, and
    penalizes the l1 gap between the canonicalized perturbation and the
    canonicalized observation; the observation branch is a stop-gradient
    target computed without a graph.
    """
    if p_count < 1:
        raise ValueError("need at least one pseudo-context per sample")
    with ad.no_grad():
        anchor = canonicalize_batch(estimator, Tensor(batch)).data
    return consistency_loss(estimator, perturbed_stack(batch, bounds, rng, p_count),
                            anchor)


def embed_pipeline(estimator, embedder: Embedder, x: Tensor, canonicalize_on: bool):
    """Shared forward: optional canonicalization, then embedding.

    Returns (embeddings, contexts-or-None); contexts are the per-sample
    (delta, tau, b, s) tensors when canonicalization is active.
    """
    if canonicalize_on:
        delta, tau, b, s = estimator.contexts(x)
        canon = inverse_warp_batch(x, delta, tau, b, s)
        return embedder.embed_batch(canon), (delta, tau, b, s)
    return embedder.embed_batch(x), None


def loss_base(batch: np.ndarray, labels: np.ndarray, estimator, embedder, classifier,
              weights: LossWeights, bounds: ContextBounds, rng: np.random.Generator,
              canonicalize_on: bool = True, consistency_on: bool = True):
    """Base-session objective: CE + lambda1 * consistency + lambda2 * reg.

    Returns (total loss tensor, per-term float dict).
    """
    if labels.max() >= classifier.n_classes:
        raise ValueError("batch contains a label outside the classifier's classes")
    z, ctx = embed_pipeline(estimator, embedder, Tensor(batch), canonicalize_on)
    ce = ad.cross_entropy(classifier.logits(z), labels)
    total = ce
    parts = {"ce": ce.item(), "cat": 0.0, "reg": 0.0}
    if ctx is not None and weights.lambda_reg > 0:
        reg = loss_reg(*ctx)
        total = ad.add(total, ad.mul(Tensor(weights.lambda_reg), reg))
        parts["reg"] = reg.item()
    if ctx is not None and consistency_on and weights.lambda_cat > 0:
        cat = loss_cat(estimator, batch, bounds, rng, weights.pseudo_per_sample)
        total = ad.add(total, ad.mul(Tensor(weights.lambda_cat), cat))
        parts["cat"] = cat.item()
    parts["total"] = total.item()
    return total, parts


def loss_incremental(bank: PrototypeBank, new_z: np.ndarray, new_positions: np.ndarray,
                     new_targets: np.ndarray, old_queries: np.ndarray,
                     old_positions: np.ndarray, lambda_old: float,
                     eta: np.ndarray | None):
    """Incremental objective L_New + lambda_old * L_Old.

    L_New scores the support embeddings against the current session's
    prototypes only; L_Old replays each stored old-class mean embedding
    against all prototypes seen so far. Both use the stochastic
    prototypes drawn with ``eta`` (None for deterministic mode).
    """
    protos = bank.sampled(eta)
    zn = ad.l2_normalize_rows(Tensor(new_z))
    logits_new = ad.matmul(zn, ad.transpose(protos[new_positions]))
    total = ad.cross_entropy(logits_new, new_targets)
    if lambda_old > 0 and len(old_positions):
        qn = ad.l2_normalize_rows(Tensor(old_queries))
        logits_old = ad.matmul(qn, ad.transpose(protos))
        total = ad.add(total,
                       ad.mul(Tensor(lambda_old), ad.cross_entropy(logits_old, old_positions)))
    return total


# ---------------------------------------------------------------------------
# training loops
# ---------------------------------------------------------------------------

@dataclass
class BaseTrainResult:
    records: list
    history: dict = field(default_factory=dict)


def _eval_embeddings(estimator, embedder, spectra: np.ndarray,
                     canonicalize_on: bool, chunk: int = 128) -> np.ndarray:
    """Deterministic eval-mode embeddings of a stack of spectrograms."""
    est_training = getattr(estimator, "training", False)
    emb_training = embedder.training
    if hasattr(estimator, "eval"):
        estimator.eval()
    embedder.eval()
    try:
        outs = []
        with ad.no_grad():
            for i in range(0, len(spectra), chunk):
                x = Tensor(spectra[i:i + chunk])
                z, _ = embed_pipeline(estimator, embedder, x, canonicalize_on)
                outs.append(z.data)
    finally:
        if hasattr(estimator, "train"):
            estimator.train(est_training)
        embedder.train(emb_training)
    return np.concatenate(outs) if outs else np.zeros((0, embedder.cfg.embed_dim))


def _class_means(z: np.ndarray, labels: np.ndarray, class_ids) -> dict:
    return {c: z[labels == c].mean(axis=0) for c in class_ids}


def _check_finite(value: float, what: str):
    if not np.isfinite(value):
        raise TrainingDiverged(f"{what} became non-finite")


def train_base(spectra: np.ndarray, labels: np.ndarray, estimator, embedder: Embedder,
               pretrain: TrainSchedule, full: TrainSchedule, weights: LossWeights,
               bounds: ContextBounds, umap: UncertaintyMap, seed: int,
               canonicalize_on: bool = True, consistency_on: bool = True) -> BaseTrainResult:
    """Two-stage base-session training; deterministic in the seed.

    Stage 1 minimizes CE with a plain linear head; stage 2 switches to a
    cosine-prototype classifier (initialized from class means) and adds
    the consistency and regularization terms. Afterwards base class
    records are rebuilt from the final class-mean embeddings.
    """
    if len(spectra) == 0:
        raise ValueError("base split is empty")
    class_ids = sorted(int(c) for c in np.unique(labels))
    local = {c: i for i, c in enumerate(class_ids)}
    local_labels = np.array([local[int(c)] for c in labels])
    rng = np.random.default_rng([seed, 3])
    init_rng = np.random.default_rng([seed, 31])
    history = {"pretrain": [], "full_base": []}

    trainable = list(embedder.parameters())
    if canonicalize_on:
        trainable += list(estimator.parameters())

    def run_stage(stage_name, classifier, schedule, stage_weights, consistency):
        opt = SGD(trainable + list(classifier.parameters()), momentum=schedule.momentum)
        n = len(spectra)
        for epoch in range(schedule.epochs):
            lr = schedule.lr_at(epoch)
            perm = rng.permutation(n)
            epoch_loss = 0.0
            steps = 0
            for start in range(0, n, schedule.batch_size):
                idx = perm[start:start + schedule.batch_size]
                if len(idx) < 2:
                    continue  # batch statistics need at least two samples
                loss, parts = loss_base(spectra[idx], local_labels[idx], estimator,
                                        embedder, classifier, stage_weights, bounds,
                                        rng, canonicalize_on=canonicalize_on,
                                        consistency_on=consistency)
                _check_finite(parts["total"], f"{stage_name} loss")
                opt.zero_grad()
                loss.backward()
                opt.step(lr)
                epoch_loss += parts["total"]
                steps += 1
            history[stage_name].append(epoch_loss / max(steps, 1))

    # stage 1: CE only, plain linear softmax head (discarded afterwards)
    pre_weights = LossWeights(lambda_cat=0.0, lambda_reg=0.0,
                              lambda_old=weights.lambda_old,
                              pseudo_per_sample=weights.pseudo_per_sample)
    head = PretrainHead(embedder.cfg.embed_dim, len(class_ids), init_rng)
    run_stage("pretrain", head, pretrain, pre_weights, consistency=False)

    # stage 2: cosine classifier seeded from class means, full objective
    z = _eval_embeddings(estimator, embedder, spectra, canonicalize_on)
    means = _class_means(z, labels, class_ids)
    cosine = CosineClassifier(np.stack([means[c] for c in class_ids]))
    run_stage("full_base", cosine, full, weights, consistency_on)

    z = _eval_embeddings(estimator, embedder, spectra, canonicalize_on)
    means = _class_means(z, labels, class_ids)
    records = [ClassRecord(class_id=c, session=0, mu_raw=means[c].copy(),
                           mu_cal=means[c].copy(), var_cal=umap.beta)
               for c in class_ids]
    return BaseTrainResult(records=records, history=history)


def train_incremental(support_spectra: np.ndarray, support_labels: np.ndarray,
                      session: int, estimator, embedder: Embedder,
                      records: list, schedule: TrainSchedule, weights: LossWeights,
                      umap: UncertaintyMap, bounds: ContextBounds, n_ucpc: int,
                      seed: int, canonicalize_on: bool = True,
                      calibration_on: bool = True,
                      anchor_lookup=None) -> dict:
    """One incremental session: calibrate new prototypes, then optimize
    all calibrated centers and variances with the incremental loss.

    The estimator and embedder are frozen. ``anchor_lookup`` maps a
    support row index to the pseudo-context anchor spectrogram; by
    default the canonicalized observation is used. Returns a history
    dict; ``records`` is extended and updated in place.
    """
    new_ids = sorted(int(c) for c in np.unique(support_labels))
    old_ids = {r.class_id for r in records}
    overlap = old_ids.intersection(new_ids)
    if overlap:
        raise ValueError(f"session classes overlap previously learned ones: {sorted(overlap)}")

    rng = np.random.default_rng([seed, 4, session])
    z = _eval_embeddings(estimator, embedder, support_spectra, canonicalize_on)

    from .nets import canonicalize as canon_one
    new_records = []
    prior = prior_stats(records) if calibration_on else None
    for c in new_ids:
        rows = np.nonzero(support_labels == c)[0]
        mu_raw = z[rows].mean(axis=0)
        if calibration_on:
            us = []
            for i in rows:
                anchor = (anchor_lookup(i) if anchor_lookup is not None
                          else canon_one(estimator, support_spectra[i]))
                us.append(sample_uncertainty(estimator, anchor, support_spectra[i],
                                             n_ucpc, bounds, rng))
            u_cls = class_uncertainty(us)
            mu_cal, var_cal, _ = shrink(mu_raw, prior, umap.variance(u_cls))
        else:
            u_cls, mu_cal, var_cal = 0.0, mu_raw.copy(), umap.beta
        new_records.append(ClassRecord(class_id=c, session=session, mu_raw=mu_raw,
                                       mu_cal=mu_cal, var_cal=var_cal,
                                       uncertainty=u_cls))

    old_records = list(records)
    records.extend(new_records)
    history = {"incremental": []}
    if not calibration_on or schedule.epochs == 0:
        return history

    bank = PrototypeBank(np.stack([r.mu_cal for r in records]),
                         np.array([r.var_cal for r in records]))
    pos_of = {r.class_id: i for i, r in enumerate(records)}
    new_positions = np.array([pos_of[c] for c in new_ids])
    new_targets = np.array([new_ids.index(int(c)) for c in support_labels])
    old_queries = np.stack([r.mu_raw for r in old_records]) if old_records else np.zeros((0, z.shape[1]))
    old_positions = np.array([pos_of[r.class_id] for r in old_records], dtype=np.int64)

    opt = SGD(bank.parameters(), momentum=schedule.momentum)
    for epoch in range(schedule.epochs):
        eta = rng.standard_normal(bank.centers.shape)
        loss = loss_incremental(bank, z, new_positions, new_targets, old_queries,
                                old_positions, weights.lambda_old, eta)
        _check_finite(loss.item(), "incremental loss")
        opt.zero_grad()
        loss.backward()
        opt.step(schedule.lr_at(epoch))
        history["incremental"].append(loss.item())

    variances = bank.variances()
    for i, rec in enumerate(records):
        rec.mu_cal = bank.centers.data[i].copy()
        rec.var_cal = float(variances[i])
    return history
