"""Session construction and the cumulative evaluation metrics.

A protocol run starts from a base session holding most classes and adds
S incremental sessions of N novel classes with K support shots each.
Test splits are carved per class once, up front, by the protocol seed
and stay fixed; accuracy after session l is measured over every class
seen so far. The summary metrics are the session-average accuracy, the
base-to-final drop, and the average relative drop between sessions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .calibration import classify


@dataclass(frozen=True)
class ProtocolSpec:
    ways: int = 5
    shots: int = 5
    sessions: int = 4
    base_class_count: int | None = None   # None: all classes not used by sessions
    test_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if min(self.ways, self.shots) < 1 or self.sessions < 0:
            raise ValueError("ways/shots must be >= 1 and sessions >= 0")
        if not (0 < self.test_fraction < 1):
            raise ValueError("test_fraction must be in (0, 1)")

    def resolve_base_count(self, total_classes: int) -> int:
        need = self.ways * self.sessions
        base = self.base_class_count
        if base is None:
            base = total_classes - need
        if base < 1:
            raise ValueError(f"not enough classes: {total_classes} total, "
                             f"{need} consumed by incremental sessions")
        if base + need > total_classes:
            raise ValueError(f"protocol needs {base + need} classes, "
                             f"dataset has {total_classes}")
        return base


@dataclass
class SessionLedger:
    """Class assignments, fixed splits, and per-session results."""

    session_classes: list            # [ [class ids of session 0], [session 1], ... ]
    support_indices: dict            # class id -> sample rows used as support
    test_indices: dict               # class id -> held-out sample rows
    accuracies: list = field(default_factory=list)

    @property
    def n_sessions(self) -> int:
        return len(self.session_classes) - 1

    def classes_up_to(self, session: int) -> list:
        out = []
        for cls in self.session_classes[:session + 1]:
            out.extend(cls)
        return out


def build_sessions(labels: np.ndarray, spec: ProtocolSpec) -> SessionLedger:
    """Seeded assignment of classes to sessions and per-class splits.

    Novel classes keep exactly ``shots`` support samples; base classes
    use all non-test samples. Raises with the concrete deficit when the
    dataset cannot fill the protocol.
    """
    classes = sorted(int(c) for c in np.unique(labels))
    base_count = spec.resolve_base_count(len(classes))
    rng = np.random.default_rng([spec.seed, 0])
    order = [classes[i] for i in rng.permutation(len(classes))]
    session_classes = [sorted(order[:base_count])]
    cursor = base_count
    for _ in range(spec.sessions):
        session_classes.append(sorted(order[cursor:cursor + spec.ways]))
        cursor += spec.ways

    support, test = {}, {}
    for session, cls_list in enumerate(session_classes):
        for c in cls_list:
            rows = np.nonzero(labels == c)[0]
            n_test = max(1, int(round(spec.test_fraction * len(rows))))
            need = n_test + (spec.shots if session > 0 else 1)
            if len(rows) < need:
                raise ValueError(f"class {c} has {len(rows)} samples but the "
                                 f"protocol needs at least {need}")
            perm = rows[rng.permutation(len(rows))]
            test[c] = np.sort(perm[:n_test])
            rest = perm[n_test:]
            support[c] = np.sort(rest[:spec.shots] if session > 0 else rest)
    return SessionLedger(session_classes=session_classes,
                         support_indices=support, test_indices=test)


def evaluate(records: list, ledger: SessionLedger, session: int,
             embeddings_for) -> float:
    """Deterministic accuracy over the cumulative test set after ``session``.

    ``embeddings_for`` maps an array of sample rows to their embeddings.
    """
    classes = ledger.classes_up_to(session)
    have = {r.class_id for r in records}
    missing = [c for c in classes if c not in have]
    if missing:
        raise ValueError(f"no class record for {missing}")
    rows = np.concatenate([ledger.test_indices[c] for c in classes])
    truth = np.concatenate([[c] * len(ledger.test_indices[c]) for c in classes])
    z = embeddings_for(rows)
    correct = 0
    for zi, yi in zip(z, truth):
        label, _ = classify(zi, records, stochastic=False)
        correct += int(label == yi)
    return correct / len(truth)


@dataclass(frozen=True)
class MetricSummary:
    average_accuracy: float
    performance_drop: float
    average_drop_rate: float | None

    def as_row(self):
        adr = "" if self.average_drop_rate is None else repr(self.average_drop_rate)
        return (repr(self.average_accuracy), repr(self.performance_drop), adr)


def metrics(accuracies) -> MetricSummary:
    """Summary metrics over the ordered per-session accuracies.

    The relative-drop average is normalized by the total session count
    S + 1, which is what reproduces published aggregate tables, and is
    expressed on the same scale as the inputs (percent for percent
    inputs). It is undefined (None) when any accuracy is zero.
    """
    acc = [float(a) for a in accuracies]
    if len(acc) < 2:
        raise ValueError("need accuracies for at least two sessions")
    aa = sum(acc) / len(acc)
    pd = acc[0] - acc[-1]
    if any(a == 0 for a in acc):
        return MetricSummary(aa, pd, None)
    drops = [(acc[i] - acc[i + 1]) / acc[i] for i in range(len(acc) - 1)]
    scale = 100.0 if max(acc) > 1.0 else 1.0
    return MetricSummary(aa, pd, scale * sum(drops) / len(acc))
