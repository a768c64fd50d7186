"""Class-distribution-aware pseudo-labeling.

Per-class positive rates come from a densely labeled source. On the set
being pseudo-labeled, each class then gets the cutoff that marks the same
fraction of predictions positive.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .dataset import PSEUDO, Sample, label_density, with_labels

P78, P152 = "p78", "p152"
MODES = (P78, P152)


class EmptyDataset(ValueError):
    pass


class EmptyPredictions(ValueError):
    pass


class IndexSetMismatch(ValueError):
    pass


@dataclass
class ClassRates:
    gamma: np.ndarray
    n: int


@dataclass
class Thresholds:
    tau: np.ndarray
    k: np.ndarray

    def select(self, preds: np.ndarray) -> np.ndarray:
        return np.asarray(preds) >= self.tau


def class_rates(labels: np.ndarray) -> ClassRates:
    labels = np.asarray(labels)
    if labels.ndim != 2 or labels.shape[0] == 0:
        raise EmptyDataset("class rates need at least one labeled sample")
    n = labels.shape[0]
    return ClassRates((labels == 1).sum(axis=0) / n, n)


def target_count(gamma: float, m: int) -> int:
    """``round(gamma * m)`` with halves rounded up."""
    return int(math.floor(gamma * m + 0.5))


def fit_thresholds(preds: np.ndarray, rates: ClassRates) -> Thresholds:
    """Per class, the k-th largest prediction where ``k = round(gamma * m)``.

    ``k = 0`` yields ``+inf`` (nothing selected). Entries tied with the
    cutoff are all selected, so the selected count can exceed ``k``.
    """
    preds = np.asarray(preds, dtype=np.float64)
    if preds.ndim != 2 or preds.shape[0] == 0:
        raise EmptyPredictions("threshold fitting needs at least one prediction row")
    m, L = preds.shape
    if rates.gamma.shape != (L,):
        raise IndexSetMismatch(f"{rates.gamma.shape[0]} rates for {L} prediction columns")
    ks = np.array([target_count(g, m) for g in rates.gamma], dtype=np.int64)
    ordered = -np.sort(-preds, axis=0)
    tau = np.full(L, np.inf)
    has = ks > 0
    tau[has] = ordered[ks[has] - 1, np.flatnonzero(has)]
    return Thresholds(tau, ks)


def tie_mass(preds: np.ndarray, th: Thresholds) -> np.ndarray:
    """Per class, the selected fraction beyond ``k / m`` caused by ties."""
    m = preds.shape[0]
    return (th.select(preds).sum(axis=0) - th.k) / m


def augment_arrays(
    labels: np.ndarray,
    provenance: np.ndarray,
    preds: np.ndarray,
    th: Thresholds,
    mode: str,
    missing: Sequence[int] | np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Return new ``(labels, provenance)`` for one source.

    ``p78`` overwrites only the ``missing`` columns. ``p152`` does the same
    and additionally ORs pseudo-positives into the annotated columns.
    """
    labels = np.asarray(labels)
    n, L = labels.shape
    if preds.shape != (n, L):
        raise IndexSetMismatch(f"predictions {preds.shape} do not align with labels {(n, L)}")
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    missing = np.asarray(missing, dtype=np.int64)
    if missing.size and (missing.min() < 0 or missing.max() >= L or np.unique(missing).size != missing.size):
        raise IndexSetMismatch("missing-label index set is out of range or repeats")
    pseudo = th.select(preds).astype(labels.dtype)
    new_labels = labels.copy()
    new_prov = np.array(provenance, dtype=object, copy=True)
    new_labels[:, missing] = pseudo[:, missing]
    new_prov[:, missing] = PSEUDO
    if mode == P152:
        gained = (pseudo == 1) & (new_labels == 0)
        new_labels[gained] = 1
        new_prov[gained] = PSEUDO
    return new_labels, new_prov


def augment(samples: Sequence[Sample], preds: np.ndarray, th: Thresholds, mode: str,
            missing: Sequence[int] | np.ndarray) -> list[Sample]:
    if not samples:
        return []
    labels = np.array([s.labels for s in samples])
    prov = np.array([s.provenance for s in samples], dtype=object)
    new_labels, new_prov = augment_arrays(labels, prov, np.asarray(preds), th, mode, missing)
    return [with_labels(s, nl, npv) for s, nl, npv in zip(samples, new_labels, new_prov)]


def density_report(samples: Sequence[Sample]) -> dict[str, float]:
    """Mean positives per sample for each source that has samples."""
    return label_density(samples)


def missing_index_set(known_mask: np.ndarray) -> np.ndarray:
    """Columns a source does not annotate (its zero-padded labels)."""
    return np.flatnonzero(~np.asarray(known_mask, dtype=bool))

