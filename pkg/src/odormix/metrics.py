"""Macro-averaged AUROC over the combined benchmark and per-source slices."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .dataset import PAIRS, SINGLES, LabelSpace, Sample


class NoScorableClass(ValueError):
    pass


@dataclass(frozen=True)
class Skipped:
    reason: str


def auroc_binary(scores: np.ndarray, labels: np.ndarray) -> float | Skipped:
    """Mann-Whitney AUROC with average ranks for ties."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0:
        return Skipped("no positives")
    if n_neg == 0:
        return Skipped("no negatives")
    ranks = rankdata(scores, method="average")
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auroc_pairs_oracle(scores: np.ndarray, labels: np.ndarray) -> float | Skipped:
    """Quadratic reference: wins plus half ties over every positive/negative pair."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    pos, neg = scores[labels], scores[~labels]
    if pos.size == 0:
        return Skipped("no positives")
    if neg.size == 0:
        return Skipped("no negatives")
    wins = ties = 0
    for p in pos:
        for q in neg:
            if p > q:
                wins += 1
            elif p == q:
                ties += 1
    return float((wins + 0.5 * ties) / (pos.size * neg.size))


@dataclass
class MacroResult:
    mean: float
    per_class: list[tuple[int, float | Skipped]]

    @property
    def skipped(self) -> int:
        return sum(isinstance(v, Skipped) for _, v in self.per_class)


def auroc_macro(preds: np.ndarray, labels: np.ndarray, classes: Sequence[int] | np.ndarray | None = None) -> MacroResult:
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if preds.shape != labels.shape:
        raise ValueError(f"predictions {preds.shape} and labels {labels.shape} differ")
    classes = range(preds.shape[1]) if classes is None else np.asarray(classes, dtype=np.int64)
    per_class = [(int(c), auroc_binary(preds[:, c], labels[:, c])) for c in classes]
    scored = [v for _, v in per_class if not isinstance(v, Skipped)]
    if not scored:
        raise NoScorableClass("no class has both positives and negatives")
    return MacroResult(float(np.mean(scored)), per_class)


@dataclass
class EvalReport:
    auroc_combined: float | None
    auroc_singles: float | None
    auroc_pairs: float | None
    per_class: list[tuple[str, float | str]] = field(default_factory=list)
    skipped_class_count: int = 0
    n_samples: dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "auroc_combined": self.auroc_combined,
            "auroc_singles": self.auroc_singles,
            "auroc_pairs": self.auroc_pairs,
            "skipped_class_count": self.skipped_class_count,
            "n_samples": self.n_samples,
            "per_class": [{"label": n, "auroc": v if isinstance(v, float) else None,
                           "skipped": None if isinstance(v, float) else v} for n, v in self.per_class],
        }


def _slice(preds, labels, rows, classes) -> MacroResult | None:
    if not rows.any():
        return None
    try:
        return auroc_macro(preds[rows], labels[rows], classes)
    except NoScorableClass:
        return None


def evaluate_predictions(preds: np.ndarray, samples: Sequence[Sample], space: LabelSpace) -> EvalReport:
    """Combined (all rows, all labels), singles and pairs (own labels only)."""
    labels = np.array([s.labels for s in samples]).reshape(len(samples), len(space))
    sources = np.array([s.source for s in samples])
    everything = np.ones(len(samples), dtype=bool)
    combined = _slice(preds, labels, everything, None)
    singles = _slice(preds, labels, sources == SINGLES, np.flatnonzero(space.mask(SINGLES)))
    pairs = _slice(preds, labels, sources == PAIRS, np.flatnonzero(space.mask(PAIRS)))
    per_class = []
    if combined is not None:
        per_class = [(space.names[c], v if isinstance(v, float) else v.reason) for c, v in combined.per_class]
    return EvalReport(
        combined.mean if combined else None,
        singles.mean if singles else None,
        pairs.mean if pairs else None,
        per_class,
        combined.skipped if combined else 0,
        {SINGLES: int((sources == SINGLES).sum()), PAIRS: int((sources == PAIRS).sum())},
    )


def render_table(rows: Sequence[tuple[str, EvalReport]], singles_name: str = "Singles", pairs_name: str = "Pairs") -> str:
    def fmt(x):
        return "   -  " if x is None else f"{x:.3f}"

    header = f"{'Model':<16} {'Combined':>9} {singles_name:>9} {pairs_name:>9}"
    lines = [header, "-" * len(header)]
    for name, r in rows:
        lines.append(f"{name:<16} {fmt(r.auroc_combined):>9} {fmt(r.auroc_singles):>9} {fmt(r.auroc_pairs):>9}")
    return "\n".join(lines)
