"""Training losses: BCE, multi-label logit distillation, and the balanced
single/pair objective.

All functions take autodiff tensors (plain arrays are wrapped) and return
tensors so the trainer can backpropagate through them.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numerics as nx
from .numerics import Tensor

EPS = 1e-7


class MissingTeacher(ValueError):
    pass


@dataclass
class LossConfig:
    alpha: float = 0.5
    kd_enabled: bool = True
    kd_label_subset: Sequence[int] = field(default_factory=list)
    temperature: float = 1.0
    kd_mode: str = "bernoulli"

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.kd_mode not in ("bernoulli", "softmax"):
            raise ValueError(f"unknown kd_mode {self.kd_mode!r}")

    def check_subset(self, n_labels: int) -> None:
        bad = [i for i in self.kd_label_subset if not 0 <= i < n_labels]
        if bad:
            raise ValueError(f"kd_label_subset indices out of range: {bad[:5]}")


def _clamp(p) -> Tensor:
    return nx.clip(nx.as_tensor(p), EPS, 1.0 - EPS)


def bce_terms(y, p, mask: np.ndarray | None = None) -> Tensor:
    """Per-sample BCE, averaged over the last (label) axis.

    With ``mask``, only True entries count toward each row's mean.
    """
    y = np.asarray(y, dtype=np.float64)
    p = _clamp(p)
    ll = nx.log(p) * y + nx.log(1.0 - p) * (1.0 - y)
    if mask is None:
        return -nx.mean(ll, axis=-1)
    w = np.asarray(mask, dtype=np.float64)
    w = w / np.maximum(w.sum(axis=-1, keepdims=True), 1.0)
    return -nx.tsum(ll * w, axis=-1)


def bce(y, p) -> Tensor:
    return nx.mean(bce_terms(y, p))


def mld_terms(p_teacher, p_student) -> Tensor:
    """Per-sample mean over labels of the Bernoulli KL(teacher || student).

    ``p log(p/q) + (1-p) log((1-p)/(1-q))`` carries both the positive and
    the complement KL terms in one expression.
    """
    pt = np.clip(np.asarray(p_teacher, dtype=np.float64), EPS, 1.0 - EPS)
    ps = _clamp(p_student)
    const = pt * np.log(pt) + (1.0 - pt) * np.log(1.0 - pt)
    cross = nx.log(ps) * pt + nx.log(1.0 - ps) * (1.0 - pt)
    return nx.mean(const - cross, axis=-1)


def mld(p_teacher, p_student) -> Tensor:
    return nx.mean(mld_terms(p_teacher, p_student))


def mld_softmax_terms(teacher_probs, student_logits, temperature: float = 1.0) -> Tensor:
    """Alternative reading: softmax over the label axis for both models."""
    pt = np.clip(np.asarray(teacher_probs, dtype=np.float64), EPS, 1.0 - EPS)
    t_logits = np.log(pt) - np.log1p(-pt)
    t = t_logits / temperature
    t = np.exp(t - t.max(axis=-1, keepdims=True))
    PT = np.clip(t / t.sum(axis=-1, keepdims=True), EPS, 1.0 - EPS)
    PS = _clamp(nx.softmax_rows(nx.as_tensor(student_logits) * (1.0 / temperature)))
    const = (PT * np.log(PT) + (1.0 - PT) * np.log(1.0 - PT)).sum(axis=-1)
    cross = nx.tsum(nx.log(PS) * PT + nx.log(1.0 - PS) * (1.0 - PT), axis=-1)
    return const - cross


@dataclass
class LossBreakdown:
    total: Tensor
    single_bce: float
    single_mld: float
    pair_bce: float
    n_single: int
    n_pair: int


def _row_mean(x: Tensor, rows: np.ndarray) -> Tensor:
    w = rows / rows.sum()
    return nx.tsum(x * w)


def total_loss(
    logits: Tensor,
    probs: Tensor,
    labels: np.ndarray,
    is_single: np.ndarray,
    cfg: LossConfig,
    teacher: np.ndarray | None = None,
    has_teacher: np.ndarray | None = None,
    label_mask: np.ndarray | None = None,
) -> LossBreakdown:
    """``alpha * L_single + (1 - alpha) * L_pair`` over one batch.

    ``teacher`` rows align with the batch and cover ``cfg.kd_label_subset``.
    A source absent from the batch contributes 0 to its term.
    """
    is_single = np.asarray(is_single, dtype=bool)
    is_pair = ~is_single
    per_bce = bce_terms(labels, probs, label_mask)
    zero = nx.Tensor(0.0)

    single_bce = single_mld = zero
    if is_single.any():
        single_bce = _row_mean(per_bce, is_single)
        if cfg.kd_enabled:
            if teacher is None or has_teacher is None or not np.all(has_teacher[is_single]):
                raise MissingTeacher("knowledge distillation is on but a single-molecule sample has no teacher row")
            sub = np.asarray(cfg.kd_label_subset, dtype=np.int64)
            t_rows = np.where(is_single[:, None], teacher, 0.5)
            if cfg.kd_mode == "bernoulli":
                s_logits = nx.take(logits, sub, axis=1)
                if cfg.temperature == 1.0:
                    s_probs = nx.take(probs, sub, axis=1)
                    t_probs = t_rows
                else:
                    s_probs = nx.sigmoid(s_logits * (1.0 / cfg.temperature))
                    t_probs = _sharpen(t_rows, cfg.temperature)
                per_mld = mld_terms(t_probs, s_probs)
            else:
                per_mld = mld_softmax_terms(t_rows, nx.take(logits, sub, axis=1), cfg.temperature)
            single_mld = _row_mean(per_mld, is_single)
    pair_bce = _row_mean(per_bce, is_pair) if is_pair.any() else zero

    l_single = single_bce + single_mld
    total = l_single * cfg.alpha + pair_bce * (1.0 - cfg.alpha)
    return LossBreakdown(
        total, float(single_bce.data), float(single_mld.data), float(pair_bce.data),
        int(is_single.sum()), int(is_pair.sum()),
    )


def _sharpen(p: np.ndarray, temperature: float) -> np.ndarray:
    p = np.clip(p, EPS, 1.0 - EPS)
    z = (np.log(p) - np.log1p(-p)) / temperature
    return 1.0 / (1.0 + np.exp(-z))
