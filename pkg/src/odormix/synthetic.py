"""Planted-rule synthetic data for end-to-end checks.

Molecules are random SMILES-like strings. Each single-molecule label is a
thresholded linear function of the toy features. Pair labels are the OR of
the components' labels, except for interaction labels:

* agonism: present only when one component satisfies hidden rule A and the
  other hidden rule B;
* antagonism: a component's label survives only if the partner does not
  satisfy a hidden suppressor rule C.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import LoadResult, RawRecord
from .embedder import ToyFeaturizer
from .trainer import TeacherTable, write_teacher_file

_ATOMS = ["C"] * 6 + ["N", "O", "O", "S"]
_TERMINAL = ["F", "Cl", "Br", "O", "N"]


@dataclass
class SyntheticConfig:
    n_molecules: int = 2000
    n_pairs: int = 8000
    n_labels: int = 20
    n_agonism: int = 2
    n_antagonism: int = 2
    n_pair_labels: int = 14
    drop_rate: float = 0.0
    prevalence: tuple[float, float] = (0.1, 0.3)
    hidden_prevalence: float = 0.35
    trigram_weight: float = 0.3
    teacher_sharpness: float = 4.0
    n_buckets: int = 512
    seed: int = 0

    @property
    def n_interaction(self) -> int:
        return self.n_agonism + self.n_antagonism


@dataclass
class SyntheticData:
    config: SyntheticConfig
    molecules: list[str]
    label_names: list[str]
    single_labels: np.ndarray
    pairs: np.ndarray
    pair_labels_clean: np.ndarray
    pair_labels: np.ndarray
    pair_label_idx: np.ndarray
    interaction_idx: np.ndarray
    teacher: TeacherTable
    extra: dict = field(default_factory=dict)

    @property
    def interaction_names(self) -> list[str]:
        return [self.label_names[i] for i in self.interaction_idx]

    def singles_result(self) -> LoadResult:
        recs = [RawRecord(i + 2, (m,), self.single_labels[i].astype(np.int8)) for i, m in enumerate(self.molecules)]
        return LoadResult(list(self.label_names), recs, [])

    def pairs_result(self) -> LoadResult:
        names = [self.label_names[i] for i in self.pair_label_idx]
        recs = [
            RawRecord(i + 2, (self.molecules[a], self.molecules[b]), self.pair_labels[i].astype(np.int8))
            for i, (a, b) in enumerate(self.pairs)
        ]
        return LoadResult(names, recs, [])

    def write(self, out_dir: str | Path) -> dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {"singles": out / "singles.csv", "pairs": out / "pairs.csv", "teacher": out / "teacher.tsv"}
        with open(paths["singles"], "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["smiles"] + self.label_names)
            for m, y in zip(self.molecules, self.single_labels):
                w.writerow([m] + [int(v) for v in y])
        with open(paths["pairs"], "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["smiles_a", "smiles_b"] + [self.label_names[i] for i in self.pair_label_idx])
            for (a, b), y in zip(self.pairs, self.pair_labels):
                w.writerow([self.molecules[a], self.molecules[b]] + [int(v) for v in y])
        write_teacher_file(paths["teacher"], self.teacher)
        return paths


def random_smiles(rng: np.random.Generator, min_atoms: int = 4, max_atoms: int = 14) -> str:
    n = int(rng.integers(min_atoms, max_atoms + 1))
    parts: list[str] = []
    ring = 1
    for i in range(n):
        r = rng.random()
        if i > 0 and r < 0.12 and ring < 9:
            sub = "" if rng.random() < 0.5 else f"({rng.choice(_TERMINAL)})"
            parts.append(f"c{ring}ccc{sub}cc{ring}")
            ring += 1
            continue
        bond = "=" if i > 0 and parts[-1] in ("C", "N") and rng.random() < 0.1 else ""
        parts.append(bond + str(rng.choice(_ATOMS)))
        if r > 0.8 and i < n - 1:
            parts.append(f"({rng.choice(_TERMINAL)})")
    if rng.random() < 0.3:
        parts.append(str(rng.choice(_TERMINAL)))
    return "".join(parts)


def _rule_scores(rng: np.random.Generator, feats: np.ndarray, n_vocab: int, n_rules: int, trigram_weight: float) -> np.ndarray:
    dim = feats.shape[1]
    w = rng.standard_normal((n_rules, dim))
    w[:, n_vocab:] *= trigram_weight
    return feats @ w.T


def _threshold(scores: np.ndarray, prevalence: np.ndarray) -> np.ndarray:
    return np.array([np.quantile(scores[:, c], 1.0 - prevalence[c]) for c in range(scores.shape[1])])


def generate(cfg: SyntheticConfig | None = None) -> SyntheticData:
    cfg = cfg or SyntheticConfig()
    if cfg.n_interaction > cfg.n_pair_labels or cfg.n_pair_labels > cfg.n_labels:
        raise ValueError("need n_interaction <= n_pair_labels <= n_labels")
    rng = np.random.default_rng(cfg.seed)

    seen: dict[str, None] = {}
    while len(seen) < cfg.n_molecules:
        seen.setdefault(random_smiles(rng))
    molecules = list(seen)

    feat = ToyFeaturizer.from_corpus(molecules, cfg.n_buckets)
    F = np.array([feat.features(m) for m in molecules])
    n_vocab = len(feat.vocab)

    L = cfg.n_labels
    scores = _rule_scores(rng, F, n_vocab, L, cfg.trigram_weight)
    prevalence = rng.uniform(*cfg.prevalence, size=L)
    thr = _threshold(scores, prevalence)
    single = (scores > thr).astype(np.int8)
    spread = scores.std(axis=0)
    teacher_p = 1.0 / (1.0 + np.exp(-cfg.teacher_sharpness * (scores - thr) / spread))

    n_hidden = 2 * cfg.n_agonism + cfg.n_antagonism
    hidden_scores = _rule_scores(rng, F, n_vocab, n_hidden, cfg.trigram_weight)
    hidden = hidden_scores > _threshold(hidden_scores, np.full(n_hidden, cfg.hidden_prevalence))

    pairs = np.empty((cfg.n_pairs, 2), dtype=np.int64)
    used: set[tuple[int, int]] = set()
    i = 0
    while i < cfg.n_pairs:
        a, b = rng.choice(cfg.n_molecules, size=2, replace=False)
        key = (min(a, b), max(a, b))
        if key in used:
            continue
        used.add(key)
        pairs[i] = (a, b)
        i += 1

    a, b = pairs[:, 0], pairs[:, 1]
    clean = (single[a] | single[b]).astype(np.int8)
    # interaction labels sit at the end of the label axis
    interaction = np.arange(L - cfg.n_interaction, L)
    for j in range(cfg.n_agonism):
        A, B = hidden[:, 2 * j], hidden[:, 2 * j + 1]
        clean[:, interaction[j]] = (A[a] & B[b]) | (A[b] & B[a])
    for j in range(cfg.n_antagonism):
        c = interaction[cfg.n_agonism + j]
        C = hidden[:, 2 * cfg.n_agonism + j]
        clean[:, c] = (single[a, c].astype(bool) & ~C[b]) | (single[b, c].astype(bool) & ~C[a])

    n_plain = cfg.n_pair_labels - cfg.n_interaction
    plain = np.sort(rng.choice(L - cfg.n_interaction, size=n_plain, replace=False))
    pair_idx = np.concatenate([plain, interaction])
    observed = clean[:, pair_idx].copy()
    if cfg.drop_rate > 0:
        keep = rng.random(observed.shape) >= cfg.drop_rate
        observed = (observed.astype(bool) & keep).astype(np.int8)

    names = [f"note {c:02d}" for c in range(L)]
    teacher = TeacherTable(list(names), {m: teacher_p[i] for i, m in enumerate(molecules)})
    return SyntheticData(
        cfg, molecules, names, single, pairs, clean, observed, pair_idx, interaction, teacher,
        {"prevalence": prevalence},
    )
