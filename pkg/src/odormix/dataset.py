"""Single-molecule and pair datasets on one unified label axis.

CSV inputs:

* singles: ``smiles,<label1>,...,<labelN>``
* pairs:   ``smiles_a,smiles_b[,fold],<label1>,...``

Label values are 0/1. Each source only annotates its own descriptors; the
rest of the unified axis is zero-padded and marked ``padded``.
"""

from __future__ import annotations

import csv
import logging
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .smiles import ParseError, normalize

log = logging.getLogger(__name__)

SINGLES = "singles"
PAIRS = "pairs"
SOURCES = (SINGLES, PAIRS)

ORIG, PSEUDO, PADDED = "orig", "pseudo", "padded"


class DatasetError(ValueError):
    pass


class FormatError(DatasetError):
    def __init__(self, message: str, row: int | None = None):
        self.row = row
        super().__init__(f"row {row}: {message}" if row is not None else message)


class UnknownLabelName(DatasetError):
    pass


class TooFewSamples(DatasetError):
    pass


class FoldCountMismatch(DatasetError):
    pass


def normalize_label(name: str) -> str:
    return re.sub(r"\s+", " ", name.strip().lower())


@dataclass
class LabelSpace:
    names: list[str]
    source_masks: dict[str, np.ndarray]

    def __post_init__(self):
        self.index = {n: i for i, n in enumerate(self.names)}

    def __len__(self) -> int:
        return len(self.names)

    def mask(self, source: str) -> np.ndarray:
        return self.source_masks[source]

    def indices(self, names: Iterable[str]) -> np.ndarray:
        out = []
        for n in names:
            key = normalize_label(n)
            if key not in self.index:
                raise UnknownLabelName(f"label {n!r} is not in the label space")
            out.append(self.index[key])
        return np.array(out, dtype=np.int64)

    def to_dict(self) -> dict:
        return {
            "names": self.names,
            "sources": {s: [n for n, m in zip(self.names, mask) if m] for s, mask in self.source_masks.items()},
        }

    @classmethod
    def from_dict(cls, doc: dict) -> LabelSpace:
        names = list(doc["names"])
        idx = {n: i for i, n in enumerate(names)}
        masks = {}
        for s, members in doc["sources"].items():
            m = np.zeros(len(names), dtype=bool)
            m[[idx[n] for n in members]] = True
            masks[s] = m
        return cls(names, masks)


def unify(singles_labels: Sequence[str], pairs_labels: Sequence[str]) -> LabelSpace:
    """Union of both descriptor vocabularies, sorted, with per-source masks."""
    per_source = {}
    for source, labels in ((SINGLES, singles_labels), (PAIRS, pairs_labels)):
        norm = [normalize_label(n) for n in labels]
        if len(set(norm)) != len(norm):
            raise DatasetError(f"{source} labels contain duplicates after normalization")
        per_source[source] = set(norm)
    names = sorted(per_source[SINGLES] | per_source[PAIRS])
    masks = {s: np.array([n in per_source[s] for n in names], dtype=bool) for s in SOURCES}
    return LabelSpace(names, masks)


@dataclass
class RawRecord:
    row: int
    molecules: tuple[str, ...]
    labels: np.ndarray
    fold: int | None = None


@dataclass
class LoadResult:
    labels: list[str]
    records: list[RawRecord]
    rejects: list[tuple[int, str]]
    has_fold: bool = False


def load_csv(path: str | Path, schema: str) -> LoadResult:
    """Parse a singles or pairs CSV.

    Rows with bad SMILES or bad label values go to ``rejects``; a bad
    header raises :class:`FormatError`.
    """
    if schema not in SOURCES:
        raise ValueError(f"schema must be one of {SOURCES}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise FormatError("empty file (no header)", 1)
        header = [h.strip() for h in header]
        n_mol = 1 if schema == SINGLES else 2
        expected = ["smiles"] if schema == SINGLES else ["smiles_a", "smiles_b"]
        if [h.lower() for h in header[:n_mol]] != expected:
            raise FormatError(f"header must start with {','.join(expected)}", 1)
        has_fold = schema == PAIRS and len(header) > 2 and header[2].lower() == "fold"
        first_label = n_mol + int(has_fold)
        labels = header[first_label:]
        records, rejects = [], []
        for rowno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                rejects.append((rowno, f"expected {len(header)} columns, got {len(row)}"))
                continue
            try:
                mols = tuple(normalize(c).text for c in row[:n_mol])
            except ParseError as exc:
                rejects.append((rowno, f"{type(exc).__name__}: {exc}"))
                continue
            if any(not m for m in mols):
                rejects.append((rowno, "empty SMILES"))
                continue
            values = [c.strip() for c in row[first_label:]]
            if any(v not in ("0", "1") for v in values):
                rejects.append((rowno, "label values must be 0 or 1"))
                continue
            fold = None
            if has_fold:
                try:
                    fold = int(row[n_mol])
                except ValueError:
                    rejects.append((rowno, f"bad fold value {row[n_mol]!r}"))
                    continue
            records.append(RawRecord(rowno, mols, np.array([int(v) for v in values], dtype=np.int8), fold))
    return LoadResult(labels, records, rejects, has_fold)


@dataclass
class Sample:
    id: str
    molecules: tuple[str, ...]
    labels: np.ndarray
    known_mask: np.ndarray
    source: str
    provenance: np.ndarray
    fold: int | None = None

    def __post_init__(self):
        expected = 1 if self.source == SINGLES else 2
        if len(self.molecules) != expected:
            raise DatasetError(f"{self.source} sample {self.id} needs {expected} molecule(s)")

    @property
    def n_positive(self) -> int:
        return int(self.labels.sum())


def pad_to(space: LabelSpace, record: RawRecord, source_labels: Sequence[str], source: str, sample_id: str) -> Sample:
    idx = space.indices(source_labels)
    L = len(space)
    labels = np.zeros(L, dtype=np.int8)
    labels[idx] = record.labels
    known = np.zeros(L, dtype=bool)
    known[idx] = True
    prov = np.where(known, ORIG, PADDED).astype(object)
    return Sample(sample_id, record.molecules, labels, known, source, prov, record.fold)


def _mixture_key(mols: tuple[str, ...]) -> tuple[str, ...]:
    return tuple(sorted(mols))


@dataclass
class Dataset:
    space: LabelSpace
    samples: list[Sample]
    report: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.samples)

    def by_source(self, source: str) -> list[Sample]:
        return [s for s in self.samples if s.source == source]

    def label_matrix(self, samples: Sequence[Sample] | None = None) -> np.ndarray:
        samples = self.samples if samples is None else samples
        return np.array([s.labels for s in samples], dtype=np.int8).reshape(len(samples), len(self.space))

    def subset(self, ids: Iterable[str]) -> list[Sample]:
        lookup = {s.id: s for s in self.samples}
        return [lookup[i] for i in ids]

    def molecules(self) -> list[str]:
        return sorted({m for s in self.samples for m in s.molecules})


def build_dataset(singles: LoadResult | None, pairs: LoadResult | None) -> Dataset:
    """Unify label spaces, zero-pad, and drop duplicate mixtures (first wins)."""
    s_labels = singles.labels if singles else []
    p_labels = pairs.labels if pairs else []
    space = unify(s_labels, p_labels)
    samples: list[Sample] = []
    report = {"duplicates": {SINGLES: 0, PAIRS: 0}, "rejects": {SINGLES: 0, PAIRS: 0}}
    for source, loaded, prefix in ((SINGLES, singles, "s"), (PAIRS, pairs, "p")):
        if loaded is None:
            continue
        report["rejects"][source] = len(loaded.rejects)
        seen = set()
        for rec in loaded.records:
            key = _mixture_key(rec.molecules)
            if key in seen:
                report["duplicates"][source] += 1
                continue
            seen.add(key)
            samples.append(pad_to(space, rec, loaded.labels, source, f"{prefix}{len(seen) - 1}"))
    if pairs is None or not pairs.records:
        log.warning("no pair samples; dataset holds singles only")
    return Dataset(space, samples, report)


# ---------------------------------------------------------------------------
# unified CSV (prepared data and pseudo-labeled datasets)

_BASE_COLS = ["id", "source", "smiles_a", "smiles_b"]


def write_samples_csv(path: str | Path, space: LabelSpace, samples: Sequence[Sample]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(_BASE_COLS + space.names + [f"prov:{n}" for n in space.names])
        for s in samples:
            b = s.molecules[1] if len(s.molecules) > 1 else ""
            w.writerow([s.id, s.source, s.molecules[0], b] + [int(v) for v in s.labels] + list(s.provenance))


def read_samples_csv(path: str | Path, space: LabelSpace) -> list[Sample]:
    L = len(space)
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        r = csv.reader(fh)
        header = next(r)
        if header[:4] != _BASE_COLS or header[4 : 4 + L] != space.names:
            raise FormatError("samples CSV header does not match the label space", 1)
        for rowno, row in enumerate(r, start=2):
            if len(row) != 4 + 2 * L:
                raise FormatError(f"expected {4 + 2 * L} columns", rowno)
            sid, source, a, b = row[:4]
            mols = (a,) if source == SINGLES else (a, b)
            labels = np.array([int(v) for v in row[4 : 4 + L]], dtype=np.int8)
            prov = np.array(row[4 + L :], dtype=object)
            out.append(Sample(sid, mols, labels, prov != PADDED, source, prov))
    return out


# ---------------------------------------------------------------------------
# folds


@dataclass
class FoldPlan:
    k: int
    folds: dict[str, int]

    def rotation(self, r: int) -> dict[str, list[str]]:
        """Fold ``r`` is test, ``r + 1`` validation, the rest train."""
        test, val = r % self.k, (r + 1) % self.k
        roles: dict[str, list[str]] = {"train": [], "val": [], "test": []}
        for sid, f in self.folds.items():
            roles["test" if f == test else "val" if f == val else "train"].append(sid)
        return roles

    def to_rows(self) -> list[tuple[str, int]]:
        return list(self.folds.items())


def iterative_stratification(Y: np.ndarray, k: int, seed: int = 0, restarts: int = 8) -> np.ndarray:
    """Multi-label stratified fold assignment, rarest label first.

    Each sample carrying the current label goes to the fold with the largest
    remaining demand for that label; ties go to the fold with the largest
    remaining overall demand, then to a seeded draw. A local search then
    moves and swaps samples until every label's per-fold counts differ by at
    most one. When that fails, the greedy pass is rerun with fresh seeded
    orders and the most balanced result is kept.
    """
    Y = np.asarray(Y, dtype=bool)
    n, L = Y.shape
    if k < 2:
        raise ValueError("k must be at least 2")
    if n < k:
        raise TooFewSamples(f"{n} samples cannot fill {k} folds")
    best, best_key = None, None
    for attempt in range(restarts):
        rng = np.random.default_rng([seed, attempt] if attempt else seed)
        fold = _repair_spread(Y, _greedy_assign(Y, k, rng), k, rng)
        key = _balance_key(Y, fold, k)
        if best_key is None or key < best_key:
            best, best_key = fold, key
        if key[0] <= 1:
            break
    return best


def _balance_key(Y: np.ndarray, fold: np.ndarray, k: int) -> tuple[int, int]:
    counts = np.stack([Y[fold == f].sum(axis=0) for f in range(k)])
    spread = counts.max(axis=0) - counts.min(axis=0) if Y.shape[1] else np.zeros(1, dtype=np.int64)
    sizes = np.bincount(fold, minlength=k)
    return int(spread.max()), int(sizes.max() - sizes.min())


def _greedy_assign(Y: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = Y.shape[0]
    order = rng.permutation(n)
    size_demand = np.full(k, n / k)
    label_demand = np.tile(Y.sum(axis=0) / k, (k, 1))
    fold = np.full(n, -1, dtype=np.int64)
    remaining = Y.sum(axis=0).astype(np.int64)

    def pick(candidates: np.ndarray) -> int:
        best = candidates[size_demand[candidates] == size_demand[candidates].max()]
        return int(best[0]) if best.size == 1 else int(rng.choice(best))

    while True:
        live = np.flatnonzero(remaining > 0)
        if live.size == 0:
            break
        lab = live[np.argmin(remaining[live])]
        for s in order[Y[order, lab] & (fold[order] < 0)]:
            d = label_demand[:, lab]
            f = pick(np.flatnonzero(d == d.max()))
            fold[s] = f
            label_demand[f] -= Y[s]
            size_demand[f] -= 1
            remaining -= Y[s]
    for s in order[fold[order] < 0]:
        f = pick(np.arange(k))
        fold[s] = f
        size_demand[f] -= 1
    return fold


def _excess(c: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    return np.maximum(lo - c, 0.0) + np.maximum(c - hi, 0.0)


def _repair_spread(Y: np.ndarray, fold: np.ndarray, k: int, rng: np.random.Generator,
                   max_steps: int = 20000, max_candidates: int = 48, noise: float = 0.1,
                   stall: int = 2000) -> np.ndarray:
    """Noisy local search towards every count inside ``[floor(t), ceil(t)]``.

    ``t`` is a label's (or the fold size's) per-fold target; all counts in
    that band is the same as a spread of at most one. Each step picks a
    random out-of-band cell and applies the best move or swap that touches
    it (a random one with probability ``noise``). Stops after ``stall``
    steps without a new best; the assignment with the least total excess is
    returned.
    """
    Yf = Y.astype(np.float64)
    n, L = Y.shape
    fold = fold.copy()
    target = Yf.sum(axis=0) / k
    lo, hi = np.floor(target), np.ceil(target)
    s_lo, s_hi = np.floor(n / k), np.ceil(n / k)
    counts = np.stack([Yf[fold == f].sum(axis=0) for f in range(k)])
    sizes = np.bincount(fold, minlength=k).astype(np.float64)

    def total() -> float:
        return float(_excess(counts, lo, hi).sum() + _excess(sizes, s_lo, s_hi).sum())

    def sample(idx: np.ndarray) -> np.ndarray:
        return idx if idx.size <= max_candidates else rng.choice(idx, max_candidates, replace=False)

    cur = total()
    best, best_v, best_step = fold.copy(), cur, 0
    for step in range(max_steps):
        if cur == 0.0 or step - best_step > stall:
            break
        cells = np.argwhere(_excess(counts, lo, hi) > 0)
        size_cells = np.flatnonzero(_excess(sizes, s_lo, s_hi) > 0)
        pick = int(rng.integers(len(cells) + len(size_cells)))
        if pick < len(cells):
            f, lab = (int(v) for v in cells[pick])
            over = counts[f, lab] > hi[lab]
            has = Y[:, lab]
        else:
            f, lab = int(size_cells[pick - len(cells)]), -1
            over = sizes[f] > s_hi
            has = np.ones(n, dtype=bool)

        base = _excess(counts, lo, hi)
        dec = _excess(counts - 1, lo, hi) - base
        inc = _excess(counts + 1, lo, hi) - base
        s_base = _excess(sizes, s_lo, s_hi)
        s_dec = _excess(sizes - 1, s_lo, s_hi) - s_base
        s_inc = _excess(sizes + 1, s_lo, s_hi) - s_base

        cands: list[tuple[float, int, int, int, int]] = []
        for other in range(k):
            if other == f:
                continue
            a, b = (f, other) if over else (other, f)
            I = sample(np.flatnonzero((fold == a) & has))
            if I.size == 0:
                continue
            u = dec[a] + inc[b]
            mv = Yf[I] @ u + s_dec[a] + s_inc[b]
            cands += [(float(d), int(i), -1, a, b) for d, i in zip(mv, I)]
            J = sample(np.flatnonzero((fold == b) & ~has)) if lab >= 0 else np.empty(0, dtype=np.int64)
            if J.size:
                v = dec[b] + inc[a]
                sw = (Yf[I] @ u)[:, None] + (Yf[J] @ v)[None, :] - (Yf[I] * (u + v)) @ Yf[J].T
                cands += [(float(sw[x, y]), int(I[x]), int(J[y]), a, b) for x, y in np.ndindex(*sw.shape)]
        if not cands:
            continue
        if rng.random() < noise:
            choice = cands[int(rng.integers(len(cands)))]
        else:
            low = min(c[0] for c in cands)
            ties = [c for c in cands if c[0] <= low + 1e-9]
            choice = ties[int(rng.integers(len(ties)))]
        _, i, j, a, b = choice
        fold[i] = b
        counts[a] -= Yf[i]
        counts[b] += Yf[i]
        if j >= 0:
            fold[j] = a
            counts[b] -= Yf[j]
            counts[a] += Yf[j]
        else:
            sizes[a] -= 1
            sizes[b] += 1
        cur = total()
        if cur < best_v:
            best, best_v, best_step = fold.copy(), cur, step
    return best


def stratified_kfold(samples: Sequence[Sample], k: int, seed: int = 0, use_predefined: bool = True) -> FoldPlan:
    """Fold plan for one source; a complete precomputed fold column wins."""
    if k < 2:
        raise ValueError("k must be at least 2")
    if len(samples) < k:
        raise TooFewSamples(f"{len(samples)} samples cannot fill {k} folds")
    if use_predefined and samples and all(s.fold is not None for s in samples):
        bad = [s.id for s in samples if not 0 <= s.fold < k]
        if bad:
            raise FoldCountMismatch(f"precomputed folds outside [0, {k}): {bad[:3]}")
        return FoldPlan(k, {s.id: int(s.fold) for s in samples})
    Y = np.array([s.labels for s in samples], dtype=bool).reshape(len(samples), -1)
    assigned = iterative_stratification(Y, k, seed)
    return FoldPlan(k, {s.id: int(f) for s, f in zip(samples, assigned)})


@dataclass
class JointFold:
    rotation: int
    train: list[str]
    val: list[str]
    test: list[str]

    @property
    def sizes(self) -> dict[str, int]:
        return {"train": len(self.train), "val": len(self.val), "test": len(self.test)}


def synchronize(singles_plan: FoldPlan | None, pairs_plan: FoldPlan | None) -> list[JointFold]:
    """Fold ``i`` of the joint plan is the union of both sources' fold ``i``."""
    plans = [p for p in (singles_plan, pairs_plan) if p is not None]
    if not plans:
        raise DatasetError("no fold plans given")
    ks = {p.k for p in plans}
    if len(ks) != 1:
        raise FoldCountMismatch(f"fold counts differ: {sorted(ks)}")
    k = ks.pop()
    out = []
    for r in range(k):
        roles = [p.rotation(r) for p in plans]
        out.append(JointFold(r, *(sum((ro[name] for ro in roles), []) for name in ("train", "val", "test"))))
    return out


def merge_plans(*plans: FoldPlan | None) -> FoldPlan:
    present = [p for p in plans if p is not None]
    if len({p.k for p in present}) != 1:
        raise FoldCountMismatch("fold counts differ")
    folds: dict[str, int] = {}
    for p in present:
        folds.update(p.folds)
    return FoldPlan(present[0].k, folds)


def write_folds_csv(path: str | Path, plan: FoldPlan) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "fold"])
        w.writerows(plan.to_rows())


def read_folds_csv(path: str | Path, k: int | None = None) -> FoldPlan:
    with open(path, newline="", encoding="utf-8") as fh:
        r = csv.reader(fh)
        header = next(r, None)
        if header != ["id", "fold"]:
            raise FormatError("folds CSV header must be id,fold", 1)
        folds = {row[0]: int(row[1]) for row in r if row}
    k = k if k is not None else (max(folds.values()) + 1 if folds else 0)
    return FoldPlan(k, folds)


def label_density(samples: Sequence[Sample]) -> dict[str, float]:
    out = {}
    for source in SOURCES:
        rows = [s.n_positive for s in samples if s.source == source]
        if rows:
            out[source] = float(np.mean(rows))
    return out


def with_labels(sample: Sample, labels: np.ndarray, provenance: np.ndarray) -> Sample:
    return replace(sample, labels=labels, provenance=provenance, known_mask=provenance != PADDED)
