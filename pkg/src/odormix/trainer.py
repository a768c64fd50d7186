"""Training: Adam with early stopping, and the two-phase pseudo-label pipeline."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import pseudo
from .aggregator import AggregatorConfig, MoleculeBank, OdorModel
from .dataset import (
    PAIRS, SINGLES, Dataset, FoldPlan, LabelSpace, Sample, label_density, normalize_label,
    synchronize, write_samples_csv,
)
from .embedder import FileEmbedder, ToyEmbedder, ToyFeaturizer, read_vector_table
from .losses import LossConfig, MissingTeacher, total_loss
from .metrics import EvalReport, NoScorableClass, auroc_macro, evaluate_predictions, render_table
from .numerics import backward

log = logging.getLogger(__name__)

EMBEDDER_MODES = ("frozen", "adapted")


@dataclass
class TrainConfig:
    lr: float = 4e-5
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 64
    patience: int = 20
    max_epochs: int = 300
    seed: int = 0
    phase: str = "initial"
    aggregator: str = "ca"
    kd: bool = True
    embedder: str = "adapted"
    alpha: float = 0.5
    temperature: float = 1.0
    kd_mode: str = "bernoulli"
    mask_unknown: bool = False
    d_e: int = 768
    d_p: int = 196
    d_h: int = 384
    heads: int = 4
    lora_rank: int = 4
    lora_alpha: float = 8.0
    n_buckets: int = 512
    threshold_fit: str = "target"

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.patience < 1:
            raise ValueError("patience must be at least 1")
        if self.embedder not in EMBEDDER_MODES:
            raise ValueError(f"embedder must be one of {EMBEDDER_MODES}")
        if self.threshold_fit not in ("target", "source"):
            raise ValueError("threshold_fit must be 'target' or 'source'")
        if self.phase not in ("initial", "retrain-p78", "retrain-p152"):
            raise ValueError(f"unknown phase {self.phase!r}")

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


# ---------------------------------------------------------------------------
# optimizer and stopping rule


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict, grads: dict[str, np.ndarray], state: AdamState, cfg: TrainConfig) -> None:
    """One bias-corrected Adam update; ``state.t`` counts from 1."""
    state.t += 1
    t = state.t
    for name, p in params.items():
        g = grads[name]
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - cfg.beta1) * g if m is None else cfg.beta1 * m + (1 - cfg.beta1) * g
        v = (1 - cfg.beta2) * g * g if v is None else cfg.beta2 * v + (1 - cfg.beta2) * g * g
        state.m[name], state.v[name] = m, v
        m_hat = m / (1 - cfg.beta1**t)
        v_hat = v / (1 - cfg.beta2**t)
        p.data = p.data - cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)


class EarlyStopping:
    """Stop once ``patience`` epochs pass without a strict improvement."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = -np.inf
        self.best_epoch = 0
        self.since = 0

    def update(self, epoch: int, metric: float) -> bool:
        if metric > self.best:
            self.best, self.best_epoch, self.since = metric, epoch, 0
            return True
        self.since += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.since >= self.patience


# ---------------------------------------------------------------------------
# teacher probabilities


@dataclass
class TeacherTable:
    labels: list[str]
    table: dict[str, np.ndarray]

    @property
    def size(self) -> int:
        return len(self.labels)

    def subset_indices(self, space: LabelSpace) -> np.ndarray:
        return space.indices(self.labels)


def load_teacher_file(path: str | Path) -> TeacherTable:
    header, table, width = read_vector_table(path, "labels")
    labels = [normalize_label(n) for n in header.split(",") if n.strip()]
    if width >= 0 and width != len(labels):
        raise ValueError(f"teacher rows have {width} values for {len(labels)} labels")
    for key, vec in table.items():
        if np.any(vec < 0) or np.any(vec > 1):
            raise ValueError(f"teacher probabilities for {key!r} fall outside [0, 1]")
    return TeacherTable(labels, table)


def write_teacher_file(path: str | Path, teacher: TeacherTable) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("labels\t" + ",".join(teacher.labels) + "\n")
        for key, vec in teacher.table.items():
            fh.write(key + "\t" + "\t".join(repr(float(v)) for v in vec) + "\n")


# ---------------------------------------------------------------------------
# training


@dataclass
class Arrays:
    idx: np.ndarray
    labels: np.ndarray
    known: np.ndarray
    is_single: np.ndarray
    teacher: np.ndarray | None
    has_teacher: np.ndarray | None

    def take(self, rows: np.ndarray) -> Arrays:
        t = None if self.teacher is None else self.teacher[rows]
        h = None if self.has_teacher is None else self.has_teacher[rows]
        return Arrays(self.idx[rows], self.labels[rows], self.known[rows], self.is_single[rows], t, h)


def make_arrays(samples: Sequence[Sample], bank: MoleculeBank, teacher: TeacherTable | None = None) -> Arrays:
    idx, _ = bank.lookup([s.molecules for s in samples])
    n = len(samples)
    labels = np.array([s.labels for s in samples], dtype=np.float64).reshape(n, -1)
    known = np.array([s.known_mask for s in samples], dtype=bool).reshape(n, -1)
    is_single = np.array([s.source == SINGLES for s in samples], dtype=bool)
    t = h = None
    if teacher is not None:
        t = np.full((n, teacher.size), 0.5)
        h = np.zeros(n, dtype=bool)
        for i, s in enumerate(samples):
            row = teacher.table.get(s.molecules[0]) if s.source == SINGLES else None
            if row is not None:
                t[i], h[i] = row, True
    return Arrays(idx, labels, known, is_single, t, h)


def build_model(cfg: TrainConfig, space: LabelSpace, corpus: Sequence[str],
                embedding_table: dict[str, np.ndarray] | None = None, strict: bool = True) -> OdorModel:
    if embedding_table is not None:
        if cfg.embedder == "adapted":
            raise ValueError("LoRA adaptation needs the toy embedder; use embedder=frozen with an embedding file")
        embedder = FileEmbedder(embedding_table, cfg.d_e, strict)
    else:
        feat = ToyFeaturizer.from_corpus(corpus, cfg.n_buckets)
        embedder = ToyEmbedder.create(feat, cfg.d_e, cfg.seed)
        if cfg.embedder == "adapted":
            embedder.attach_lora(cfg.lora_rank, cfg.lora_alpha, np.random.default_rng([cfg.seed, 2]))
    agg = AggregatorConfig(cfg.d_e, cfg.d_p, cfg.d_h, cfg.heads, len(space), cfg.aggregator)
    return OdorModel.create(agg, embedder, space.names, cfg.seed)


def predict_arrays(model: OdorModel, bank: MoleculeBank, idx: np.ndarray, batch_size: int = 512) -> np.ndarray:
    out = np.zeros((len(idx), model.config.n_labels))
    for start in range(0, len(idx), batch_size):
        out[start : start + batch_size] = model.forward_idx(bank, idx[start : start + batch_size]).probs.data
    return out


@dataclass
class TrainResult:
    model: OdorModel
    log: list[dict]
    best_epoch: int
    best_metric: float
    epochs_run: int


def train(
    train_samples: Sequence[Sample],
    val_samples: Sequence[Sample],
    space: LabelSpace,
    cfg: TrainConfig,
    teacher: TeacherTable | None = None,
    embedding_table: dict[str, np.ndarray] | None = None,
    log_path: str | Path | None = None,
    model: OdorModel | None = None,
) -> TrainResult:
    """Train on mixed single/pair batches, keep the best-validation weights."""
    if cfg.kd and teacher is None:
        raise MissingTeacher("kd is enabled but no teacher table was given")
    if not train_samples:
        raise ValueError("empty training set")
    if model is None:
        corpus = sorted({m for s in train_samples for m in s.molecules})
        model = build_model(cfg, space, corpus, embedding_table)
    kd_subset = teacher.subset_indices(space) if (cfg.kd and teacher is not None) else np.array([], dtype=np.int64)
    loss_cfg = LossConfig(cfg.alpha, cfg.kd, kd_subset.tolist(), cfg.temperature, cfg.kd_mode)
    loss_cfg.check_subset(len(space))

    bank = model.bank(sorted({m for s in list(train_samples) + list(val_samples) for m in s.molecules}))
    tr = make_arrays(train_samples, bank, teacher if cfg.kd else None)
    va = make_arrays(val_samples, bank) if val_samples else None
    params = model.trainable(cfg.embedder)
    names = list(params)
    tensors = [params[n] for n in names]

    rng = np.random.default_rng([cfg.seed, 1])
    state = AdamState()
    stopper = EarlyStopping(cfg.patience)
    best = model.copy_params()
    history: list[dict] = []
    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        for epoch in range(1, cfg.max_epochs + 1):
            started = time.perf_counter()
            order = rng.permutation(len(tr.idx))
            sums = np.zeros(4)
            n_batches = 0
            for start in range(0, len(order), cfg.batch_size):
                b = tr.take(order[start : start + cfg.batch_size])
                res = model.forward_idx(bank, b.idx)
                parts = total_loss(res.logits, res.probs, b.labels, b.is_single, loss_cfg, b.teacher,
                                   b.has_teacher, label_mask=b.known if cfg.mask_unknown else None)
                grads = backward(parts.total, tensors)
                adam_step(params, dict(zip(names, grads)), state, cfg)
                sums += (float(parts.total.data), parts.single_bce, parts.single_mld, parts.pair_bce)
                n_batches += 1
            metric = _validation_metric(model, bank, va, sums[0] / n_batches)
            improved = stopper.update(epoch, metric)
            if improved:
                best = model.copy_params()
            record = {
                "epoch": epoch,
                "loss_total": sums[0] / n_batches,
                "loss_single_bce": sums[1] / n_batches,
                "loss_single_mld": sums[2] / n_batches,
                "loss_pair_bce": sums[3] / n_batches,
                "val_auroc_combined": metric if va is not None else None,
            }
            history.append(record)
            if log_fh:
                log_fh.write(json.dumps(record) + "\n")
            log.info("epoch %d loss %.4f val %.4f (%.1fs)", epoch, record["loss_total"], metric,
                     time.perf_counter() - started)
            if stopper.should_stop:
                break
    finally:
        if log_fh:
            log_fh.close()
    model.load_params(best)
    model.meta.update({"best_epoch": stopper.best_epoch, "best_val_metric": float(stopper.best),
                       "phase": cfg.phase, "train_config": asdict(cfg)})
    return TrainResult(model, history, stopper.best_epoch, float(stopper.best), len(history))


def _validation_metric(model: OdorModel, bank: MoleculeBank, va: Arrays | None, train_loss: float) -> float:
    """Combined macro-AUROC on validation; negative training loss without one."""
    if va is None:
        return -train_loss
    preds = predict_arrays(model, bank, va.idx)
    try:
        return auroc_macro(preds, va.labels).mean
    except NoScorableClass:
        return -train_loss


def evaluate(model: OdorModel, samples: Sequence[Sample], space: LabelSpace) -> EvalReport:
    probs, _ = model.predict_many([s.molecules for s in samples])
    return evaluate_predictions(probs, samples, space)


# ---------------------------------------------------------------------------
# two-phase pipeline


@dataclass
class PseudoResult:
    p78: list[Sample]
    p152: list[Sample]
    rates: pseudo.ClassRates
    thresholds: pseudo.Thresholds


def pseudo_label(model: OdorModel, singles: Sequence[Sample], pairs: Sequence[Sample], space: LabelSpace,
                 threshold_fit: str = "target") -> PseudoResult:
    """Rates from the singles' labels, cutoffs on predictions, both augmentations of ``pairs``."""
    rates = pseudo.class_rates(np.array([s.labels for s in singles]))
    preds, _ = model.predict_many([s.molecules for s in pairs])
    if threshold_fit == "target":
        th = pseudo.fit_thresholds(preds, rates)
    else:
        single_preds, _ = model.predict_many([s.molecules for s in singles])
        th = pseudo.fit_thresholds(single_preds, rates)
    missing = pseudo.missing_index_set(space.mask(PAIRS))
    return PseudoResult(
        pseudo.augment(pairs, preds, th, pseudo.P78, missing),
        pseudo.augment(pairs, preds, th, pseudo.P152, missing),
        rates, th,
    )


def _dump(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def run_rotation(
    dataset: Dataset,
    fold,
    cfg: TrainConfig,
    out_dir: str | Path,
    teacher: TeacherTable | None = None,
    embedding_table: dict[str, np.ndarray] | None = None,
) -> dict:
    """Phase 1, pseudo-labeling, two fresh re-trainings, test evaluation."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    space = dataset.space
    train_s, val_s, test_s = (dataset.subset(ids) for ids in (fold.train, fold.val, fold.test))
    phase_cfg = lambda phase: TrainConfig(**{**asdict(cfg), "phase": phase})  # noqa: E731

    first = train(train_s, val_s, space, phase_cfg("initial"), teacher, embedding_table, out / "train_log_initial.jsonl")
    first.model.save(out / "checkpoint_initial.json")
    models = {"initial": first.model}
    reports: dict = {"fold_sizes": fold.sizes, "epochs": {"initial": first.epochs_run}}

    singles = [s for s in train_s if s.source == SINGLES]
    pairs = [s for s in train_s if s.source == PAIRS]
    if singles and pairs:
        pl = pseudo_label(first.model, singles, pairs, space, cfg.threshold_fit)
        write_samples_csv(out / "pseudo78.csv", space, pl.p78)
        write_samples_csv(out / "pseudo152.csv", space, pl.p152)
        reports["density"] = {
            "original": label_density(pairs).get(PAIRS),
            "p78": label_density(pl.p78).get(PAIRS),
            "p152": label_density(pl.p152).get(PAIRS),
            "singles": label_density(singles).get(SINGLES),
            "sum_gamma": float(pl.rates.gamma.sum()),
        }
        for tag, aug in (("p78", pl.p78), ("p152", pl.p152)):
            res = train(singles + aug, val_s, space, phase_cfg(f"retrain-{tag}"), teacher, embedding_table,
                        out / f"train_log_{tag}.jsonl")
            res.model.save(out / f"checkpoint_{tag}.json")
            models[tag] = res.model
            reports["epochs"][tag] = res.epochs_run
    else:
        log.warning("pseudo-labeling skipped: needs both singles and pairs in the training split")

    if test_s:
        evals = {tag: evaluate(m, test_s, space) for tag, m in models.items()}
        reports["test"] = {tag: r.to_dict() for tag, r in evals.items()}
        (out / "report.txt").write_text(render_table(list(evals.items())) + "\n", encoding="utf-8")
    _dump(out / "report.json", reports)
    return reports


def run_pipeline(
    dataset: Dataset,
    plans: tuple[FoldPlan | None, FoldPlan | None],
    cfg: TrainConfig,
    out_dir: str | Path,
    teacher: TeacherTable | None = None,
    embedding_table: dict[str, np.ndarray] | None = None,
    rotations: Sequence[int] | None = None,
) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    folds = synchronize(*plans)
    rotations = range(len(folds)) if rotations is None else rotations
    per_rotation = {}
    for r in rotations:
        per_rotation[r] = run_rotation(dataset, folds[r], cfg, out / f"fold_{r}", teacher, embedding_table)
    summary = {"rotations": list(rotations), "test": _summarize(per_rotation)}
    _dump(out / "summary.json", summary)
    return {"summary": summary, "rotations": per_rotation}


def _summarize(per_rotation: dict) -> dict:
    out: dict = {}
    for rep in per_rotation.values():
        for tag, r in rep.get("test", {}).items():
            for key in ("auroc_combined", "auroc_singles", "auroc_pairs"):
                if r[key] is not None:
                    out.setdefault(tag, {}).setdefault(key, []).append(r[key])
    return {
        tag: {k: {"mean": float(np.mean(v)), "std": float(np.std(v)), "n": len(v)} for k, v in d.items()}
        for tag, d in out.items()
    }
