"""Command-line entry point.

Subcommands: synth, prepare, train, pipeline, pseudo-label, evaluate, embed,
project, selfcheck. Run settings come from a ``key = value`` config file;
``--key value`` flags override it. Exit codes: 0 success, 1 selfcheck
failure, 2 input format error, 3 shape or compatibility error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import shutil
import sys
from dataclasses import fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import checks, dataset as ds, numerics as nx, synthetic
from .aggregator import CheckpointError, OdorModel
from .embedder import DimensionMismatch, FormatError as EmbeddingFormatError, load_embedding_file, write_embedding_file
from .losses import MissingTeacher
from .metrics import render_table
from .smiles import ParseError
from .trainer import TrainConfig, evaluate, load_teacher_file, pseudo_label, run_pipeline, train

log = logging.getLogger("odormix")

EXIT_OK, EXIT_SELFCHECK, EXIT_FORMAT, EXIT_SHAPE = 0, 1, 2, 3

PATH_KEYS = ("data", "teacher", "embeddings", "checkpoint", "augmented")
RUN_KEYS = ("out_dir", "rotation", "rotations", "strict_embeddings")


class ConfigError(ValueError):
    pass


class LabelSpaceMismatch(ValueError):
    pass


class InsufficientSamples(ValueError):
    pass


# ---------------------------------------------------------------------------
# config handling


def read_config(path: str | Path) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in TrainConfig.field_names() and key not in PATH_KEYS + RUN_KEYS:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        out[key] = value
    return out


def _parse_bool(value: str) -> bool:
    v = value.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {value!r}")


def train_config(values: dict[str, str]) -> TrainConfig:
    defaults = TrainConfig()
    kwargs = {}
    for f in fields(TrainConfig):
        if f.name not in values:
            continue
        raw = values[f.name]
        kind = type(getattr(defaults, f.name))
        try:
            kwargs[f.name] = _parse_bool(raw) if kind is bool else kind(raw)
        except ValueError as exc:
            raise ConfigError(f"{f.name}: {exc}") from None
    try:
        return TrainConfig(**kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _add_run_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file")
    for f in fields(TrainConfig):
        flag = "--" + f.name.replace("_", "-")
        p.add_argument(flag, dest=f.name, default=None, metavar=f.name.upper())
    p.add_argument("--ablation", choices=["ca", "pna"], help="aggregator variant (same as --aggregator)")
    p.add_argument("--no-kd", action="store_true", help="disable distillation on singles")
    p.add_argument("--data", help="directory written by 'prepare'")
    p.add_argument("--teacher", help="teacher probability TSV")
    p.add_argument("--embeddings", help="precomputed embedding TSV (frozen embedder)")
    p.add_argument("--out", dest="out_dir", help="output directory")


def merged_values(args: argparse.Namespace) -> dict[str, str]:
    """Config file values with command-line flags on top."""
    values = read_config(args.config) if args.config else {}
    for key in TrainConfig.field_names() + list(PATH_KEYS + RUN_KEYS):
        v = getattr(args, key, None)
        if v is not None:
            values[key] = str(v)
    if getattr(args, "ablation", None):
        values["aggregator"] = args.ablation
    if getattr(args, "no_kd", False):
        values["kd"] = "false"
    return values


def validate_paths(values: dict[str, str], required: Sequence[str]) -> None:
    for key in required:
        if not values.get(key):
            raise ConfigError(f"missing required setting {key!r}")
    for key in PATH_KEYS:
        if values.get(key) and not Path(values[key]).exists():
            raise ConfigError(f"{key}: path {values[key]!r} does not exist")


def echo_config(out: Path, config_path: str | None, values: dict[str, str]) -> None:
    out.mkdir(parents=True, exist_ok=True)
    if config_path:
        shutil.copyfile(config_path, out / "config.txt")
    lines = [f"{k} = {values[k]}" for k in sorted(values)]
    (out / "config.effective.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# prepared data


def load_prepared(data_dir: str | Path) -> tuple[ds.Dataset, ds.FoldPlan]:
    d = Path(data_dir)
    for name in ("label_space.json", "samples.csv", "folds.csv"):
        if not (d / name).exists():
            raise ConfigError(f"{d} is missing {name}; run 'prepare' first")
    doc = json.loads((d / "label_space.json").read_text(encoding="utf-8"))
    space = ds.LabelSpace.from_dict(doc)
    samples = ds.read_samples_csv(d / "samples.csv", space)
    plan = ds.read_folds_csv(d / "folds.csv", doc.get("k"))
    missing = {s.id for s in samples} - set(plan.folds)
    if missing:
        raise ds.FormatError(f"folds.csv lacks {len(missing)} sample ids, e.g. {sorted(missing)[:3]}")
    return ds.Dataset(space, samples), plan


def _split(dataset: ds.Dataset, plan: ds.FoldPlan, rotation: int, split: str) -> list[ds.Sample]:
    if split == "all":
        return dataset.samples
    fold = ds.synchronize(plan, None)[rotation]
    return dataset.subset(getattr(fold, split))


def _check_labels(model: OdorModel, space: ds.LabelSpace) -> None:
    if list(model.labels) != list(space.names):
        raise LabelSpaceMismatch(
            f"checkpoint has {len(model.labels)} labels, data has {len(space)}; label axes differ"
        )


def _load_aux(values: dict[str, str]):
    teacher = load_teacher_file(values["teacher"]) if values.get("teacher") else None
    table = None
    if values.get("embeddings"):
        table, _ = load_embedding_file(values["embeddings"])
    return teacher, table


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    cfg = synthetic.SyntheticConfig(
        n_molecules=args.n_molecules, n_pairs=args.n_pairs, n_labels=args.n_labels,
        n_pair_labels=args.n_pair_labels, drop_rate=args.drop_rate, seed=args.seed,
    )
    data = synthetic.generate(cfg)
    paths = data.write(args.out)
    print(f"wrote {len(data.molecules)} singles, {len(data.pairs)} pairs, teacher table to {args.out}")
    print(f"interaction labels: {', '.join(data.interaction_names)}")
    for k, p in paths.items():
        print(f"  {k}: {p}")
    return EXIT_OK


def _load_source(path: str | None, schema: str, strict: bool) -> ds.LoadResult | None:
    if not path:
        return None
    p = Path(path)
    if p.stat().st_size == 0:
        log.warning("%s is empty; no %s samples", p, schema)
        return None
    res = ds.load_csv(p, schema)
    for row, msg in res.rejects:
        log.warning("%s row %d rejected: %s", p.name, row, msg)
    if strict and res.rejects:
        row, msg = res.rejects[0]
        raise ds.FormatError(f"{p.name}: {len(res.rejects)} rejected rows; first: {msg}", row)
    return res


def cmd_prepare(args) -> int:
    for key in ("singles", "pairs"):
        path = getattr(args, key)
        if path and not Path(path).exists():
            raise ConfigError(f"{key}: path {path!r} does not exist")
    if not args.singles and not args.pairs:
        raise ConfigError("need --singles and/or --pairs")
    singles = _load_source(args.singles, ds.SINGLES, args.strict)
    pairs = _load_source(args.pairs, ds.PAIRS, args.strict)
    dataset = ds.build_dataset(singles, pairs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    plans = []
    for source in ds.SOURCES:
        members = dataset.by_source(source)
        if members:
            plans.append(ds.stratified_kfold(members, args.k, args.seed))
    plan = ds.merge_plans(*plans)

    space = dataset.space
    doc = space.to_dict()
    doc["k"] = args.k
    (out / "label_space.json").write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
    ds.write_samples_csv(out / "samples.csv", space, dataset.samples)
    ds.write_folds_csv(out / "folds.csv", plan)
    with open(out / "rejects.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["source", "row", "error"])
        for source, res in ((ds.SINGLES, singles), (ds.PAIRS, pairs)):
            for row, msg in (res.rejects if res else []):
                w.writerow([source, row, msg])

    masks = space.source_masks
    stats = {
        "union_size": len(space),
        "overlap": int((masks[ds.SINGLES] & masks[ds.PAIRS]).sum()),
        "labels_per_source": {s: int(m.sum()) for s, m in masks.items()},
        "samples_per_source": {s: len(dataset.by_source(s)) for s in ds.SOURCES},
        "density": ds.label_density(dataset.samples),
        **dataset.report,
        "k": args.k,
    }
    (out / "prepare_report.json").write_text(json.dumps(stats, indent=2) + "\n", encoding="utf-8")
    print(f"label space: {stats['union_size']} labels "
          f"(singles {stats['labels_per_source'][ds.SINGLES]}, pairs {stats['labels_per_source'][ds.PAIRS]}, "
          f"overlap {stats['overlap']})")
    for s in ds.SOURCES:
        dens = stats["density"].get(s)
        print(f"  {s}: {stats['samples_per_source'][s]} samples, "
              f"{'-' if dens is None else f'{dens:.2f}'} positives per sample, "
              f"{stats['duplicates'][s]} duplicates dropped, {stats['rejects'][s]} rejected rows")
    return EXIT_OK


def cmd_train(args) -> int:
    values = merged_values(args)
    validate_paths(values, ["data", "out_dir"])
    cfg = train_config(values)
    out = Path(values["out_dir"])
    echo_config(out, args.config, values)
    dataset, plan = load_prepared(values["data"])
    teacher, table = _load_aux(values)
    fold = ds.synchronize(plan, None)[int(values.get("rotation", 0))]
    train_s = dataset.subset(fold.train)
    if values.get("augmented"):
        aug = ds.read_samples_csv(values["augmented"], dataset.space)
        train_s = [s for s in train_s if s.source == ds.SINGLES] + [s for s in aug if s.source == ds.PAIRS]
    val_s, test_s = dataset.subset(fold.val), dataset.subset(fold.test)
    res = train(train_s, val_s, dataset.space, cfg, teacher, table, out / "train_log.jsonl")
    if values.get("embeddings"):
        res.model.meta["embedding_file"] = str(Path(values["embeddings"]).resolve())
    res.model.save(out / "checkpoint.json")
    report = {"best_epoch": res.best_epoch, "best_val_metric": res.best_metric, "epochs_run": res.epochs_run,
              "fold_sizes": fold.sizes}
    if test_s:
        ev = evaluate(res.model, test_s, dataset.space)
        report["test"] = ev.to_dict()
        print(render_table([(cfg.phase, ev)]))
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(f"best epoch {res.best_epoch} of {res.epochs_run}; checkpoint at {out / 'checkpoint.json'}")
    return EXIT_OK


def _rotations(spec: str | None, k: int) -> list[int]:
    if spec is None or spec.strip().lower() == "all":
        return list(range(k))
    out = [int(x) for x in spec.replace(",", " ").split()]
    if any(not 0 <= r < k for r in out):
        raise ConfigError(f"rotations must lie in [0, {k})")
    return out


def cmd_pipeline(args) -> int:
    values = merged_values(args)
    validate_paths(values, ["data", "out_dir"])
    cfg = train_config(values)
    out = Path(values["out_dir"])
    echo_config(out, args.config, values)
    dataset, plan = load_prepared(values["data"])
    teacher, table = _load_aux(values)
    rotations = _rotations(values.get("rotations"), plan.k)
    result = run_pipeline(dataset, (plan, None), cfg, out, teacher, table, rotations)
    for r in rotations:
        txt = out / f"fold_{r}" / "report.txt"
        if txt.exists():
            print(f"rotation {r}\n{txt.read_text(encoding='utf-8')}")
    print(json.dumps(result["summary"], indent=2, sort_keys=True))
    return EXIT_OK


def cmd_pseudo_label(args) -> int:
    for key in ("checkpoint", "data"):
        if not Path(getattr(args, key)).exists():
            raise ConfigError(f"{key}: path {getattr(args, key)!r} does not exist")
    dataset, plan = load_prepared(args.data)
    model = OdorModel.load(args.checkpoint)
    _check_labels(model, dataset.space)
    fold = ds.synchronize(plan, None)[args.rotation]
    train_s = dataset.subset(fold.train)
    singles = [s for s in train_s if s.source == ds.SINGLES]
    pairs = [s for s in train_s if s.source == ds.PAIRS]
    pl = pseudo_label(model, singles, pairs, dataset.space, args.threshold_fit)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ds.write_samples_csv(out / "pseudo78.csv", dataset.space, pl.p78)
    ds.write_samples_csv(out / "pseudo152.csv", dataset.space, pl.p152)
    doc = {
        "labels": dataset.space.names,
        "gamma": pl.rates.gamma.tolist(),
        "k": pl.thresholds.k.tolist(),
        "tau": [None if not np.isfinite(t) else float(t) for t in pl.thresholds.tau],
        "density": {
            "original": ds.label_density(pairs).get(ds.PAIRS),
            "p78": ds.label_density(pl.p78).get(ds.PAIRS),
            "p152": ds.label_density(pl.p152).get(ds.PAIRS),
            "sum_gamma": float(pl.rates.gamma.sum()),
        },
    }
    (out / "thresholds.json").write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
    d = doc["density"]
    print(f"pairs density: original {d['original']:.2f}, p78 {d['p78']:.2f}, p152 {d['p152']:.2f} "
          f"(sum of class rates {d['sum_gamma']:.2f})")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    for key in ("checkpoint", "data"):
        if not Path(getattr(args, key)).exists():
            raise ConfigError(f"{key}: path {getattr(args, key)!r} does not exist")
    dataset, plan = load_prepared(args.data)
    model = OdorModel.load(args.checkpoint)
    _check_labels(model, dataset.space)
    samples = _split(dataset, plan, args.rotation, args.split)
    report = evaluate(model, samples, dataset.space)
    table = render_table([(Path(args.checkpoint).stem, report)])
    print(table)
    appendix = [f"{name:<24} {v:.3f}" if isinstance(v, float) else f"{name:<24} skipped ({v})"
                for name, v in report.per_class]
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "eval_report.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n", encoding="utf-8")
        (out / "eval_report.txt").write_text(table + "\n\nper class\n" + "\n".join(appendix) + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_embed(args) -> int:
    model = OdorModel.load(args.checkpoint)
    if args.data:
        dataset, _ = load_prepared(args.data)
        molecules = dataset.molecules()
    else:
        from .smiles import normalize

        lines = Path(args.smiles).read_text(encoding="utf-8").splitlines()
        molecules = sorted({normalize(x).text for x in lines if x.strip()})
    table = {m: model.embedder.embed(m) for m in molecules}
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_embedding_file(out, table, model.config.d_e)
    print(f"wrote {len(table)} embeddings (d_e={model.config.d_e}) to {out}")
    return EXIT_OK


def project_2d(Z: np.ndarray, iters: int = 200, tol: float = 1e-9, seed: int = 0) -> np.ndarray:
    """Coordinates on the top two principal components, by power iteration."""
    Z = np.asarray(Z, dtype=np.float64)
    n, d = Z.shape
    if n < 3:
        raise InsufficientSamples(f"projection needs at least 3 samples, got {n}")
    X = Z - Z.mean(axis=0)
    C = X.T @ X / (n - 1)
    start = np.random.default_rng(seed).standard_normal(d)
    comps = []
    for _ in range(2):
        v = start / np.linalg.norm(start)
        for _ in range(iters):
            w = C @ v
            norm = np.linalg.norm(w)
            if norm < 1e-300:
                v = np.zeros(d)
                break
            w /= norm
            done = np.linalg.norm(w - v) < tol
            v = w
            if done:
                break
        if v.any():
            v = v * np.sign(v[np.argmax(np.abs(v))])
        comps.append(v)
        C = C - (v @ C @ v) * np.outer(v, v)
    return X @ np.stack(comps, axis=1)


def cmd_project(args) -> int:
    dataset, plan = load_prepared(args.data)
    model = OdorModel.load(args.checkpoint)
    _check_labels(model, dataset.space)
    samples = _split(dataset, plan, args.rotation, args.split)
    _, z = model.predict_many([s.molecules for s in samples])
    xy = project_2d(z)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "source", "x", "y"])
        for s, (x, y) in zip(samples, xy):
            w.writerow([s.id, s.source, repr(float(x)), repr(float(y))])
    print(f"wrote {len(samples)} projected points to {out}")
    return EXIT_OK


def cmd_selfcheck(args) -> int:
    with nx.corrupted(*(args.corrupt_grad or [])):
        results = checks.run_all(args.seed)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name}{': ' + r.detail if r.detail else ''}")
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"selfcheck failed: {', '.join(failed)}", file=sys.stderr)
        return EXIT_SELFCHECK
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="odormix", description="Odor mixture prediction toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a planted-rule synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n-molecules", type=int, default=30)
    p.add_argument("--n-pairs", type=int, default=20)
    p.add_argument("--n-labels", type=int, default=20)
    p.add_argument("--n-pair-labels", type=int, default=14)
    p.add_argument("--drop-rate", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("prepare", help="unify labels, pad, and build stratified folds")
    p.add_argument("--singles")
    p.add_argument("--pairs")
    p.add_argument("--out", required=True)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--strict", action="store_true", help="fail on any rejected row")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train one model on one fold rotation")
    _add_run_options(p)
    p.add_argument("--rotation", default=None)
    p.add_argument("--augmented", help="pseudo-labeled CSV that replaces the training pairs")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("pipeline", help="initial training, pseudo-labeling, re-training, evaluation")
    _add_run_options(p)
    p.add_argument("--rotations", default=None, help="comma-separated rotations or 'all'")
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("pseudo-label", help="write Pseudo-78 and Pseudo-152 training pairs")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--rotation", type=int, default=0)
    p.add_argument("--threshold-fit", choices=["target", "source"], default="target")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pseudo_label)

    p = sub.add_parser("evaluate", help="macro-AUROC report for a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--rotation", type=int, default=0)
    p.add_argument("--split", choices=["test", "val", "train", "all"], default="test")
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("embed", help="export per-molecule embeddings")
    p.add_argument("--checkpoint", required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--data")
    src.add_argument("--smiles", help="text file, one SMILES per line")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("project", help="2-D principal-component coordinates of mixture embeddings")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--rotation", type=int, default=0)
    p.add_argument("--split", choices=["test", "val", "train", "all"], default="all")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_project)

    p = sub.add_parser("selfcheck", help="gradient, invariance, metric and calibration checks")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--corrupt-grad", action="append", metavar="OP",
                   help="negative control: perturb this op's backward rule")
    p.set_defaults(func=cmd_selfcheck)
    return parser


SHAPE_ERRORS = (nx.ShapeMismatch, CheckpointError, DimensionMismatch, LabelSpaceMismatch)
FORMAT_ERRORS = (
    ConfigError, ds.DatasetError, EmbeddingFormatError, ParseError, MissingTeacher,
    InsufficientSamples, FileNotFoundError,
)


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except SHAPE_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SHAPE
    except FORMAT_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FORMAT


if __name__ == "__main__":
    sys.exit(main())
