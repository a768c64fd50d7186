"""Mixture aggregation: 1-2 molecule embeddings in, one global vector and
per-label probabilities out.

The input is always a ``2 x d_e`` stack; a single molecule carries a zero
second row that is masked out of every attention step. Pipeline::

    E' = relu(E W1 + b1)
    H  = self_attention(E', keys masked by `valid`)
    H' = H W2 + b2
    z  = layer_norm(cross_attention(query, H', keys masked by `valid`))
    p  = sigmoid(z W_out + b_out)

The ``pna`` variant swaps the learnable-query cross-attention for
``[mean, var, min, max]`` statistics over valid rows of ``H'``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .embedder import FileEmbedder, LoraAdapter, ToyEmbedder, ToyFeaturizer, load_embedding_file, projection_matrix
from .numerics import AttentionWeights, ShapeMismatch, Tensor, parameter
from .smiles import Smiles

FORMAT_VERSION = 1
VARIANTS = ("ca", "pna")


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class AggregatorConfig:
    d_e: int = 768
    d_p: int = 196
    d_h: int = 384
    heads: int = 4
    n_labels: int = 152
    variant: str = "ca"
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown aggregator variant {self.variant!r}")
        if self.d_p % self.heads or self.d_h % self.heads:
            raise ShapeMismatch(f"d_p={self.d_p} and d_h={self.d_h} must divide by heads={self.heads}")

    def shapes(self) -> dict[str, tuple[int, ...]]:
        s = {
            "w1": (self.d_e, self.d_p), "b1": (self.d_p,),
            "sa_wq": (self.d_p, self.d_p), "sa_wk": (self.d_p, self.d_p),
            "sa_wv": (self.d_p, self.d_p), "sa_wo": (self.d_p, self.d_p),
            "w2": (self.d_p, self.d_h), "b2": (self.d_h,),
        }
        if self.variant == "ca":
            s.update({
                "ca_wq": (self.d_h, self.d_h), "ca_wk": (self.d_h, self.d_h),
                "ca_wv": (self.d_h, self.d_h), "ca_wo": (self.d_h, self.d_h),
                "query": (1, self.d_h),
            })
        else:
            s.update({"pna_w": (4 * self.d_h, self.d_h), "pna_b": (self.d_h,)})
        s.update({
            "ln_gain": (self.d_h,), "ln_bias": (self.d_h,),
            "w_out": (self.d_h, self.n_labels), "b_out": (self.n_labels,),
        })
        return s


def init_params(cfg: AggregatorConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    """Xavier-uniform matrices, zero biases, N(0, 0.02^2) query, unit LN gain."""
    params = {}
    for name, shape in cfg.shapes().items():
        if name == "query":
            data = rng.normal(0.0, 0.02, size=shape)
        elif name == "ln_gain":
            data = np.ones(shape)
        elif len(shape) == 1:
            data = np.zeros(shape)
        else:
            limit = math.sqrt(6.0 / (shape[0] + shape[1]))
            data = rng.uniform(-limit, limit, size=shape)
        params[name] = parameter(data, name=name)
    return params


@dataclass
class ForwardResult:
    z: Tensor
    logits: Tensor
    probs: Tensor


def _attn(params: dict[str, Tensor], prefix: str) -> AttentionWeights:
    return AttentionWeights(*(params[f"{prefix}_w{k}"] for k in "qkvo"))


def forward(params: dict[str, Tensor], cfg: AggregatorConfig, E: Tensor, valid: np.ndarray) -> ForwardResult:
    """Run the aggregator on ``E: (B, 2, d_e)`` (or one ``(2, d_e)`` stack).

    ``valid`` is the matching boolean mask, True for real molecules.
    """
    E = nx.as_tensor(E)
    valid = np.asarray(valid, dtype=bool)
    single = E.ndim == 2
    if single:
        E = nx.reshape(E, (1, *E.shape))
        valid = valid[None]
    if E.shape[-1] != cfg.d_e or E.shape[-2] != 2 or valid.shape != E.shape[:-1]:
        raise ShapeMismatch(f"expected (B, 2, {cfg.d_e}) input with (B, 2) mask, got {E.shape} / {valid.shape}")
    if not valid.any(axis=-1).all():
        raise ShapeMismatch("every mixture needs at least one valid molecule")

    e1 = nx.relu(E @ params["w1"] + params["b1"])
    h = nx.multi_head_attention(e1, e1, e1, cfg.heads, valid, _attn(params, "sa"))
    h2 = h @ params["w2"] + params["b2"]
    if cfg.variant == "ca":
        pooled = nx.multi_head_attention(params["query"], h2, h2, cfg.heads, valid, _attn(params, "ca"))
        pooled = nx.reshape(pooled, (pooled.shape[0], cfg.d_h))
    else:
        pooled = _statistics_pool(h2, valid) @ params["pna_w"] + params["pna_b"]
    z = nx.layer_norm(pooled, params["ln_gain"], params["ln_bias"], cfg.ln_eps)
    logits = z @ params["w_out"] + params["b_out"]
    probs = nx.sigmoid(logits)
    if single:
        z = nx.reshape(z, (cfg.d_h,))
        logits = nx.reshape(logits, (cfg.n_labels,))
        probs = nx.reshape(probs, (cfg.n_labels,))
    return ForwardResult(z, logits, probs)


def _statistics_pool(h: Tensor, valid: np.ndarray) -> Tensor:
    """``[mean, var, min, max]`` over valid rows; variance is biased."""
    w = valid / valid.sum(axis=-1, keepdims=True)
    w3 = w[..., None]
    mu = nx.tsum(h * w3, axis=-2)
    centered = h - nx.reshape(mu, (mu.shape[0], 1, mu.shape[1]))
    var = nx.tsum(centered * centered * w3, axis=-2)
    mask3 = np.broadcast_to(valid[..., None], h.shape)
    lo = nx.masked_extreme(h, mask3, axis=-2, kind="min")
    hi = nx.masked_extreme(h, mask3, axis=-2, kind="max")
    return nx.concat([mu, var, lo, hi], axis=-1)


def forward_pna_baseline(params: dict[str, Tensor], cfg: AggregatorConfig, E: Tensor, valid: np.ndarray) -> ForwardResult:
    if cfg.variant != "pna":
        raise ValueError("parameters were initialised for the cross-attention variant")
    return forward(params, cfg, E, valid)


# ---------------------------------------------------------------------------
# molecules -> stacked embeddings


class MoleculeBank:
    """Per-molecule constants for a fixed set of SMILES.

    ``base`` holds frozen embeddings (``W_feat @ f`` or file vectors);
    ``feats`` holds featurizer rows when a LoRA adapter needs them.
    """

    def __init__(self, embedder: ToyEmbedder | FileEmbedder, smiles: Sequence[str]):
        self.embedder = embedder
        self.smiles = list(smiles)
        self.index = {s: i for i, s in enumerate(self.smiles)}
        d_e = embedder.d_e
        if isinstance(embedder, ToyEmbedder):
            feats = np.array([embedder.featurizer.features(s) for s in self.smiles]).reshape(-1, embedder.featurizer.dim)
            self.base = feats @ embedder.w_feat.T
            self.feats = feats if embedder.lora is not None else None
        else:
            self.base = np.array([embedder.embed(s) for s in self.smiles]).reshape(-1, d_e)
            self.feats = None

    def lookup(self, molecules: Sequence[Sequence[str]]) -> tuple[np.ndarray, np.ndarray]:
        idx = np.full((len(molecules), 2), -1, dtype=np.int64)
        for r, mols in enumerate(molecules):
            for c, m in enumerate(mols):
                idx[r, c] = self.index[m]
        return idx, idx >= 0

    def stack(self, idx: np.ndarray) -> Tensor:
        """Stacked ``(B, 2, d_e)`` embeddings; ``-1`` entries become zero rows."""
        valid = idx >= 0
        safe = np.where(valid, idx, 0)
        base = self.base[safe] * valid[..., None]
        lora = self.embedder.lora
        if lora is None or self.feats is None:
            return Tensor(base)
        f = Tensor(self.feats[safe] * valid[..., None])
        delta = (f @ nx.swapaxes(lora.a, 0, 1)) @ nx.swapaxes(lora.b, 0, 1)
        return Tensor(base) + delta * lora.scale


@dataclass
class OdorModel:
    """Embedder + aggregator + label axis: everything a checkpoint holds."""

    config: AggregatorConfig
    params: dict[str, Tensor]
    embedder: ToyEmbedder | FileEmbedder
    labels: list[str]
    meta: dict = field(default_factory=dict)

    @classmethod
    def create(cls, config: AggregatorConfig, embedder, labels: Sequence[str], seed: int = 0) -> OdorModel:
        if config.n_labels != len(labels):
            raise ShapeMismatch(f"{len(labels)} labels but n_labels={config.n_labels}")
        if embedder.d_e != config.d_e:
            raise ShapeMismatch(f"embedder d_e={embedder.d_e} but config d_e={config.d_e}")
        return cls(config, init_params(config, np.random.default_rng(seed)), embedder, list(labels))

    def trainable(self, embedder_mode: str = "frozen") -> dict[str, Tensor]:
        out = dict(self.params)
        if embedder_mode == "adapted":
            if self.embedder.lora is None:
                raise ValueError("adapted embedder mode needs a LoRA adapter on the toy embedder")
            out.update(self.embedder.lora.parameters())
        return out

    def bank(self, smiles: Sequence[str]) -> MoleculeBank:
        return MoleculeBank(self.embedder, smiles)

    def forward_idx(self, bank: MoleculeBank, idx: np.ndarray) -> ForwardResult:
        return forward(self.params, self.config, bank.stack(idx), idx >= 0)

    def predict(self, molecules: Sequence[Smiles | str]) -> np.ndarray:
        """Probabilities for one single (1 molecule) or pair (2 molecules)."""
        if not 1 <= len(molecules) <= 2:
            raise ValueError("a sample has one or two molecules")
        E = np.zeros((2, self.config.d_e))
        for i, m in enumerate(molecules):
            E[i] = self.embedder.embed(m)
        valid = np.array([True, len(molecules) == 2])
        return forward(self.params, self.config, Tensor(E), valid).probs.data

    def predict_many(self, molecules: Sequence[Sequence[str]], batch_size: int = 512) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(probs, z)`` for many samples."""
        bank = self.bank(sorted({m for mols in molecules for m in mols}))
        idx, _ = bank.lookup(molecules)
        probs = np.zeros((len(molecules), self.config.n_labels))
        zs = np.zeros((len(molecules), self.config.d_h))
        for start in range(0, len(molecules), batch_size):
            sl = slice(start, start + batch_size)
            res = self.forward_idx(bank, idx[sl])
            probs[sl] = res.probs.data
            zs[sl] = res.z.data
        return probs, zs

    # -- persistence --------------------------------------------------------

    def to_dict(self) -> dict:
        cfg = self.config
        tensors = {k: _tensor_json(v.data) for k, v in self.params.items()}
        emb = self.embedder
        if isinstance(emb, ToyEmbedder):
            emb_doc = {
                "variant": "toy",
                "vocab": sorted(emb.featurizer.vocab, key=emb.featurizer.vocab.get),
                "n_buckets": emb.featurizer.n_buckets,
                "seed": emb.seed,
                "lora": None if emb.lora is None else {"rank": emb.lora.rank, "alpha": emb.lora.alpha},
            }
            if emb.lora is not None:
                tensors["lora_a"] = _tensor_json(emb.lora.a.data)
                tensors["lora_b"] = _tensor_json(emb.lora.b.data)
        else:
            emb_doc = {"variant": "file", "path": self.meta.get("embedding_file"), "strict": emb.strict}
        return {
            "format_version": FORMAT_VERSION,
            "d_e": cfg.d_e, "d_p": cfg.d_p, "d_h": cfg.d_h, "heads": cfg.heads,
            "aggregator": cfg.variant, "ln_eps": cfg.ln_eps,
            "labels": list(self.labels),
            "embedder": emb_doc,
            "meta": self.meta,
            "tensors": tensors,
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()), encoding="utf-8")

    @classmethod
    def from_dict(cls, doc: dict, embedding_table: dict | None = None) -> OdorModel:
        if doc.get("format_version") != FORMAT_VERSION:
            raise CheckpointError(f"unsupported checkpoint format_version {doc.get('format_version')!r}")
        try:
            cfg = AggregatorConfig(
                d_e=doc["d_e"], d_p=doc["d_p"], d_h=doc["d_h"], heads=doc["heads"],
                n_labels=len(doc["labels"]), variant=doc.get("aggregator", "ca"),
                ln_eps=doc.get("ln_eps", 1e-5),
            )
            tensors = doc["tensors"]
            emb_doc = doc["embedder"]
        except KeyError as exc:
            raise CheckpointError(f"checkpoint missing field {exc}") from None
        params = {}
        for name, shape in cfg.shapes().items():
            if name not in tensors:
                raise CheckpointError(f"checkpoint missing tensor {name!r}")
            params[name] = parameter(_tensor_from_json(tensors[name], shape, name), name=name)
        if emb_doc["variant"] == "toy":
            vocab = {t: i for i, t in enumerate(emb_doc["vocab"])}
            feat = ToyFeaturizer(vocab, emb_doc["n_buckets"])
            embedder = ToyEmbedder(feat, projection_matrix(cfg.d_e, feat.dim, emb_doc["seed"]), emb_doc["seed"])
            if emb_doc.get("lora"):
                r, alpha = emb_doc["lora"]["rank"], emb_doc["lora"]["alpha"]
                a = _tensor_from_json(tensors["lora_a"], (r, feat.dim), "lora_a")
                b = _tensor_from_json(tensors["lora_b"], (cfg.d_e, r), "lora_b")
                embedder.lora = LoraAdapter(parameter(a, "lora_a"), parameter(b, "lora_b"), r, alpha)
        else:
            if embedding_table is None:
                path = emb_doc.get("path")
                if not path:
                    raise CheckpointError("file-backed checkpoint needs an embedding table")
                embedding_table, d_e = load_embedding_file(path)
                if d_e != cfg.d_e:
                    raise CheckpointError(f"embedding file d_e={d_e} but checkpoint d_e={cfg.d_e}")
            embedder = FileEmbedder(embedding_table, cfg.d_e, emb_doc.get("strict", True))
        return cls(cfg, params, embedder, list(doc["labels"]), dict(doc.get("meta", {})))

    @classmethod
    def load(cls, path: str | Path, embedding_table: dict | None = None) -> OdorModel:
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise CheckpointError(f"{path}: not valid JSON ({exc})") from None
        return cls.from_dict(doc, embedding_table)

    def copy_params(self) -> dict[str, np.ndarray]:
        out = {k: v.data.copy() for k, v in self.params.items()}
        if self.embedder.lora is not None:
            out.update({k: v.data.copy() for k, v in self.embedder.lora.parameters().items()})
        return out

    def load_params(self, snapshot: dict[str, np.ndarray]) -> None:
        targets = dict(self.params)
        if self.embedder.lora is not None:
            targets.update(self.embedder.lora.parameters())
        for k, v in snapshot.items():
            targets[k].data = v.copy()


def _tensor_json(a: np.ndarray) -> dict:
    return {"shape": list(a.shape), "data": [float(x) for x in a.reshape(-1)]}


def _tensor_from_json(doc: dict, shape: tuple[int, ...], name: str) -> np.ndarray:
    if tuple(doc.get("shape", ())) != tuple(shape):
        raise CheckpointError(f"tensor {name!r} has shape {doc.get('shape')}, expected {list(shape)}")
    data = np.asarray(doc["data"], dtype=np.float64)
    if data.size != int(np.prod(shape)):
        raise CheckpointError(f"tensor {name!r} holds {data.size} values for shape {list(shape)}")
    return data.reshape(shape)
