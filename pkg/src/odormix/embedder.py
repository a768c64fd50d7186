"""Per-molecule embeddings.

Two variants stand behind the same interface:

* ``file``: vectors produced elsewhere (e.g. by a pretrained chemical
  encoder), loaded from a TSV table keyed by normalized SMILES.
* ``toy``: a deterministic sparse featurizer (token counts plus hashed
  character trigrams) followed by a fixed random projection ``W_feat``.
  A low-rank adapter can be attached to ``W_feat``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .numerics import Tensor, parameter
from .smiles import Smiles, normalize, token_texts

log = logging.getLogger(__name__)

DEFAULT_D_E = 768
DEFAULT_BUCKETS = 512

_FNV_OFFSET = 0x811C9DC5
_FNV_PRIME = 0x01000193


class EmbedderError(ValueError):
    pass


class MissingEmbedding(EmbedderError, KeyError):
    pass


class FormatError(EmbedderError):
    pass


class DimensionMismatch(FormatError):
    pass


def fnv1a(data: bytes) -> int:
    h = _FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * _FNV_PRIME) & 0xFFFFFFFF
    return h


def _text(m: Smiles | str) -> str:
    return m.text if isinstance(m, Smiles) else m


@dataclass
class ToyFeaturizer:
    vocab: dict[str, int]
    n_buckets: int = DEFAULT_BUCKETS
    oov_count: int = field(default=0, compare=False)

    @classmethod
    def from_corpus(cls, molecules: Iterable[Smiles | str], n_buckets: int = DEFAULT_BUCKETS) -> ToyFeaturizer:
        tokens = sorted({t for m in molecules for t in token_texts(_text(m))})
        return cls({t: i for i, t in enumerate(tokens)}, n_buckets)

    @property
    def dim(self) -> int:
        return len(self.vocab) + self.n_buckets

    def counts(self, m: Smiles | str) -> np.ndarray:
        """Unnormalized token counts followed by trigram bucket counts."""
        text = _text(m)
        x = np.zeros(self.dim)
        for tok in token_texts(text):
            i = self.vocab.get(tok)
            if i is None:
                self.oov_count += 1
            else:
                x[i] += 1.0
        raw = text.encode("utf-8")
        for i in range(len(raw) - 2):
            x[len(self.vocab) + fnv1a(raw[i : i + 3]) % self.n_buckets] += 1.0
        return x

    def features(self, m: Smiles | str) -> np.ndarray:
        x = self.counts(m)
        norm = np.linalg.norm(x)
        return x / norm if norm > 0 else x


@dataclass
class LoraAdapter:
    """``delta = (alpha / rank) * B @ A`` added to a frozen weight."""

    a: Tensor
    b: Tensor
    rank: int = 4
    alpha: float = 8.0

    @classmethod
    def init(cls, d_in: int, d_out: int, rank: int = 4, alpha: float = 8.0,
             rng: np.random.Generator | None = None, std: float = 0.02) -> LoraAdapter:
        rng = rng or np.random.default_rng(0)
        a = parameter(rng.normal(0.0, std, size=(rank, d_in)), name="lora_a")
        b = parameter(np.zeros((d_out, rank)), name="lora_b")
        return cls(a, b, rank, alpha)

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    def delta(self) -> np.ndarray:
        return self.scale * (self.b.data @ self.a.data)

    def parameters(self) -> dict[str, Tensor]:
        return {"lora_a": self.a, "lora_b": self.b}

    @property
    def n_parameters(self) -> int:
        return self.a.data.size + self.b.data.size


@dataclass
class ToyEmbedder:
    featurizer: ToyFeaturizer
    w_feat: np.ndarray
    seed: int = 0
    lora: LoraAdapter | None = None
    variant: str = field(default="toy", init=False)

    @classmethod
    def create(cls, featurizer: ToyFeaturizer, d_e: int = DEFAULT_D_E, seed: int = 0) -> ToyEmbedder:
        return cls(featurizer, projection_matrix(d_e, featurizer.dim, seed), seed)

    @property
    def d_e(self) -> int:
        return self.w_feat.shape[0]

    def attach_lora(self, rank: int = 4, alpha: float = 8.0, rng: np.random.Generator | None = None) -> LoraAdapter:
        self.lora = LoraAdapter.init(self.featurizer.dim, self.d_e, rank, alpha, rng)
        return self.lora

    def effective_weight(self) -> np.ndarray:
        if self.lora is None:
            return self.w_feat
        return self.w_feat + self.lora.delta()

    def embed(self, m: Smiles | str) -> np.ndarray:
        return self.effective_weight() @ self.featurizer.features(m)


def projection_matrix(d_e: int, d_in: int, seed: int) -> np.ndarray:
    """The frozen random ``W_feat``; regenerated from the seed on load."""
    return np.random.default_rng([seed, 0x5EED]).standard_normal((d_e, d_in))


@dataclass
class FileEmbedder:
    table: dict[str, np.ndarray]
    d_e: int
    strict: bool = True
    variant: str = field(default="file", init=False)
    lora: None = field(default=None, init=False)

    def embed(self, m: Smiles | str) -> np.ndarray:
        key = _text(m)
        vec = self.table.get(key)
        if vec is None:
            if self.strict:
                raise MissingEmbedding(f"no embedding for {key!r}")
            log.warning("no embedding for %r, using zeros", key)
            return np.zeros(self.d_e)
        return vec


def embed(spec: ToyEmbedder | FileEmbedder, m: Smiles | str) -> np.ndarray:
    return spec.embed(m)


def _parse_header(line: str, key: str) -> str:
    parts = line.rstrip("\r\n").split("\t")
    if len(parts) != 2 or parts[0] != key:
        raise FormatError(f"expected header '{key}<TAB>...', got {line.strip()!r}")
    return parts[1]


def read_vector_table(path: str | Path, header_key: str) -> tuple[str, dict[str, np.ndarray], int]:
    """Read ``<smiles>\\t<v1>\\t...`` rows after a one-line header.

    Returns the raw header value, the table and the row width (or -1 when
    there are no rows).
    """
    table: dict[str, np.ndarray] = {}
    width = -1
    with open(path, encoding="utf-8") as fh:
        header = _parse_header(fh.readline(), header_key)
        for lineno, line in enumerate(fh, start=2):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            key, *values = line.split("\t")
            try:
                vec = np.array([float(v) for v in values])
            except ValueError as exc:
                raise FormatError(f"line {lineno}: non-numeric value ({exc})") from None
            if width < 0:
                width = vec.size
            if vec.size != width:
                raise FormatError(f"line {lineno}: expected {width} values, got {vec.size}")
            key = normalize(key).text
            if key in table:
                log.warning("line %d: duplicate entry for %r, keeping the last", lineno, key)
            table[key] = vec
    return header, table, width


def load_embedding_file(path: str | Path) -> tuple[dict[str, np.ndarray], int]:
    header, table, width = read_vector_table(path, "d_e")
    try:
        d_e = int(header)
    except ValueError:
        raise FormatError(f"bad d_e header value {header!r}") from None
    if width >= 0 and width != d_e:
        raise DimensionMismatch(f"rows have {width} values but d_e={d_e}")
    return table, d_e


def write_embedding_file(path: str | Path, table: Mapping[str, np.ndarray], d_e: int | None = None) -> None:
    rows = list(table.items())
    if d_e is None:
        d_e = len(rows[0][1]) if rows else 0
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"d_e\t{d_e}\n")
        for key, vec in rows:
            fh.write(key + "\t" + "\t".join(repr(float(v)) for v in vec) + "\n")
