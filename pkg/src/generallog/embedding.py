"""Template embeddings in one vector space shared by every system.

An event vector is the IDF-weighted mean of the word vectors of the
template's words.  Because the word table and the weighting are the only
inputs, the same template text embeds identically whichever system it came
from.
"""

from __future__ import annotations

import hashlib
import math
import re
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import EmptyCorpus, EmptySequence, UnknownTemplate
from .parsing import WILDCARD, LogTemplate

_SPLIT = re.compile(r"[^A-Za-z0-9]+")
_CAMEL = re.compile(r"[A-Z]+(?=[A-Z][a-z])|[A-Z]?[a-z]+|[A-Z]+|[0-9]+")


def tokenize_template(template: LogTemplate | Sequence[str]) -> list[str]:
    tokens = template.tokens if isinstance(template, LogTemplate) else template
    words = []
    for tok in tokens:
        if tok == WILDCARD:
            continue
        for piece in _SPLIT.split(tok):
            for w in _CAMEL.findall(piece):
                if w.isdigit():
                    continue
                words.append(w.lower())
    return words


def hash_vector(token: str, d: int) -> np.ndarray:
    """Unit vector determined only by ``token`` and ``d``."""
    seed = int.from_bytes(hashlib.sha256(token.encode("utf-8")).digest()[:8], "little")
    v = np.random.Generator(np.random.PCG64(seed)).standard_normal(d)
    return v / np.linalg.norm(v)


class WordVectorTable:
    def __init__(self, d: int, entries: Mapping[str, np.ndarray] | None = None,
                 fallback_mode: str = "hash_deterministic"):
        if d < 1:
            raise ValueError("dimension must be positive")
        if fallback_mode not in ("hash_deterministic", "zero"):
            raise ValueError(f"unknown fallback mode {fallback_mode!r}")
        self.d = d
        self.fallback_mode = fallback_mode
        self.entries: dict[str, np.ndarray] = {}
        for tok, vec in (entries or {}).items():
            vec = np.asarray(vec, dtype=np.float64)
            if vec.shape != (d,) or not np.all(np.isfinite(vec)):
                raise ValueError(f"bad vector for {tok!r}")
            self.entries[tok.lower()] = vec
        self._cache: dict[str, np.ndarray] = {}

    def __contains__(self, token: str) -> bool:
        return token.lower() in self.entries

    def vector(self, token: str) -> np.ndarray:
        token = token.lower()
        vec = self.entries.get(token)
        if vec is not None:
            return vec
        vec = self._cache.get(token)
        if vec is None:
            if self.fallback_mode == "zero":
                vec = np.zeros(self.d)
            else:
                vec = hash_vector(token, self.d)
            self._cache[token] = vec
        return vec

    @classmethod
    def load(cls, path, fallback_mode: str = "hash_deterministic") -> "WordVectorTable":
        """Read ``token v1 .. vd`` lines; an optional ``N d`` header is skipped."""
        entries = {}
        d = None
        with open(path, encoding="utf-8") as fh:
            for i, line in enumerate(fh):
                parts = line.split()
                if not parts:
                    continue
                if i == 0 and len(parts) == 2 and all(p.isdigit() for p in parts):
                    d = int(parts[1])
                    continue
                if d is None:
                    d = len(parts) - 1
                if len(parts) - 1 != d:
                    raise ValueError(f"{path}:{i + 1}: expected {d} components, got {len(parts) - 1}")
                entries[parts[0]] = np.array([float(x) for x in parts[1:]])
        if d is None:
            raise ValueError(f"{path}: no vectors")
        return cls(d, entries, fallback_mode)


@dataclass
class IdfWeights:
    weights: dict[str, float]
    default: float

    def __call__(self, token: str) -> float:
        return self.weights.get(token, self.default)


def build_idf(templates: Sequence[LogTemplate]) -> IdfWeights:
    if not templates:
        raise EmptyCorpus("cannot compute IDF over zero templates")
    n = len(templates)
    df: dict[str, int] = {}
    for t in templates:
        for w in set(tokenize_template(t)):
            df[w] = df.get(w, 0) + 1
    weights = {w: math.log((1 + n) / (1 + c)) + 1.0 for w, c in df.items()}
    default = max(weights.values()) if weights else 1.0
    return IdfWeights(weights, default)


@dataclass
class EventEmbedding:
    template_id: int
    vector: np.ndarray
    norm: float = field(init=False)
    empty: bool = False

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=np.float64)
        self.norm = float(np.linalg.norm(self.vector))


def embed_event(template: LogTemplate, table: WordVectorTable, idf: IdfWeights) -> EventEmbedding:
    words = tokenize_template(template)
    if not words:
        return EventEmbedding(template.id, np.zeros(table.d), empty=True)
    acc = np.zeros(table.d)
    total = 0.0
    for w in words:
        weight = idf(w)
        acc += weight * table.vector(w)
        total += weight
    return EventEmbedding(template.id, acc / total)


def embed_templates(templates: Sequence[LogTemplate], table: WordVectorTable,
                    idf: IdfWeights | None = None) -> dict[int, EventEmbedding]:
    idf = idf or build_idf(templates)
    return {t.id: embed_event(t, table, idf) for t in templates}


def embed_sequence(template_ids: Sequence[int], embeddings: Mapping[int, EventEmbedding]) -> np.ndarray:
    ids = getattr(template_ids, "template_ids", template_ids)
    if len(ids) == 0:
        raise EmptySequence("cannot embed an empty sequence")
    acc = None
    for tid in ids:
        emb = embeddings.get(tid)
        if emb is None:
            raise UnknownTemplate(tid)
        acc = emb.vector.copy() if acc is None else acc + emb.vector
    return acc / len(ids)


def format_vector(v: Iterable[float]) -> str:
    return " ".join(repr(float(x)) for x in v)


def write_embeddings(path, embeddings: Mapping[int, EventEmbedding]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for tid in sorted(embeddings):
            fh.write(f"{tid}\t{format_vector(embeddings[tid].vector)}\n")


def read_embeddings(path) -> dict[int, EventEmbedding]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            tid, vec = line.split("\t", 1)
            arr = np.array([float(x) for x in vec.split()])
            out[int(tid)] = EventEmbedding(int(tid), arr, empty=not np.any(arr))
    return out
