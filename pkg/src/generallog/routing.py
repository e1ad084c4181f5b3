"""Training-free routing of target sequences into General and Proprietary.

Each event scores the best cosine it reaches against any source-system event;
a sequence scores the worst of its events.  Sequences at or above the
threshold are General.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .embedding import EventEmbedding
from .errors import DimensionMismatch, EmptyIndex, EmptySequence, GeneralLogError, UnknownTemplate

logger = logging.getLogger(__name__)

GENERAL = "General"
PROPRIETARY = "Proprietary"


def cosine(v, u) -> float:
    v = np.asarray(v, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    if v.shape != u.shape:
        raise DimensionMismatch(f"{v.shape} vs {u.shape}")
    nv = float(np.linalg.norm(v))
    nu = float(np.linalg.norm(u))
    if nv == 0.0 or nu == 0.0:
        return 0.0
    return float(np.clip(np.dot(v, u) / (nv * nu), -1.0, 1.0))


@dataclass
class RouterConfig:
    tau: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError(f"tau must lie in [0, 1], got {self.tau}")


class SourceEmbeddingIndex:
    """Immutable exact-search index over the source system's event vectors."""

    def __init__(self, vectors: Sequence[EventEmbedding | np.ndarray], built_from: str = "source"):
        arrs = [np.asarray(getattr(v, "vector", v), dtype=np.float64) for v in vectors]
        self.built_from = built_from
        self.m = len(arrs)
        if arrs:
            dims = {a.shape for a in arrs}
            if len(dims) != 1:
                raise DimensionMismatch(f"source vectors disagree in shape: {sorted(dims)}")
            self.matrix = np.vstack(arrs)
        else:
            self.matrix = np.zeros((0, 0))
        self.norms = np.linalg.norm(self.matrix, axis=1) if self.m else np.zeros(0)
        self.matrix.setflags(write=False)

    @property
    def d(self) -> int:
        return self.matrix.shape[1] if self.m else 0

    def __len__(self) -> int:
        return self.m

    @classmethod
    def from_sequences(cls, sequences, embeddings: Mapping[int, EventEmbedding], built_from="source"):
        ids = sorted({tid for s in sequences for tid in s.template_ids})
        return cls([embeddings[i] for i in ids], built_from)


def event_similarity(v: EventEmbedding | np.ndarray, index: SourceEmbeddingIndex) -> float:
    if index.m == 0:
        raise EmptyIndex("source index is empty")
    vec = np.asarray(getattr(v, "vector", v), dtype=np.float64)
    if vec.shape != (index.d,):
        raise DimensionMismatch(f"event has shape {vec.shape}, index has d={index.d}")
    nv = float(np.linalg.norm(vec))
    if nv == 0.0:
        return 0.0
    dots = index.matrix @ vec
    denom = index.norms * nv
    sims = np.zeros(index.m)
    ok = denom > 0
    sims[ok] = dots[ok] / denom[ok]
    return float(np.clip(sims.max(), -1.0, 1.0))


@dataclass
class RouteDecision:
    sequence_id: str
    score: float
    route: str
    argmin_event_index: int
    per_event_scores: list[float] = field(default_factory=list)
    error: str | None = None


class _SimCache:
    def __init__(self, index, embeddings):
        self.index = index
        self.embeddings = embeddings
        self.cache: dict[int, float] = {}

    def __call__(self, tid: int) -> float:
        s = self.cache.get(tid)
        if s is None:
            emb = self.embeddings.get(tid)
            if emb is None:
                raise UnknownTemplate(tid)
            s = event_similarity(emb, self.index)
            self.cache[tid] = s
        return s


def sequence_similarity(seq, index: SourceEmbeddingIndex, embeddings, _sim=None):
    """Return ``(score, per_event_scores, argmin_index)``; ties pick the earliest event."""
    ids = getattr(seq, "template_ids", seq)
    if len(ids) == 0:
        raise EmptySequence("cannot score an empty sequence")
    if index.m == 0:
        raise EmptyIndex("source index is empty")
    sim = _sim or _SimCache(index, embeddings)
    scores = [sim(tid) for tid in ids]
    argmin = int(np.argmin(scores))
    return scores[argmin], scores, argmin


def route(seq, index, embeddings, config: RouterConfig, _sim=None) -> RouteDecision:
    score, scores, argmin = sequence_similarity(seq, index, embeddings, _sim)
    label = GENERAL if score >= config.tau else PROPRIETARY
    return RouteDecision(getattr(seq, "id", ""), score, label, argmin, scores)


def route_corpus(seqs, index, embeddings, config: RouterConfig):
    """Partition ``seqs`` into (general, proprietary, decisions), preserving order.

    A sequence that cannot be scored is routed Proprietary with score -1 and
    the failure recorded on its decision.
    """
    sim = _SimCache(index, embeddings)
    general, proprietary, decisions = [], [], []
    for seq in seqs:
        try:
            dec = route(seq, index, embeddings, config, sim)
        except GeneralLogError as exc:
            logger.warning("routing %s failed: %s", getattr(seq, "id", "?"), exc)
            dec = RouteDecision(getattr(seq, "id", ""), -1.0, PROPRIETARY, -1, [], str(exc))
        decisions.append(dec)
        (general if dec.route == GENERAL else proprietary).append(seq)
    return general, proprietary, decisions


def write_decisions(path, decisions: Sequence[RouteDecision]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for d in decisions:
            fh.write(f"{d.sequence_id}\t{d.score:.6f}\t{d.route}\t{d.argmin_event_index}\n")


def read_decisions(path) -> list[RouteDecision]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if line:
                sid, score, label, argmin = line.split("\t")
                out.append(RouteDecision(sid, float(score), label, int(argmin)))
    return out
