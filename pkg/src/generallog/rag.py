"""LLM detection for proprietary sequences, guided by a retrieval knowledge base.

The knowledge base holds target-system General sequences labelled by the
small model.  For each proprietary sequence the nearest entries are placed in
a fixed prompt and the model's one-word answer is parsed into a label.
"""

from __future__ import annotations

import logging
import os
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import httpx
import numpy as np

from .embedding import embed_sequence, format_vector
from .errors import GeneralLogError, UnparseableVerdict

logger = logging.getLogger(__name__)

LOW_CONFIDENCE_BAND = (0.4, 0.6)
CLOSING_LINE = "Answer with exactly one word: NORMAL or ANOMALY."
NO_EXAMPLES = "No reference examples available."
LABEL_WORD = {0: "NORMAL", 1: "ANOMALY"}


@dataclass
class KnowledgeBaseEntry:
    sequence_id: str
    embedding: np.ndarray
    rendered_text: str
    predicted_label: int
    confidence: float


class KnowledgeBase:
    def __init__(self, entries: Sequence[KnowledgeBaseEntry] = ()):
        self.entries = list(entries)
        if self.entries:
            self.matrix = np.vstack([e.embedding for e in self.entries])
            self.norms = np.linalg.norm(self.matrix, axis=1)
        else:
            self.matrix = np.zeros((0, 0))
            self.norms = np.zeros(0)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for e in self.entries:
                text = e.rendered_text.replace("\\", "\\\\").replace("\t", "\\t").replace("\n", "\\n")
                fh.write(f"{e.sequence_id}\t{e.predicted_label}\t{e.confidence:.6f}\t"
                         f"{format_vector(e.embedding)}\t{text}\n")

    @classmethod
    def load(cls, path) -> "KnowledgeBase":
        entries = []
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.rstrip("\n")
                if not line:
                    continue
                sid, label, conf, vec, text = line.split("\t", 4)
                text = re.sub(r"\\(.)", lambda m: {"t": "\t", "n": "\n"}.get(m.group(1), m.group(1)), text)
                entries.append(KnowledgeBaseEntry(sid, np.array([float(x) for x in vec.split()]), text,
                                                  int(label), float(conf)))
        return cls(entries)


def render_sequence(template_ids: Sequence[int], templates: Mapping[int, object]) -> str:
    parts = []
    for tid in template_ids:
        t = templates.get(tid)
        parts.append(" ".join(t.tokens) if t is not None else f"<template {tid}>")
    return " | ".join(parts)


def build_kb(general, predictions, embeddings, templates: Mapping[int, object],
             band: tuple[float, float] = LOW_CONFIDENCE_BAND) -> KnowledgeBase:
    """One entry per General sequence, minus those whose confidence lies inside ``band``."""
    if len(general) != len(predictions):
        raise ValueError(f"{len(general)} sequences but {len(predictions)} predictions")
    lo, hi = band
    entries = []
    for seq, (prob, label) in zip(general, predictions):
        if lo <= prob <= hi:
            continue
        entries.append(KnowledgeBaseEntry(
            seq.id,
            embed_sequence(seq.template_ids, embeddings),
            render_sequence(seq.template_ids, templates),
            int(label),
            float(prob),
        ))
    return KnowledgeBase(entries)


def retrieve(kb: KnowledgeBase, query, k: int) -> list[tuple[KnowledgeBaseEntry, float]]:
    """Exact top-``k`` entries by cosine; equal similarities order by sequence id."""
    if k < 1:
        raise ValueError("k must be at least 1")
    if len(kb) == 0:
        return []
    q = np.asarray(query, dtype=np.float64)
    nq = float(np.linalg.norm(q))
    sims = np.zeros(len(kb))
    if nq > 0:
        ok = kb.norms > 0
        sims[ok] = np.clip(kb.matrix[ok] @ q / (kb.norms[ok] * nq), -1.0, 1.0)
    order = sorted(range(len(kb)), key=lambda i: (-sims[i], kb.entries[i].sequence_id))
    return [(kb.entries[i], float(sims[i])) for i in order[:k]]


def build_prompt(rendered: str, neighbors: Sequence[tuple[KnowledgeBaseEntry, float]]) -> str:
    lines = [
        "You are analysing logs from a software system for anomalies.",
        "Reference sequences from the same system, labelled by a detector trained on a related system:",
    ]
    if neighbors:
        for entry, sim in neighbors:
            lines.append(f"similarity={sim:.6f} label={LABEL_WORD[entry.predicted_label]} text={entry.rendered_text}")
    else:
        lines.append(NO_EXAMPLES)
    lines.append("Target sequence:")
    lines.append(rendered)
    lines.append(CLOSING_LINE)
    return "\n".join(lines) + "\n"


_WORD = re.compile(r"\b(ANOMALY|NORMAL)\b", re.IGNORECASE)


def parse_verdict(response: str) -> int:
    """Last non-empty line decides; otherwise the first NORMAL/ANOMALY anywhere in the text."""
    lines = [ln for ln in (response or "").splitlines() if ln.strip()]
    if lines:
        last = re.sub(r"[^\w]", "", lines[-1]).upper()
        if last == "ANOMALY":
            return 1
        if last == "NORMAL":
            return 0
    m = _WORD.search(response or "")
    if m is None:
        raise UnparseableVerdict(response)
    return 1 if m.group(1).upper() == "ANOMALY" else 0


_NEIGHBOR = re.compile(r"^similarity=(-?\d+(?:\.\d+)?) label=(NORMAL|ANOMALY) text=")


def mock_llm(prompt: str) -> str:
    """Answer with the label of the most similar reference; ties go to the tied majority, then ANOMALY."""
    if CLOSING_LINE not in prompt:
        return "malformed prompt"
    refs = []
    for line in prompt.splitlines():
        m = _NEIGHBOR.match(line)
        if m:
            refs.append((float(m.group(1)), m.group(2)))
    if not refs:
        return "ANOMALY"
    best = max(s for s, _ in refs)
    tied = [label for s, label in refs if s == best]
    n_anom = tied.count("ANOMALY")
    return "NORMAL" if len(tied) - n_anom > n_anom else "ANOMALY"


class MockLlmClient:
    """Deterministic stand-in for a chat model; see :func:`mock_llm`."""

    source = "mock"

    def __init__(self):
        self.calls = 0

    def complete(self, prompt: str) -> str:
        self.calls += 1
        return mock_llm(prompt)


@dataclass
class LlmClientConfig:
    endpoint: str = "http://localhost:8000/v1/chat/completions"
    model: str = "qwen3"
    api_key_env: str = "GENERALLOG_API_KEY"
    temperature: float = 0.0
    timeout: float = 60.0
    max_retries: int = 2
    max_in_flight: int = 4

    def __post_init__(self):
        if self.temperature != 0:
            raise ValueError("temperature is pinned to 0")
        if self.max_retries < 0:
            raise ValueError("max_retries must be non-negative")


class ChatCompletionsClient:
    """POSTs a single user message to a chat-completions endpoint."""

    source = "llm"

    def __init__(self, config: LlmClientConfig, transport: httpx.BaseTransport | None = None):
        self.config = config
        self.calls = 0
        headers = {}
        key = os.environ.get(config.api_key_env) if config.api_key_env else None
        if key:
            headers["Authorization"] = f"Bearer {key}"
        self._http = httpx.Client(timeout=config.timeout, headers=headers, transport=transport)

    def request_body(self, prompt: str) -> dict:
        return {
            "model": self.config.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": 0,
        }

    def complete(self, prompt: str) -> str:
        self.calls += 1
        resp = self._http.post(self.config.endpoint, json=self.request_body(prompt))
        resp.raise_for_status()
        return resp.json()["choices"][0]["message"]["content"]

    def close(self) -> None:
        self._http.close()


@dataclass
class Verdict:
    sequence_id: str
    label: int
    source: str
    raw_response: str
    neighbors_used: list[tuple[str, float]] = field(default_factory=list)
    flagged: bool = False
    note: str = ""


def detect_proprietary(seq, kb: KnowledgeBase, client, embeddings, k: int = 5,
                       templates: Mapping[int, object] | None = None, max_retries: int = 2,
                       backoff: float = 0.0) -> Verdict:
    """Never raises: failures become flagged verdicts with the conservative label 1."""
    source = getattr(client, "source", "llm")
    try:
        query = embed_sequence(seq.template_ids, embeddings)
    except GeneralLogError as exc:
        return Verdict(seq.id, 1, source, "", [], True, f"embedding failed: {exc}")
    neighbors = retrieve(kb, query, k)
    used = [(e.sequence_id, s) for e, s in neighbors]
    prompt = build_prompt(render_sequence(seq.template_ids, templates or {}), neighbors)

    raw, note = "", ""
    for attempt in range(max_retries + 1):
        try:
            raw = client.complete(prompt)
        except (httpx.HTTPError, KeyError, IndexError, TypeError, ValueError) as exc:
            note = f"transport error: {exc}"
            logger.warning("%s: LLM call %d failed: %s", seq.id, attempt + 1, exc)
            if backoff:
                time.sleep(backoff * (2 ** attempt))
            continue
        try:
            return Verdict(seq.id, parse_verdict(raw), source, raw, used)
        except UnparseableVerdict:
            note = "unparseable response"
    return Verdict(seq.id, 1, source, raw, used, True, note)


def detect_many(seqs, kb, client, embeddings, k=5, templates=None, max_retries=2, max_in_flight=1):
    """Verdicts in input order; up to ``max_in_flight`` requests run at once."""
    def one(s):
        return detect_proprietary(s, kb, client, embeddings, k, templates, max_retries)

    if max_in_flight <= 1 or len(seqs) <= 1:
        return [one(s) for s in seqs]
    with ThreadPoolExecutor(max_workers=max_in_flight) as pool:
        return list(pool.map(one, seqs))
