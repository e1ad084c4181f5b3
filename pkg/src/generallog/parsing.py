"""Drain-style template mining over a fixed-depth prefix tree.

The tree has a length layer under the root, then ``depth - 2`` token layers,
then leaf groups holding candidate templates.  A line is matched against the
templates of its leaf group by :func:`seq_similarity`; the best match is merged
if it clears ``sim_threshold``, otherwise a new template is created.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .errors import EmptyLine, LengthMismatch, MalformedHeader

logger = logging.getLogger(__name__)

WILDCARD = "<*>"

#: Masks applied in order by default: HDFS block ids, IPv4 with optional port, hex, integers/decimals.
DEFAULT_MASKS: list[tuple[str, str]] = [
    (r"blk_-?\d+", WILDCARD),
    (r"/?\d{1,3}(?:\.\d{1,3}){3}(?::\d+)?", WILDCARD),
    (r"(?:(?<=[^A-Za-z0-9])|^)0x[0-9a-fA-F]+(?:(?=[^A-Za-z0-9])|$)", WILDCARD),
    (r"(?:(?<=[^A-Za-z0-9])|^)[-+]?\d+(?:\.\d+)?(?:(?=[^A-Za-z0-9])|$)", WILDCARD),
]


@dataclass
class LogTemplate:
    id: int
    tokens: list[str]
    occurrence_count: int = 1

    @property
    def text(self) -> str:
        return " ".join(self.tokens)

    @property
    def wildcard_count(self) -> int:
        return sum(1 for t in self.tokens if t == WILDCARD)


@dataclass
class ParsedEvent:
    line_number: int
    template_id: int
    parameters: list[str]
    raw_prefix_fields: dict[str, str] = field(default_factory=dict)


@dataclass
class ParseReport:
    lines_read: int = 0
    lines_parsed: int = 0
    skipped: dict[str, int] = field(default_factory=dict)

    def skip(self, reason: str) -> None:
        self.skipped[reason] = self.skipped.get(reason, 0) + 1

    @property
    def skipped_total(self) -> int:
        return sum(self.skipped.values())


@dataclass
class ParserConfig:
    depth: int = 4
    sim_threshold: float = 0.4
    max_children: int = 100
    masks: list[tuple[str, str]] = field(default_factory=lambda: list(DEFAULT_MASKS))
    header_pattern: str | None = None

    def __post_init__(self):
        if self.depth < 3:
            raise ValueError("depth must be at least 3")
        if self.max_children < 2:
            raise ValueError("max_children must be at least 2")
        if not 0.0 < self.sim_threshold <= 1.0:
            raise ValueError("sim_threshold must lie in (0, 1]")


def _compile_masks(masks):
    return [(re.compile(p) if isinstance(p, str) else p, r) for p, r in masks]


def split_header(raw: str, header_pattern, line_number: int = 0) -> tuple[dict[str, str], str]:
    """Split a raw line into its header fields and message content.

    ``header_pattern`` is a regex with a ``content`` named group; every other
    named group lands in the returned field map.  Without a pattern the whole
    line is content.
    """
    line = raw.rstrip("\r\n")
    if not line.strip():
        raise EmptyLine(f"line {line_number} is empty")
    if header_pattern is None:
        return {}, line.strip()
    if isinstance(header_pattern, str):
        header_pattern = re.compile(header_pattern)
    m = header_pattern.match(line)
    if m is None:
        raise MalformedHeader(line_number, raw)
    fields = {k: v for k, v in m.groupdict().items() if k != "content" and v is not None}
    return fields, m.group("content").strip()


def apply_masks(content: str, masks) -> str:
    for pattern, replacement in _compile_masks(masks):
        content = pattern.sub(replacement, content)
    return content


def preprocess_line(raw: str, masks, header_pattern=None, line_number: int = 0) -> str:
    """Strip the header and mask variable fields, returning the message content."""
    _, content = split_header(raw, header_pattern, line_number)
    return apply_masks(content, masks)


def seq_similarity(tokens: Sequence[str], template: LogTemplate | Sequence[str]) -> float:
    ttoks = template.tokens if isinstance(template, LogTemplate) else template
    if len(tokens) != len(ttoks):
        raise LengthMismatch(f"{len(tokens)} tokens vs template of length {len(ttoks)}")
    if not tokens:
        return 1.0
    same = sum(1 for a, b in zip(tokens, ttoks) if b == WILDCARD or a == b)
    return same / len(tokens)


def merge_tokens(tokens: Sequence[str], template_tokens: Sequence[str]) -> list[str]:
    return [t if t == s else WILDCARD for t, s in zip(template_tokens, tokens)]


def _has_digit(token: str) -> bool:
    return any(ch.isdigit() for ch in token)


class _Node:
    __slots__ = ("children", "template_ids")

    def __init__(self):
        self.children: dict[str, _Node] = {}
        self.template_ids: list[int] = []


class ParseTree:
    """Mutable Drain prefix tree; single writer."""

    def __init__(self, depth: int = 4, max_children: int = 100, sim_threshold: float = 0.4):
        ParserConfig(depth=depth, max_children=max_children, sim_threshold=sim_threshold)
        self.depth = depth
        self.max_children = max_children
        self.sim_threshold = sim_threshold
        self.root = _Node()
        self.templates: dict[int, LogTemplate] = {}

    @classmethod
    def from_config(cls, config: ParserConfig) -> "ParseTree":
        return cls(config.depth, config.max_children, config.sim_threshold)

    @property
    def token_layers(self) -> int:
        return self.depth - 2

    def _search_leaf(self, tokens: Sequence[str]) -> _Node | None:
        node = self.root.children.get(str(len(tokens)))
        if node is None:
            return None
        for token in tokens[: self.token_layers]:
            key = WILDCARD if _has_digit(token) else token
            child = node.children.get(key)
            if child is None:
                child = node.children.get(WILDCARD)
            if child is None:
                return None
            node = child
        return node

    def _leaf_for_new(self, tokens: Sequence[str]) -> _Node:
        length_key = str(len(tokens))
        node = self.root.children.setdefault(length_key, _Node())
        for token in tokens[: self.token_layers]:
            key = WILDCARD if _has_digit(token) else token
            children = node.children
            if key in children:
                node = children[key]
                continue
            if key == WILDCARD:
                node = children.setdefault(WILDCARD, _Node())
                continue
            # the wildcard child always keeps one slot in reserve
            has_wild = WILDCARD in children
            room = self.max_children - len(children) - (0 if has_wild else 1)
            if room > 0:
                node = children.setdefault(key, _Node())
            else:
                node = children.setdefault(WILDCARD, _Node())
        return node

    def best_match(self, tokens: Sequence[str]) -> tuple[LogTemplate | None, float]:
        leaf = self._search_leaf(tokens)
        if leaf is None:
            return None, 0.0
        best, best_sim = None, -1.0
        for tid in leaf.template_ids:
            tmpl = self.templates[tid]
            sim = seq_similarity(tokens, tmpl)
            if sim > best_sim:
                best, best_sim = tmpl, sim
        return best, max(best_sim, 0.0)

    def insert(self, tokens: Sequence[str]) -> int:
        """Match-or-create; returns the template id the tokens were assigned to."""
        if not tokens:
            raise ValueError("cannot insert an empty token list")
        tokens = list(tokens)
        best, sim = self.best_match(tokens)
        if best is not None and sim >= self.sim_threshold:
            best.tokens = merge_tokens(tokens, best.tokens)
            best.occurrence_count += 1
            return best.id
        tid = len(self.templates)
        self.templates[tid] = LogTemplate(tid, tokens, 1)
        self._leaf_for_new(tokens).template_ids.append(tid)
        return tid

    def template_list(self) -> list[LogTemplate]:
        return [self.templates[i] for i in sorted(self.templates)]


def insert(tree: ParseTree, tokens: Sequence[str]) -> tuple[int, ParseTree]:
    return tree.insert(tokens), tree


def parse_stream(
    lines: Iterable[str],
    config: ParserConfig | None = None,
    tree: ParseTree | None = None,
    report: ParseReport | None = None,
) -> tuple[list[ParsedEvent], list[LogTemplate]]:
    """Mine templates from ``lines``; bad lines are counted in ``report`` and skipped.

    Pass an existing ``tree`` to keep mining into a shared template space; the
    returned template list is then that tree's full set.  Parameters are read
    off the final templates, so every event's parameter count matches the
    wildcard count of its template.
    """
    config = config or ParserConfig()
    tree = tree or ParseTree.from_config(config)
    report = report if report is not None else ParseReport()
    masks = _compile_masks(config.masks)
    header = re.compile(config.header_pattern) if config.header_pattern else None

    pending = []
    for line_number, raw in enumerate(lines, start=1):
        report.lines_read += 1
        try:
            fields, content = split_header(raw, header, line_number)
        except EmptyLine:
            report.skip("empty")
            continue
        except MalformedHeader:
            report.skip("malformed_header")
            continue
        masked = apply_masks(content, masks).split()
        if not masked:
            report.skip("empty")
            continue
        raw_tokens = content.split()
        tid = tree.insert(masked)
        pending.append((line_number, tid, raw_tokens, masked, fields))
        report.lines_parsed += 1

    if report.skipped_total:
        logger.warning("skipped %d of %d lines: %s", report.skipped_total, report.lines_read, report.skipped)

    events = []
    for line_number, tid, raw_tokens, masked, fields in pending:
        ttoks = tree.templates[tid].tokens
        source = raw_tokens if len(raw_tokens) == len(masked) else masked
        params = [tok for tok, slot in zip(source, ttoks) if slot == WILDCARD]
        events.append(ParsedEvent(line_number, tid, params, fields))
    return events, tree.template_list()


def write_templates(path, templates: Iterable[LogTemplate]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for t in templates:
            fh.write(f"{t.id}\t{' '.join(t.tokens)}\n")


def read_templates(path) -> list[LogTemplate]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            tid, text = line.split("\t", 1)
            out.append(LogTemplate(int(tid), text.split(" "), 1))
    return out


def write_events(path, events: Iterable[ParsedEvent]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for e in events:
            fh.write(f"{e.line_number}\t{e.template_id}\t{chr(0x1F).join(e.parameters)}\n")


def read_events(path) -> list[ParsedEvent]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            ln, tid, params = line.split("\t", 2)
            out.append(ParsedEvent(int(ln), int(tid), params.split(chr(0x1F)) if params else []))
    return out
