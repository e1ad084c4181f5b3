"""Log sequences, dataset loaders and the synthetic cross-system corpus."""

from __future__ import annotations

import csv
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, EmptyCorpus
from .parsing import LogTemplate, ParsedEvent, ParseReport, ParserConfig, ParseTree, parse_stream

logger = logging.getLogger(__name__)

HDFS_SESSION = r"blk_-?\d+"
HDFS_HEADER = r"^(?P<date>\d{6}) (?P<time>\d{6}) (?P<pid>\d+) (?P<level>\w+) (?P<component>\S+): (?P<content>.*)$"
BGL_HEADER = (r"^(?P<label>\S+) (?P<timestamp>\d+) (?P<date>\S+) (?P<node>\S+) (?P<time>\S+) "
              r"(?P<node_repeat>\S+) (?P<type>\S+) (?P<component>\S+) (?P<level>\S+) (?P<content>.*)$")
SYNTH_TARGET_HEADER = r"^(?P<date>\S+) (?P<session>job_\d+) (?P<component>\S+) (?P<level>\w+) (?P<content>.*)$"
SYNTH_TARGET_SESSION = r"job_\d+"


@dataclass
class LogSequence:
    id: str
    template_ids: list[int]
    system: str = ""
    truth_label: int | None = None

    def __len__(self):
        return len(self.template_ids)


@dataclass
class LoadReport:
    lines_skipped: int = 0
    unlabeled: list[str] = field(default_factory=list)
    windows_dropped: int = 0
    parse: ParseReport = field(default_factory=ParseReport)


@dataclass
class LoadedCorpus:
    sequences: list[LogSequence]
    events: list[ParsedEvent]
    templates: list[LogTemplate]
    report: LoadReport


def read_labels(path) -> dict[str, int]:
    """Two-column ``BlockId,Label`` table with labels ``Normal``/``Anomaly``."""
    labels = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.reader(fh):
            if not row or row[0] in ("BlockId", "SessionId"):
                continue
            key, value = row[0].strip(), row[1].strip()
            if value not in ("Normal", "Anomaly"):
                raise ConfigError(f"{path}: unknown label {value!r} for {key}")
            labels[key] = 1 if value == "Anomaly" else 0
    return labels


def _read_lines(path) -> list[str]:
    with open(path, encoding="utf-8") as fh:
        return fh.read().splitlines()


def load_sessions(
    log_path,
    labels_path=None,
    session_pattern: str = HDFS_SESSION,
    parser: ParserConfig | None = None,
    tree: ParseTree | None = None,
    system: str = "",
) -> LoadedCorpus:
    """Group parsed lines into sessions keyed by the first ``session_pattern`` match.

    Sessions keep first-appearance order.  With a labels file, sessions
    missing from it are excluded and listed in the report.
    """
    parser = parser or ParserConfig()
    lines = _read_lines(log_path)
    report = LoadReport()
    events, templates = parse_stream(lines, parser, tree, report.parse)
    key_re = re.compile(session_pattern)

    sessions: dict[str, list[int]] = {}
    for ev in events:
        m = key_re.search(lines[ev.line_number - 1])
        if m is None:
            report.lines_skipped += 1
            continue
        sessions.setdefault(m.group(0), []).append(ev.template_id)

    labels = read_labels(labels_path) if labels_path else None
    seqs = []
    for key, ids in sessions.items():
        label = None
        if labels is not None:
            if key not in labels:
                report.unlabeled.append(key)
                continue
            label = labels[key]
        seqs.append(LogSequence(key, ids, system, label))
    if report.unlabeled:
        logger.warning("%d sessions have no label and were excluded", len(report.unlabeled))
    return LoadedCorpus(seqs, events, templates, report)


def load_hdfs(log_path, labels_path, parser: ParserConfig | None = None, tree: ParseTree | None = None,
              system: str = "hdfs") -> LoadedCorpus:
    if parser is None:
        parser = ParserConfig(header_pattern=HDFS_HEADER)
    return load_sessions(log_path, labels_path, HDFS_SESSION, parser, tree, system)


def window_bounds(n: int, window: int, stride: int) -> tuple[list[tuple[int, int]], int]:
    """Window ``[start, end)`` bounds over ``n`` events, and how many partial windows were dropped.

    A trailing partial window survives when it holds at least ``window / 2`` events.
    """
    if window < 1 or stride < 1:
        raise ValueError("window and stride must be at least 1")
    bounds, dropped = [], 0
    start = 0
    while start < n:
        end = min(start + window, n)
        if end - start == window or end - start >= window / 2:
            bounds.append((start, end))
        else:
            dropped += 1
        if end == n:
            break
        start += stride
    return bounds, dropped


def load_bgl(log_path, window: int = 100, stride: int = 100, parser: ParserConfig | None = None,
             tree: ParseTree | None = None, system: str = "bgl") -> LoadedCorpus:
    """Fixed-size windows over BGL events; a window is anomalous if any member line is."""
    parser = parser or ParserConfig(header_pattern=BGL_HEADER)
    lines = _read_lines(log_path)
    if not any(line.strip() for line in lines):
        raise EmptyCorpus(f"{log_path} is empty")
    report = LoadReport()
    events, templates = parse_stream(lines, parser, tree, report.parse)
    flags = [0 if lines[ev.line_number - 1].split(" ", 1)[0] == "-" else 1 for ev in events]
    bounds, report.windows_dropped = window_bounds(len(events), window, stride)
    seqs = [
        LogSequence(f"w{start}", [ev.template_id for ev in events[start:end]], system, int(any(flags[start:end])))
        for start, end in bounds
    ]
    return LoadedCorpus(seqs, events, templates, report)


# --- synthetic cross-system corpus -------------------------------------------------

SHARED_NORMAL = [
    "BLOCK* NameSystem.allocateBlock: {path} {blk}",
    "Receiving block {blk} src: {ip} dest: {ip}",
    "Received block {blk} of size {num} from {ip}",
    "PacketResponder {num} for block {blk} terminating",
    "BLOCK* NameSystem.addStoredBlock: blockMap updated: {ip} is added to {blk} size {num}",
    "Verification succeeded for {blk}",
    "{ip} Served block {blk} to {ip}",
    "{ip} Starting thread to transfer block {blk} to {ip}",
    "Transmitted block {blk} to {ip}",
    "BLOCK* ask {ip} to replicate {blk} to datanode(s) {ip}",
    "Deleting block {blk} file {path}",
    "BLOCK* NameSystem.delete: {blk} is added to invalidSet of {ip}",
]

SHARED_ANOMALY = [
    "writeBlock {blk} received exception java.io.IOException: Connection reset by peer",
    "Exception in receiveBlock for block {blk} java.io.IOException: Connection reset by peer",
    "PacketResponder {blk} {num} Exception java.io.InterruptedIOException: Interrupted while waiting for IO on channel",
    "{ip} Got exception while serving {blk} to {ip}",
    "Unexpected error trying to delete block {blk}. BlockInfo not found in volumeMap.",
]

# Target-only templates.  The normal ones borrow vocabulary from the shared
# anomaly pool ("exception", "connection reset by peer") but describe routine,
# self-healing events on the target system; each stays below 0.5 cosine to
# every source template so proprietary sessions route away from the small model.
PROPRIETARY_NORMAL = [
    "ciod: CioStream socket connection reset by peer, reconnected after {num} ms",
    "ddr: correctable exception on rank {num}, redundant bit steering activated",
    "got interrupted exception while waiting for idle timer, resuming",
    "IOException in control stream recovered by ciod retry",
    "exception trying to read sensor, using cached value",
    "connection reset by peer on service node, session resumed",
]

PROPRIETARY_ANOMALY = [
    "rts: kernel terminated for reason {num}, job aborted",
    "Lustre mount FAILED : {binpath} : block device error while receiving block",
    "data TLB error interrupt exception trying to read block",
    "ciod: failed to read message prefix, IOException on control stream",
]


@dataclass
class SynthSpec:
    n_source: int = 2000
    n_target: int = 2000
    anomaly_rate: float = 0.1
    proprietary_fraction: float = 0.3
    burst: tuple[int, int] = (3, 5)
    shared_normal: list[str] = field(default_factory=lambda: list(SHARED_NORMAL))
    shared_anomaly: list[str] = field(default_factory=lambda: list(SHARED_ANOMALY))
    proprietary_normal: list[str] = field(default_factory=lambda: list(PROPRIETARY_NORMAL))
    proprietary_anomaly: list[str] = field(default_factory=lambda: list(PROPRIETARY_ANOMALY))

    def validate(self) -> None:
        if not 0.0 <= self.anomaly_rate < 1.0:
            raise ConfigError("anomaly_rate must lie in [0, 1)")
        if not 0.0 <= self.proprietary_fraction <= 1.0:
            raise ConfigError("proprietary_fraction must lie in [0, 1]")
        if self.n_source < 1 or self.n_target < 1:
            raise ConfigError("corpus sizes must be positive")
        if not self.shared_normal or (self.anomaly_rate > 0 and not self.shared_anomaly):
            raise ConfigError("shared pool needs normal templates, and anomaly templates when anomaly_rate > 0")
        shared = set(self.shared_normal) | set(self.shared_anomaly)
        prop = set(self.proprietary_normal) | set(self.proprietary_anomaly)
        if shared & prop:
            raise ConfigError("shared and proprietary pools overlap")
        if self.proprietary_anomaly and not self.proprietary_normal:
            raise ConfigError("proprietary anomalies need proprietary normal templates")


@dataclass
class SynthSession:
    id: str
    lines: list[str]
    label: int
    proprietary: bool


@dataclass
class SynthCorpus:
    source: list[SynthSession]
    target: list[SynthSession]
    spec: SynthSpec
    seed: int

    def write(self, out_dir) -> dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {
            "source_log": out / "source.log",
            "source_labels": out / "source_labels.csv",
            "target_log": out / "target.log",
            "target_labels": out / "target_labels.csv",
        }
        for side, sessions in (("source", self.source), ("target", self.target)):
            with open(paths[f"{side}_log"], "w", encoding="utf-8") as fh:
                for session in sessions:
                    fh.writelines(line + "\n" for line in session.lines)
            with open(paths[f"{side}_labels"], "w", encoding="utf-8", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["BlockId", "Label"])
                for s in sessions:
                    w.writerow([s.id, "Anomaly" if s.label else "Normal"])
        return paths


class _Filler:
    def __init__(self, rng: np.random.Generator):
        self.rng = rng

    def __call__(self, template: str, blk: str) -> str:
        r = self.rng

        def ip():
            return f"/10.{r.integers(0, 256)}.{r.integers(0, 256)}.{r.integers(1, 255)}:{r.integers(1024, 65536)}"

        out = template
        out = out.replace("{blk}", blk)
        while "{ip}" in out:
            out = out.replace("{ip}", ip(), 1)
        while "{num}" in out:
            out = out.replace("{num}", str(int(r.integers(0, 100000))), 1)
        while "{hex}" in out:
            out = out.replace("{hex}", f"0x{int(r.integers(0, 2**32)):08x}", 1)
        while "{binpath}" in out:
            out = out.replace("{binpath}", f"/bgl/apps/job{int(r.integers(0, 10000))}/raptor", 1)
        while "{path}" in out:
            out = out.replace("{path}", f"/user/root/rand/_temporary/part-{int(r.integers(0, 10000)):05d}", 1)
        return out


def _workflow(rng: np.random.Generator, normal: Sequence[str], skew: float) -> list[str]:
    """A normal session: allocate, a replica pipeline, then some follow-up activity."""
    replicas = int(rng.integers(2, 4))
    steps = [normal[0]]
    steps += [normal[1]] * replicas
    steps += [normal[2]] * replicas
    steps += [normal[3]] * replicas
    steps += [normal[4]] * replicas
    tail_pool = list(normal[5:])
    n_tail = int(rng.integers(1, 5))
    weights = np.linspace(1.0, 1.0 + skew, len(tail_pool))
    weights /= weights.sum()
    steps += [tail_pool[i] for i in rng.choice(len(tail_pool), size=n_tail, p=weights)]
    return steps


def synth_generate(seed: int, spec: SynthSpec | None = None) -> SynthCorpus:
    """Deterministic source/target corpora sharing a template pool.

    Source sessions use shared templates only.  A ``proprietary_fraction`` of
    target sessions additionally carry target-only templates; anomalous
    sessions get a burst of anomaly templates injected (shared ones in the
    source and in general target sessions, target-only ones in proprietary
    sessions).  Exactly ``round(anomaly_rate * n)`` sessions per side are
    anomalous.
    """
    spec = spec or SynthSpec()
    spec.validate()
    rng = np.random.default_rng(seed)
    fill = _Filler(rng)
    has_prop = bool(spec.proprietary_normal)

    def make(n, system, skew, prop_fraction, id_prefix, id_base):
        n_anom = int(round(spec.anomaly_rate * n))
        anomalous = np.zeros(n, dtype=bool)
        anomalous[rng.permutation(n)[:n_anom]] = True
        n_prop = int(round(prop_fraction * n)) if has_prop else 0
        proprietary = np.zeros(n, dtype=bool)
        proprietary[rng.permutation(n)[:n_prop]] = True
        sessions = []
        for i in range(n):
            sid = f"{id_prefix}{id_base + i}"
            blk = f"blk_{id_base + i}" if id_prefix == "blk_" else f"blk_{9_000_000 + id_base + i}"
            steps = _workflow(rng, spec.shared_normal, skew)
            if proprietary[i]:
                for _ in range(int(rng.integers(1, 4))):
                    pos = int(rng.integers(1, len(steps) + 1))
                    steps.insert(pos, spec.proprietary_normal[int(rng.integers(len(spec.proprietary_normal)))])
            if anomalous[i]:
                pool = spec.proprietary_anomaly if proprietary[i] and spec.proprietary_anomaly else spec.shared_anomaly
                n_burst = int(rng.integers(spec.burst[0], spec.burst[1] + 1))
                burst = [pool[int(rng.integers(len(pool)))] for _ in range(n_burst)]
                pos = int(rng.integers(len(steps) // 2, len(steps) + 1))
                steps = steps[:pos] + burst
            lines = [_render_line(system, sid, fill(t, blk), rng) for t in steps]
            sessions.append(SynthSession(sid, lines, int(anomalous[i]), bool(proprietary[i])))
        return sessions

    source = make(spec.n_source, "source", 0.0, 0.0, "blk_", 1_000_000)
    target = make(spec.n_target, "target", 2.0, spec.proprietary_fraction, "job_", 1)
    return SynthCorpus(source, target, spec, seed)


def _render_line(system: str, sid: str, content: str, rng: np.random.Generator) -> str:
    if system == "source":
        return f"081109 {int(rng.integers(200000, 235959)):06d} {int(rng.integers(1, 999))} INFO dfs.DataNode: {content}"
    return f"2005-06-03-15.42.50 {sid} RAS INFO {content}"
