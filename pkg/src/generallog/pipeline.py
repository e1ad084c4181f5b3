"""End-to-end wiring: parse, embed, route, train, build the KB, detect, report."""

from __future__ import annotations

import logging
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from . import meta
from .config import PipelineConfig
from .data import BGL_HEADER, HDFS_HEADER, LoadedCorpus, LogSequence, load_bgl, load_sessions
from .embedding import EventEmbedding, WordVectorTable, build_idf, embed_templates, write_embeddings
from .errors import GeneralLogError, StageError
from .metrics import Metrics, compute_metrics
from .parsing import LogTemplate, ParseTree, write_events, write_templates
from .rag import ChatCompletionsClient, KnowledgeBase, MockLlmClient, Verdict, build_kb, detect_many
from .routing import GENERAL, RouteDecision, RouterConfig, SourceEmbeddingIndex, route_corpus, write_decisions

logger = logging.getLogger(__name__)


@contextmanager
def stage(name: str, timings: dict):
    start = time.perf_counter()
    try:
        yield
    except StageError:
        raise
    except (GeneralLogError, OSError, ValueError) as exc:
        raise StageError(name, exc) from exc
    finally:
        timings[name] = timings.get(name, 0.0) + time.perf_counter() - start


@dataclass
class Prepared:
    source: list[LogSequence]
    target: list[LogSequence]
    templates: dict[int, LogTemplate]
    embeddings: dict[int, EventEmbedding]
    index: SourceEmbeddingIndex
    source_corpus: LoadedCorpus
    target_corpus: LoadedCorpus


def _load(config: PipelineConfig, side: str, tree: ParseTree) -> LoadedCorpus:
    fmt = config.values[f"{side}_format"]
    parser = config.parser_config(side)
    log_path = config.path(f"{side}_log")
    if fmt == "bgl":
        parser.header_pattern = parser.header_pattern or BGL_HEADER
        return load_bgl(log_path, int(config.window_size), int(config.window_stride), parser, tree, side)
    if fmt == "hdfs":
        parser.header_pattern = parser.header_pattern or HDFS_HEADER
    return load_sessions(log_path, config.path(f"{side}_labels"), config.values[f"{side}_session_pattern"],
                         parser, tree, side)


def parse_corpora(config: PipelineConfig) -> tuple[LoadedCorpus, LoadedCorpus, dict[int, LogTemplate]]:
    """Mine both systems into one template space (one tree, source first)."""
    pc = config.parser_config("source")
    tree = ParseTree(pc.depth, pc.max_children, pc.sim_threshold)
    src = _load(config, "source", tree)
    tgt = _load(config, "target", tree)
    return src, tgt, {t.id: t for t in tree.template_list()}


def embed_corpus(config: PipelineConfig, templates: dict[int, LogTemplate]) -> dict[int, EventEmbedding]:
    wv = config.path("word_vectors")
    if wv is not None:
        table = WordVectorTable.load(wv, config.embedding_fallback)
    else:
        table = WordVectorTable(int(config.embedding_dim), fallback_mode=config.embedding_fallback)
    ordered = [templates[i] for i in sorted(templates)]
    return embed_templates(ordered, table, build_idf(ordered))


def prepare(config: PipelineConfig, timings: dict | None = None) -> Prepared:
    timings = {} if timings is None else timings
    with stage("parse", timings):
        config.validate(check_paths=True)
        src, tgt, templates = parse_corpora(config)
        if not src.sequences:
            raise GeneralLogError("source corpus produced no sequences")
    with stage("embed", timings):
        embeddings = embed_corpus(config, templates)
        index = SourceEmbeddingIndex.from_sequences(src.sequences, embeddings, built_from="source")
    return Prepared(src.sequences, tgt.sequences, templates, embeddings, index, src, tgt)


def train_or_load(config: PipelineConfig, prepared: Prepared, general: Sequence[LogSequence],
                  out_dir: Path | None = None) -> meta.TrainedModel | None:
    """Load the configured checkpoint if it exists, otherwise meta-train on source + General target.

    Returns ``None`` when there is nothing to train on the target side and no
    checkpoint (the small model has no sequences to label in that case).
    """
    ckpt = config.path("checkpoint")
    cfg = config.train_config()
    if ckpt is not None and ckpt.exists():
        logger.info("loading checkpoint %s", ckpt)
        return meta.TrainedModel.load(ckpt, cfg)
    if not general:
        logger.warning("no General sequences: skipping small-model training")
        return None
    data = meta.DomainDataset.from_sequences(prepared.source, general, prepared.embeddings)
    model = meta.train(data, cfg)
    if out_dir is not None:
        model.save(out_dir / "checkpoint.ckpt")
        meta.write_train_log(out_dir / "train_log.tsv", model.history)
    return model


def make_client(config: PipelineConfig, mock: bool | None = None):
    use_mock = config.llm_mock if mock is None else mock
    return MockLlmClient() if use_mock else ChatCompletionsClient(config.llm_config())


@dataclass
class ReportRow:
    sequence_id: str
    route: str
    score: float
    predictor: str
    predicted: int
    truth: int | None
    probability: float | None = None
    flagged: bool = False


@dataclass
class DetectionReport:
    rows: list[ReportRow]
    metrics: Metrics | None
    small_model_only: Metrics | None
    route_counts: dict[str, int]
    llm_calls: int
    kb_size: int
    timings: dict[str, float] = field(default_factory=dict)

    def summary(self) -> list[tuple[str, str]]:
        out = [
            ("sequences", str(len(self.rows))),
            ("general", str(self.route_counts.get("General", 0))),
            ("proprietary", str(self.route_counts.get("Proprietary", 0))),
            ("llm_calls", str(self.llm_calls)),
            ("kb_entries", str(self.kb_size)),
            ("flagged", str(sum(r.flagged for r in self.rows))),
        ]
        if self.metrics is not None:
            out += [("precision", f"{self.metrics.precision:.4f}"),
                    ("recall", f"{self.metrics.recall:.4f}"),
                    ("f1", f"{self.metrics.f1:.4f}")]
        if self.small_model_only is not None:
            out += [("small_model_only_precision", f"{self.small_model_only.precision:.4f}"),
                    ("small_model_only_recall", f"{self.small_model_only.recall:.4f}"),
                    ("small_model_only_f1", f"{self.small_model_only.f1:.4f}")]
        return out

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("sequence_id\troute\tscore\tpredictor\tpredicted\ttruth\n")
            for r in self.rows:
                truth = "-" if r.truth is None else str(r.truth)
                fh.write(f"{r.sequence_id}\t{r.route}\t{r.score:.6f}\t{r.predictor}\t{r.predicted}\t{truth}\n")
            fh.write("\n# summary\n")
            for key, value in self.summary():
                fh.write(f"{key}\t{value}\n")

    def write_timings(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for name, secs in self.timings.items():
                fh.write(f"{name}\t{secs:.3f}\n")


def _metrics_if_labelled(pred, truth) -> Metrics | None:
    if not truth or any(t is None for t in truth):
        return None
    return compute_metrics(pred, truth)


@dataclass
class Evaluation:
    decisions: list[RouteDecision]
    general: list[LogSequence]
    proprietary: list[LogSequence]
    small_predictions: dict[str, tuple[float, int]]
    kb: KnowledgeBase
    verdicts: list[Verdict]
    report: DetectionReport


def evaluate(prepared: Prepared, model: meta.TrainedModel | None, tau: float, client, k: int = 5,
             max_retries: int = 2, max_in_flight: int = 1, timings: dict | None = None) -> Evaluation:
    """Route, label General with the small model, build the KB and ask the LLM about the rest."""
    timings = {} if timings is None else timings
    target = prepared.target
    with stage("route", timings):
        general, proprietary, decisions = route_corpus(target, prepared.index, prepared.embeddings, RouterConfig(tau))
    with stage("predict", timings):
        small = {}
        if model is not None and target:
            preds = meta.predict_many(model, target, prepared.embeddings)
            small = {s.id: p for s, p in zip(target, preds)}
    with stage("build_kb", timings):
        kb = build_kb(general, [small[s.id] for s in general], prepared.embeddings, prepared.templates)
    with stage("detect", timings):
        calls_before = getattr(client, "calls", 0)
        verdicts = detect_many(proprietary, kb, client, prepared.embeddings, k, prepared.templates,
                               max_retries, max_in_flight)
        llm_calls = getattr(client, "calls", 0) - calls_before

    by_verdict = {v.sequence_id: v for v in verdicts}
    rows = []
    for seq, dec in zip(target, decisions):
        if dec.route == GENERAL:
            prob, label = small[seq.id]
            rows.append(ReportRow(seq.id, dec.route, dec.score, "small_model", label, seq.truth_label, prob))
        else:
            v = by_verdict[seq.id]
            rows.append(ReportRow(seq.id, dec.route, dec.score, v.source, v.label, seq.truth_label,
                                  flagged=v.flagged or dec.error is not None))
    truth = [r.truth for r in rows]
    metrics = _metrics_if_labelled([r.predicted for r in rows], truth)
    small_only = None
    if small and len(small) == len(target):
        small_only = _metrics_if_labelled([small[s.id][1] for s in target], truth)
    counts = {"General": len(general), "Proprietary": len(proprietary)}
    report = DetectionReport(rows, metrics, small_only, counts, llm_calls, len(kb), timings)
    return Evaluation(decisions, general, proprietary, small, kb, verdicts, report)


def write_sequences(path, seqs: Sequence[LogSequence]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in seqs:
            label = "-" if s.truth_label is None else str(s.truth_label)
            fh.write(f"{s.id}\t{s.system}\t{label}\t{' '.join(str(i) for i in s.template_ids)}\n")


def write_parse_artifacts(out: Path, prepared: Prepared) -> None:
    write_templates(out / "templates.tsv", [prepared.templates[i] for i in sorted(prepared.templates)])
    write_events(out / "events_source.tsv", prepared.source_corpus.events)
    write_events(out / "events_target.tsv", prepared.target_corpus.events)
    write_sequences(out / "sequences_source.tsv", prepared.source)
    write_sequences(out / "sequences_target.tsv", prepared.target)


def write_verdicts(path, verdicts: Sequence[Verdict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for v in verdicts:
            neighbors = ",".join(f"{sid}:{sim:.6f}" for sid, sim in v.neighbors_used)
            note = v.note.replace("\t", " ").replace("\n", " ")
            fh.write(f"{v.sequence_id}\t{v.label}\t{v.source}\t{int(v.flagged)}\t{neighbors}\t{note}\n")


def run_pipeline(config: PipelineConfig, out_dir=None, client=None, mock: bool | None = None) -> DetectionReport:
    """Run every stage; with ``out_dir`` every intermediate artifact is written there too."""
    timings: dict[str, float] = {}
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    prepared = prepare(config, timings)
    with stage("route", timings):
        general, _, _ = route_corpus(prepared.target, prepared.index, prepared.embeddings, RouterConfig(config.tau))
    with stage("train", timings):
        model = train_or_load(config, prepared, general, out)
    client = client or make_client(config, mock)
    ev = evaluate(prepared, model, config.tau, client, int(config.rag_k),
                  int(config.llm_max_retries), int(config.llm_max_in_flight), timings)
    if out is not None:
        write_parse_artifacts(out, prepared)
        write_embeddings(out / "embeddings.tsv", prepared.embeddings)
        write_decisions(out / "decisions.tsv", ev.decisions)
        ev.kb.save(out / "kb.tsv")
        write_verdicts(out / "verdicts.tsv", ev.verdicts)
        ev.report.write(out / "report.tsv")
        ev.report.write_timings(out / "timings.tsv")
    return ev.report


@dataclass
class SweepRow:
    tau: float
    general_frac: float
    f1_general: float
    f1_proprietary: float
    f1_all: float
    n_general: int
    n_proprietary: int


def _f1_subset(seqs, small) -> float:
    if not seqs:
        return 0.0
    m = _metrics_if_labelled([small[s.id][1] for s in seqs], [s.truth_label for s in seqs])
    return 0.0 if m is None else m.f1


def sweep_threshold(config: PipelineConfig, taus: Sequence[float], out_dir=None, client=None,
                    mock: bool | None = None) -> list[SweepRow]:
    """Evaluate the pipeline at each threshold, reusing one parse, one embedding and one model.

    The model is the configured checkpoint, or is trained once on the General
    set at ``config.tau``.  ``f1_general``/``f1_proprietary`` score the small
    model on each partition; ``f1_all`` scores the full pipeline.
    """
    timings: dict[str, float] = {}
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    for tau in taus:
        RouterConfig(tau)
    prepared = prepare(config, timings)
    if any(s.truth_label is None for s in prepared.target):
        raise StageError("sweep", GeneralLogError("sweeping needs ground-truth labels for the target corpus"))
    with stage("train", timings):
        general, _, _ = route_corpus(prepared.target, prepared.index, prepared.embeddings, RouterConfig(config.tau))
        model = train_or_load(config, prepared, general, out)
    client = client or make_client(config, mock)
    rows = []
    for tau in sorted(taus):
        ev = evaluate(prepared, model, tau, client, int(config.rag_k), int(config.llm_max_retries),
                      int(config.llm_max_in_flight))
        n = len(prepared.target)
        rows.append(SweepRow(
            tau,
            len(ev.general) / n if n else 0.0,
            _f1_subset(ev.general, ev.small_predictions),
            _f1_subset(ev.proprietary, ev.small_predictions),
            ev.report.metrics.f1 if ev.report.metrics else 0.0,
            len(ev.general),
            len(ev.proprietary),
        ))
    if out is not None:
        write_sweep(out, rows)
    return rows


def write_sweep(out: Path, rows: Sequence[SweepRow]) -> None:
    with open(out / "sweep_plot.tsv", "w", encoding="utf-8") as fh:
        fh.write("tau\tgeneral_frac\tf1_general\tf1_proprietary\tf1_all\n")
        for r in rows:
            fh.write(f"{r.tau:.4f}\t{r.general_frac:.6f}\t{r.f1_general:.4f}\t{r.f1_proprietary:.4f}\t{r.f1_all:.4f}\n")
    with open(out / "sweep_table.tsv", "w", encoding="utf-8") as fh:
        fh.write("tau\tn_general\tn_proprietary\tgeneral_frac\tf1_general\tf1_proprietary\tf1_all\n")
        for r in rows:
            fh.write(f"{r.tau:.4f}\t{r.n_general}\t{r.n_proprietary}\t{r.general_frac:.6f}\t"
                     f"{r.f1_general:.4f}\t{r.f1_proprietary:.4f}\t{r.f1_all:.4f}\n")
