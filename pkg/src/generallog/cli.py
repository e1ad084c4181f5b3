"""Command-line entry point.

Each stage command runs the pipeline up to that stage and writes its
artifacts into ``--out``.  ``synth`` writes a synthetic corpus plus a
matching ``config.toml`` that the other commands can consume directly.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import meta, pipeline
from .config import PipelineConfig, load_config, write_config
from .data import SYNTH_TARGET_HEADER, SYNTH_TARGET_SESSION, SynthSpec, synth_generate
from .embedding import write_embeddings
from .errors import GeneralLogError, StageError
from .routing import RouterConfig, route_corpus, write_decisions

logger = logging.getLogger("generallog")

DEFAULT_TAUS = [round(0.1 * i, 1) for i in range(11)]


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", type=Path, help="flat TOML run configuration")
    p.add_argument("--seed", type=int, default=None, help="override the configured seed")
    p.add_argument("--out", type=Path, default=Path("out"), help="output directory (default: out)")
    p.add_argument("--mock-llm", action="store_true", help="use the deterministic mock instead of an HTTP endpoint")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="generallog", description="Zero-label cross-system log anomaly detection")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("parse", parents=[common], help="mine templates and build sequences")
    sub.add_parser("embed", parents=[common], help="embed templates")
    sub.add_parser("route", parents=[common], help="split target sequences into General / Proprietary")
    sub.add_parser("train", parents=[common], help="meta-train the small model on source + General target")
    sub.add_parser("build-kb", parents=[common], help="build the retrieval knowledge base")
    sub.add_parser("detect", parents=[common], help="run the full pipeline and write the report")
    sub.add_parser("eval", parents=[common], help="detect, then print metrics and render figures")
    sw = sub.add_parser("sweep", parents=[common], help="evaluate over a grid of routing thresholds")
    sw.add_argument("--taus", type=float, nargs="+", default=DEFAULT_TAUS)
    sy = sub.add_parser("synth", parents=[common], help="write a synthetic cross-system corpus and config")
    sy.add_argument("--n-source", type=int, default=2000)
    sy.add_argument("--n-target", type=int, default=2000)
    sy.add_argument("--anomaly-rate", type=float, default=0.1)
    sy.add_argument("--proprietary-fraction", type=float, default=0.3)
    return parser


def resolve_config(args) -> PipelineConfig:
    if args.config is None:
        raise GeneralLogError("--config is required for this command")
    cfg = load_config(args.config)
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.mock_llm:
        changes["llm_mock"] = True
    return cfg.replace(**changes) if changes else cfg


def cmd_synth(args) -> int:
    spec = SynthSpec(n_source=args.n_source, n_target=args.n_target, anomaly_rate=args.anomaly_rate,
                     proprietary_fraction=args.proprietary_fraction)
    seed = 0 if args.seed is None else args.seed
    corpus = synth_generate(seed, spec)
    paths = corpus.write(args.out)
    write_config(args.out / "config.toml", {
        "config_version": 1,
        "seed": seed,
        "source_log": paths["source_log"].name,
        "source_labels": paths["source_labels"].name,
        "source_format": "hdfs",
        "target_log": paths["target_log"].name,
        "target_labels": paths["target_labels"].name,
        "target_format": "sessions",
        "target_header": SYNTH_TARGET_HEADER,
        "target_session_pattern": SYNTH_TARGET_SESSION,
        "llm_mock": True,
    })
    print(f"wrote {len(corpus.source)} source and {len(corpus.target)} target sessions to {args.out}")
    return 0


def _print_summary(report) -> None:
    for key, value in report.summary():
        print(f"{key}\t{value}")


def run_stages(args, cfg: PipelineConfig) -> int:
    out: Path = args.out
    out.mkdir(parents=True, exist_ok=True)
    cmd = args.command
    if cmd in ("detect", "eval"):
        report = pipeline.run_pipeline(cfg, out, mock=True if args.mock_llm else None)
        _print_summary(report)
        if cmd == "eval":
            from .plotting import plot_route_scores
            plot_route_scores(report, cfg.tau, out / "route_scores.png")
            if report.metrics is None:
                print("no ground truth for the target corpus: metrics unavailable")
        return 0

    timings: dict = {}
    prepared = pipeline.prepare(cfg, timings)
    pipeline.write_parse_artifacts(out, prepared)
    print(f"templates\t{len(prepared.templates)}\nsource_sequences\t{len(prepared.source)}\n"
          f"target_sequences\t{len(prepared.target)}")
    if cmd == "parse":
        return 0
    write_embeddings(out / "embeddings.tsv", prepared.embeddings)
    if cmd == "embed":
        return 0
    with pipeline.stage("route", timings):
        general, proprietary, decisions = route_corpus(prepared.target, prepared.index, prepared.embeddings,
                                                       RouterConfig(cfg.tau))
    write_decisions(out / "decisions.tsv", decisions)
    print(f"general\t{len(general)}\nproprietary\t{len(proprietary)}")
    if cmd == "route":
        return 0
    with pipeline.stage("train", timings):
        model = pipeline.train_or_load(cfg, prepared, general, out)
    if cmd == "train":
        if model is None:
            raise StageError("train", GeneralLogError("no General target sequences to train on"))
        return 0
    with pipeline.stage("build_kb", timings):
        preds = meta.predict_many(model, general, prepared.embeddings) if model is not None else []
        kb = pipeline.build_kb(general, preds, prepared.embeddings, prepared.templates)
    kb.save(out / "kb.tsv")
    print(f"kb_entries\t{len(kb)}")
    return 0


def cmd_sweep(args, cfg: PipelineConfig) -> int:
    from .plotting import plot_sweep
    rows = pipeline.sweep_threshold(cfg, args.taus, args.out, mock=True if args.mock_llm else None)
    plot_sweep(rows, args.out / "sweep.png")
    print("tau\tgeneral_frac\tf1_general\tf1_proprietary\tf1_all")
    for r in rows:
        print(f"{r.tau:.2f}\t{r.general_frac:.4f}\t{r.f1_general:.2f}\t{r.f1_proprietary:.2f}\t{r.f1_all:.2f}")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "synth":
            return cmd_synth(args)
        cfg = resolve_config(args)
        if args.command == "sweep":
            args.out.mkdir(parents=True, exist_ok=True)
            return cmd_sweep(args, cfg)
        return run_stages(args, cfg)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except GeneralLogError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
