import pathlib
import sys
import time

import pytest

sys.path.insert(0, str(pathlib.Path(__file__).parent))

from generallog.config import load_config, write_config  # noqa: E402
from generallog.data import SYNTH_TARGET_HEADER, SYNTH_TARGET_SESSION, SynthSpec, synth_generate  # noqa: E402
from generallog.pipeline import run_pipeline  # noqa: E402


def synth_config(out_dir, seed, spec=None, **overrides):
    """Write a synthetic corpus plus a matching config file; return the loaded config."""
    out_dir = pathlib.Path(out_dir)
    paths = synth_generate(seed, spec or SynthSpec()).write(out_dir)
    values = {
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
    }
    values.update(overrides)
    write_config(out_dir / "config.toml", values)
    return load_config(out_dir / "config.toml")


class Seed7Run:
    def __init__(self, config, out, report, seconds):
        self.config, self.out, self.report, self.seconds = config, out, report, seconds


@pytest.fixture(scope="session")
def seed7_run(tmp_path_factory):
    """Default synthetic corpus, seed 7, mock LLM: one full pipeline run shared by several tests."""
    base = tmp_path_factory.mktemp("seed7")
    cfg = synth_config(base / "corpus", 7)
    start = time.perf_counter()
    report = run_pipeline(cfg, base / "run")
    return Seed7Run(cfg, base / "run", report, time.perf_counter() - start)


# One line per acceptance criterion, echoed in the terminal summary.
ACCEPTANCE_RESULTS: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_RESULTS:
            terminalreporter.write_line(line)


FULL_RUN_FIXTURES = {"seed7_run", "full_runs", "seed7_sweep"}


def pytest_collection_modifyitems(items):
    for item in items:
        if FULL_RUN_FIXTURES & set(getattr(item, "fixturenames", ())):
            item.add_marker(pytest.mark.slow)
