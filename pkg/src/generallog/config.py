"""Flat TOML run configuration.

Every key sits at top level; relative paths resolve against the directory of
the config file.  Keys (with defaults) are listed in ``DEFAULTS``; unknown
keys are rejected so typos surface early.
"""

from __future__ import annotations

import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ConfigError
from .meta import TrainConfig
from .parsing import DEFAULT_MASKS, ParserConfig
from .rag import LlmClientConfig

CONFIG_VERSION = 1

DEFAULTS: dict[str, object] = {
    "config_version": CONFIG_VERSION,
    "seed": 0,
    # inputs; format is one of "sessions", "hdfs", "bgl"
    "source_log": "",
    "source_labels": "",
    "source_format": "hdfs",
    "source_header": "",
    "source_session_pattern": r"blk_-?\d+",
    "target_log": "",
    "target_labels": "",
    "target_format": "hdfs",
    "target_header": "",
    "target_session_pattern": r"blk_-?\d+",
    "window_size": 100,
    "window_stride": 100,
    # template mining
    "parser_depth": 4,
    "parser_sim_threshold": 0.4,
    "parser_max_children": 100,
    "parser_masks": [list(m) for m in DEFAULT_MASKS],
    # embeddings
    "word_vectors": "",
    "embedding_dim": 64,
    "embedding_fallback": "hash_deterministic",
    # routing
    "tau": 0.5,
    # small model
    "checkpoint": "",
    "train_delta": 0.5,
    "train_alpha": 1.0,
    "train_beta": 0.01,
    "train_gamma": 1.0,
    "train_inner_steps": 1,
    "train_tasks_per_meta_batch": 4,
    "train_support_size": 32,
    "train_query_size": 32,
    "train_epochs": 150,
    "train_head_lr": 0.5,
    "train_hidden": 32,
    "train_decision_threshold": 0.5,
    "train_cap_adversarial": True,
    # retrieval + LLM
    "rag_k": 5,
    "llm_mock": True,
    "llm_endpoint": "http://localhost:8000/v1/chat/completions",
    "llm_model": "qwen3",
    "llm_api_key_env": "GENERALLOG_API_KEY",
    "llm_timeout": 60.0,
    "llm_max_retries": 2,
    "llm_max_in_flight": 4,
}

PATH_KEYS = ("source_log", "source_labels", "target_log", "target_labels", "word_vectors", "checkpoint")


@dataclass
class PipelineConfig:
    values: dict = field(default_factory=lambda: dict(DEFAULTS))
    base_dir: Path = field(default_factory=Path.cwd)

    def __getattr__(self, name):
        values = self.__dict__.get("values", {})
        if name in values:
            return values[name]
        raise AttributeError(name)

    def path(self, key: str) -> Path | None:
        raw = self.values.get(key) or ""
        if not raw:
            return None
        p = Path(raw)
        return p if p.is_absolute() else self.base_dir / p

    def replace(self, **changes) -> "PipelineConfig":
        values = dict(self.values)
        for k, v in changes.items():
            if k not in DEFAULTS:
                raise ConfigError(f"unknown config key {k!r}")
            values[k] = v
        cfg = PipelineConfig(values, self.base_dir)
        cfg.validate()
        return cfg

    def validate(self, check_paths: bool = False) -> None:
        v = self.values
        if v["config_version"] != CONFIG_VERSION:
            raise ConfigError(f"unsupported config_version {v['config_version']}")
        if not 0.0 <= float(v["tau"]) <= 1.0:
            raise ConfigError("tau must lie in [0, 1]")
        for side in ("source", "target"):
            if v[f"{side}_format"] not in ("sessions", "hdfs", "bgl"):
                raise ConfigError(f"{side}_format must be sessions, hdfs or bgl")
        if int(v["rag_k"]) < 1:
            raise ConfigError("rag_k must be at least 1")
        try:
            self.parser_config("source")
            self.train_config()
            if not v["llm_mock"]:
                self.llm_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if check_paths:
            for key in PATH_KEYS:
                p = self.path(key)
                if key == "checkpoint" or p is None:
                    continue
                if not p.exists():
                    raise ConfigError(f"{key}: {p} does not exist")
            for key in ("source_log", "target_log"):
                if self.path(key) is None:
                    raise ConfigError(f"{key} is required")

    def parser_config(self, side: str) -> ParserConfig:
        v = self.values
        return ParserConfig(
            depth=int(v["parser_depth"]),
            sim_threshold=float(v["parser_sim_threshold"]),
            max_children=int(v["parser_max_children"]),
            masks=[(p, r) for p, r in v["parser_masks"]],
            header_pattern=v[f"{side}_header"] or None,
        )

    def train_config(self) -> TrainConfig:
        v = self.values
        return TrainConfig(
            delta=float(v["train_delta"]),
            alpha=float(v["train_alpha"]),
            beta=float(v["train_beta"]),
            gamma=float(v["train_gamma"]),
            inner_steps=int(v["train_inner_steps"]),
            tasks_per_meta_batch=int(v["train_tasks_per_meta_batch"]),
            support_size=int(v["train_support_size"]),
            query_size=int(v["train_query_size"]),
            epochs=int(v["train_epochs"]),
            seed=int(v["seed"]),
            head_lr=float(v["train_head_lr"]),
            hidden=int(v["train_hidden"]),
            decision_threshold=float(v["train_decision_threshold"]),
            cap_adversarial=bool(v["train_cap_adversarial"]),
        )

    def llm_config(self) -> LlmClientConfig:
        v = self.values
        return LlmClientConfig(
            endpoint=v["llm_endpoint"],
            model=v["llm_model"],
            api_key_env=v["llm_api_key_env"],
            timeout=float(v["llm_timeout"]),
            max_retries=int(v["llm_max_retries"]),
            max_in_flight=int(v["llm_max_in_flight"]),
        )


def load_config(path) -> PipelineConfig:
    path = Path(path)
    with open(path, "rb") as fh:
        raw = tomllib.load(fh)
    unknown = sorted(set(raw) - set(DEFAULTS))
    if unknown:
        raise ConfigError(f"{path}: unknown keys {unknown}")
    if "config_version" not in raw:
        raise ConfigError(f"{path}: missing config_version")
    values = dict(DEFAULTS)
    for key, value in raw.items():
        default = DEFAULTS[key]
        if isinstance(default, bool) and not isinstance(value, bool):
            raise ConfigError(f"{key} must be a boolean")
        if isinstance(default, float) and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        if type(default) is not type(value):
            raise ConfigError(f"{key} must be of type {type(default).__name__}, got {type(value).__name__}")
        values[key] = value
    cfg = PipelineConfig(values, path.parent.resolve())
    cfg.validate()
    return cfg


def _toml_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, float)):
        return repr(value)
    if isinstance(value, str):
        return json.dumps(value)
    if isinstance(value, list):
        return "[" + ", ".join(_toml_value(v) for v in value) + "]"
    raise TypeError(f"cannot write {type(value).__name__} to TOML")


def write_config(path, values: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for key in DEFAULTS:
            if key in values:
                fh.write(f"{key} = {_toml_value(values[key])}\n")
