"""Pipeline configuration, loaded from a YAML key-value tree.

Example::

    data:
      topics: data/topics.jsonl
      corpus: data/passages.jsonl
    backends:
      generator: {kind: http, url: http://localhost:8000/v1/chat/completions,
                  model: mixtral-8x7b, token_env: GEN_TOKEN}
      scorer: {kind: http, url: http://localhost:8001/score}
    definitions: {mode: relational-cascade}
    cascade: {theta: 0.5, top_k: 10}
    run: {seed: 13, output_dir: runs/relational}

Secrets are never stored here: ``token_env`` names the environment variable
holding the bearer token.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    topics: str = ""
    corpus: str | None = None
    fewshot_topics: str | None = None
    window: int | None = None


@dataclass
class BackendConfig:
    kind: str = ""
    url: str | None = None
    model: str | None = None
    token_env: str | None = None
    dim: int = 256
    temperature: float = 0.0
    timeout: float = 60.0


def _backend(kind, **kw):
    return field(default_factory=lambda: BackendConfig(kind=kind, **kw))


@dataclass
class BackendsConfig:
    embedder: BackendConfig = _backend("hashing", model="mxbai-embed-large-v1")
    reranker: BackendConfig = _backend("lexical", model="mxbai-rerank-large-v1")
    generator: BackendConfig = _backend("echo", model="mixtral-8x7b-instruct")
    scorer: BackendConfig = _backend("lexical")


@dataclass
class RetrievalConfig:
    enabled: bool = True
    k: int = 20
    keep: int = 5
    min_score: float = 0.0
    on_failure: str = "fail"


@dataclass
class DefinitionConfig:
    mode: str = "none"  # none | singleton | relational-cascade
    singleton_template: str = "singleton"
    relational_template: str = "relational"
    token_cap: int | None = 160
    retries: int = 3
    backoff: float = 1.0


@dataclass
class ScoringConfig:
    serializer: str = "chatml"  # chatml | marker | fewshot
    chatml_system: str = "chatml_system"
    fewshot_instruction: str = "fewshot_instruction"
    fewshot_with_definitions: bool = False
    fewshot_balanced: bool = True


@dataclass
class CascadeSection:
    theta: float = 0.5
    top_k: int | None = 10
    stage2_enabled: bool = True
    on_failure: str = "abort"


@dataclass
class ClusteringSection:
    tau_c: float = 0.5


@dataclass
class HierarchySection:
    tau_h: float = 0.5


@dataclass
class EvaluationConfig:
    hard_fractions: list[float] = field(default_factory=lambda: [0.1, 0.2])
    baseline_tau_c: float = 0.5


@dataclass
class RunConfig:
    seed: int = 0
    parallelism: int = 1
    cache_dir: str = "cache"
    output_dir: str = "out"
    name: str | None = None


@dataclass
class PipelineConfig:
    data: DataConfig = field(default_factory=DataConfig)
    backends: BackendsConfig = field(default_factory=BackendsConfig)
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    definitions: DefinitionConfig = field(default_factory=DefinitionConfig)
    scoring: ScoringConfig = field(default_factory=ScoringConfig)
    cascade: CascadeSection = field(default_factory=CascadeSection)
    clustering: ClusteringSection = field(default_factory=ClusteringSection)
    hierarchy: HierarchySection = field(default_factory=HierarchySection)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)
    run: RunConfig = field(default_factory=RunConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @property
    def uses_definitions(self) -> bool:
        return self.definitions.mode != "none" or (
            self.scoring.serializer == "fewshot" and self.scoring.fewshot_with_definitions)

    @property
    def uses_retrieval(self) -> bool:
        return self.uses_definitions and self.retrieval.enabled

    def validate(self, check_paths: bool = True) -> "PipelineConfig":
        problems = []
        for name, value in [("cascade.theta", self.cascade.theta),
                            ("clustering.tau_c", self.clustering.tau_c),
                            ("hierarchy.tau_h", self.hierarchy.tau_h),
                            ("evaluation.baseline_tau_c", self.evaluation.baseline_tau_c)]:
            if not 0.0 <= value <= 1.0:
                problems.append(f"{name} must lie in [0, 1], got {value}")
        for frac in self.evaluation.hard_fractions:
            if not 0.0 < frac <= 1.0:
                problems.append(f"evaluation.hard_fractions entries must lie in (0, 1], got {frac}")
        if self.run.parallelism < 1:
            problems.append("run.parallelism must be >= 1")
        if self.cascade.top_k is not None and self.cascade.top_k < 0:
            problems.append("cascade.top_k must be >= 0")
        if self.retrieval.k < 1 or self.retrieval.keep < 0:
            problems.append("retrieval.k must be >= 1 and retrieval.keep >= 0")
        choices = {
            "definitions.mode": (self.definitions.mode, ("none", "singleton", "relational-cascade")),
            "scoring.serializer": (self.scoring.serializer, ("chatml", "marker", "fewshot")),
            "cascade.on_failure": (self.cascade.on_failure, ("abort", "fallback")),
            "retrieval.on_failure": (self.retrieval.on_failure, ("fail", "passthrough")),
            "backends.embedder.kind": (self.backends.embedder.kind, ("hashing", "http")),
            "backends.reranker.kind": (self.backends.reranker.kind, ("lexical", "http")),
            "backends.generator.kind": (self.backends.generator.kind, ("echo", "http")),
            "backends.scorer.kind": (self.backends.scorer.kind, ("oracle", "lexical", "http", "fewshot")),
        }
        for name, (value, allowed) in choices.items():
            if value not in allowed:
                problems.append(f"{name} must be one of {', '.join(allowed)}; got {value!r}")
        for name in ("embedder", "reranker", "generator", "scorer"):
            b = getattr(self.backends, name)
            if b.kind == "http" and not b.url:
                problems.append(f"backends.{name}.url is required for kind http")
        if not self.data.topics:
            problems.append("data.topics is required")
        if self.scoring.serializer == "fewshot" and not self.data.fewshot_topics:
            problems.append("data.fewshot_topics is required for the fewshot serializer")
        if self.uses_retrieval and not self.data.corpus:
            problems.append("data.corpus is required when definitions use retrieval")
        if check_paths:
            for name in ("topics", "corpus", "fewshot_topics"):
                path = getattr(self.data, name)
                if path and not Path(path).exists():
                    problems.append(f"data.{name}: {path} does not exist")
        if problems:
            raise ConfigError("; ".join(problems))
        return self


def _build(cls, values: Any, where: str, base=None):
    obj = base if base is not None else cls()
    if values is None:
        return obj
    if not isinstance(values, dict):
        raise ConfigError(f"{where or 'config'} must be a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - names)
    if unknown:
        raise ConfigError(f"unknown config key(s) under {where or 'top level'}: {', '.join(unknown)}")
    for name, value in values.items():
        current = getattr(obj, name)
        if dataclasses.is_dataclass(current):
            value = _build(type(current), value, f"{where}.{name}".lstrip("."), current)
        setattr(obj, name, value)
    return obj


def config_from_dict(values: dict | None, base_dir: str | Path | None = None) -> PipelineConfig:
    cfg = _build(PipelineConfig, values or {}, "")
    if base_dir is not None:
        base = Path(base_dir)
        for name in ("topics", "corpus", "fewshot_topics"):
            p = getattr(cfg.data, name)
            if p and not Path(p).is_absolute():
                setattr(cfg.data, name, str(base / p))
    return cfg


def load_config(path, overrides: dict | None = None, check_paths: bool = True) -> PipelineConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            values = yaml.safe_load(fh) or {}
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
    cfg = config_from_dict(values, Path(path).parent)
    for dotted, value in (overrides or {}).items():
        section, key = dotted.split(".")
        setattr(getattr(cfg, section), key, value)
    return cfg.validate(check_paths)
