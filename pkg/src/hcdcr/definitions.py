"""Singleton and relational definition generation with a persistent cache."""
from __future__ import annotations

import hashlib
import json
import logging
import re
import threading
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Protocol

from .backends import BackendError, call_with_retries
from .corpus import Mention, Topic
from .retrieval import ContextSet, RetrievalPipeline

logger = logging.getLogger(__name__)

_PLACEHOLDER = re.compile(r"\$(?:(\w+)|\{(\w+)\})")

SINGLETON_FIELDS = ("mention", "context", "passages")
RELATIONAL_FIELDS = ("anchor", "anchor_context", "anchor_passages",
                     "other", "other_context", "other_passages")


class TemplateError(ValueError):
    pass


class GenerationError(RuntimeError):
    pass


def load_template(name_or_path: str) -> str:
    """Read a prompt template: a bundled name (``"singleton"``) or a file path."""
    path = Path(name_or_path)
    if path.suffix and path.exists():
        return path.read_text(encoding="utf-8")
    return resources.files("hcdcr.templates").joinpath(f"{name_or_path}.txt").read_text(encoding="utf-8")


def fill_template(template: str, values: dict[str, str], required: tuple[str, ...]) -> str:
    present = {a or b for a, b in _PLACEHOLDER.findall(template)}
    missing = [name for name in required if name not in present]
    if missing:
        raise TemplateError(f"template lacks placeholder(s): {', '.join('$' + m for m in missing)}")
    return _PLACEHOLDER.sub(lambda m: values.get(m.group(1) or m.group(2), m.group(0)), template)


def format_passages(contexts: ContextSet | None) -> str:
    if contexts is None or not contexts.entries:
        return ""
    lines = ["", "Reference passages:"]
    lines += [f"[{i}] {p.text}" for i, p in enumerate(contexts.passages, 1)]
    return "\n".join(lines) + "\n"


def prompt_hash(prompt: str) -> str:
    return hashlib.sha256(prompt.encode("utf-8")).hexdigest()


def truncate_tokens(text: str, cap: int | None) -> str:
    if cap is None:
        return text.strip()
    tokens = text.split()
    return " ".join(tokens[:cap])


@dataclass(frozen=True)
class SingletonDefinition:
    mention_id: str
    text: str
    context_ids: tuple[str, ...] = ()
    generator_meta: dict = field(default_factory=dict, compare=False)


@dataclass(frozen=True)
class RelationalDefinition:
    anchor_id: str
    other_id: str
    text: str
    context_ids: tuple[str, ...] = ()
    generator_meta: dict = field(default_factory=dict, compare=False)


class Generator(Protocol):
    def generate(self, prompt: str) -> str: ...


class EchoGenerator:
    """Offline test double: returns the first ``n_tokens`` whitespace tokens of the prompt."""

    backend_id = "echo"

    def __init__(self, n_tokens: int = 30):
        self.n_tokens = n_tokens

    def generate(self, prompt: str) -> str:
        return " ".join(prompt.split()[:self.n_tokens])


class CountingGenerator:
    """Wraps a generator and counts backend calls."""

    def __init__(self, inner):
        self.inner = inner
        self.calls = 0
        self._lock = threading.Lock()

    @property
    def backend_id(self) -> str:
        return getattr(self.inner, "backend_id", type(self.inner).__name__)

    def generate(self, prompt: str) -> str:
        with self._lock:
            self.calls += 1
        return self.inner.generate(prompt)


class DefinitionCache:
    """Append-only keyed store; the first committed value for a key wins.

    With a directory, entries persist in ``singleton.jsonl`` and
    ``relational.jsonl`` and are reloaded on construction.
    """

    KINDS = ("singleton", "relational")

    def __init__(self, directory=None):
        self.directory = Path(directory) if directory is not None else None
        self._entries: dict[str, dict[tuple, dict]] = {k: {} for k in self.KINDS}
        self._lock = threading.Lock()
        if self.directory is not None:
            self.directory.mkdir(parents=True, exist_ok=True)
            for kind in self.KINDS:
                self._load(kind)

    def _path(self, kind):
        return self.directory / f"{kind}.jsonl"

    def _load(self, kind):
        path = self._path(kind)
        if not path.exists():
            return
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                try:
                    rec = json.loads(line)
                except json.JSONDecodeError:
                    # a torn final line from an interrupted run
                    logger.warning("skipping unreadable cache line in %s", path)
                    continue
                self._entries[kind].setdefault(tuple(rec["key"]), rec)

    def get(self, kind: str, key: tuple) -> dict | None:
        with self._lock:
            return self._entries[kind].get(tuple(key))

    def put(self, kind: str, key: tuple, record: dict) -> dict:
        key = tuple(key)
        with self._lock:
            existing = self._entries[kind].get(key)
            if existing is not None:
                return existing
            record = dict(record, key=list(key))
            self._entries[kind][key] = record
            if self.directory is not None:
                with open(self._path(kind), "a", encoding="utf-8") as fh:
                    fh.write(json.dumps(record, sort_keys=True) + "\n")
            return record

    def __len__(self):
        return sum(len(v) for v in self._entries.values())


def build_singleton_prompt(mention: Mention, local_context: str, contexts: ContextSet | None,
                           template: str) -> str:
    return fill_template(template, {
        "mention": mention.surface,
        "context": local_context,
        "passages": format_passages(contexts),
    }, SINGLETON_FIELDS)


def build_relational_prompt(anchor: Mention, other: Mention,
                            anchor_bundle: tuple[str, ContextSet | None],
                            other_bundle: tuple[str, ContextSet | None],
                            template: str) -> str:
    if anchor.mention_id == other.mention_id:
        raise ValueError("anchor and other must be distinct mentions")
    return fill_template(template, {
        "anchor": anchor.surface,
        "anchor_context": anchor_bundle[0],
        "anchor_passages": format_passages(anchor_bundle[1]),
        "other": other.surface,
        "other_context": other_bundle[0],
        "other_passages": format_passages(other_bundle[1]),
    }, RELATIONAL_FIELDS)


class DefinitionGenerator:
    """Produces definitions for mentions of a topic, going through the cache first.

    ``retrieval=None`` (or ``use_retrieval=False``) generates from the local
    context alone.
    """

    def __init__(self, generator: Generator, cache: DefinitionCache | None = None,
                 retrieval: RetrievalPipeline | None = None,
                 singleton_template: str | None = None, relational_template: str | None = None,
                 token_cap: int | None = 160, attempts: int = 3, backoff: float = 1.0,
                 use_retrieval: bool = True):
        self.generator = generator
        self.cache = cache if cache is not None else DefinitionCache()
        self.retrieval = retrieval if use_retrieval else None
        self.singleton_template = singleton_template or load_template("singleton")
        self.relational_template = relational_template or load_template("relational")
        self.token_cap = token_cap
        self.attempts = attempts
        self.backoff = backoff
        self.cache_hits = 0
        self.generated = 0
        self._contexts: dict[tuple[str, str], ContextSet] = {}
        self._lock = threading.Lock()

    @property
    def backend_id(self) -> str:
        return getattr(self.generator, "backend_id", type(self.generator).__name__)

    def contexts(self, mention: Mention, topic: Topic) -> ContextSet:
        key = (topic.topic_id, mention.mention_id)
        with self._lock:
            cached = self._contexts.get(key)
        if cached is not None:
            return cached
        if self.retrieval is None:
            result = ContextSet(mention.mention_id)
        else:
            result = self.retrieval.contexts_for(mention.mention_id, mention.local_context)
        with self._lock:
            return self._contexts.setdefault(key, result)

    def _generate(self, kind: str, key: tuple, prompt: str, context_ids: list[str], label: str) -> dict:
        cached = self.cache.get(kind, key)
        if cached is not None:
            with self._lock:
                self.cache_hits += 1
            return cached
        try:
            text = call_with_retries(lambda: self.generator.generate(prompt), self.attempts,
                                     self.backoff, what=f"definition generation for {label}")
        except BackendError as exc:
            raise GenerationError(str(exc)) from exc
        if not text or not text.strip():
            raise GenerationError(f"generator returned empty text for {label}")
        with self._lock:
            self.generated += 1
        return self.cache.put(kind, key, {
            "text": text.strip(),
            "context_ids": list(context_ids),
            "backend": self.backend_id,
            "prompt_hash": key[-1],
        })

    def singleton(self, mention: Mention, topic: Topic) -> SingletonDefinition:
        contexts = self.contexts(mention, topic)
        prompt = build_singleton_prompt(mention, mention.local_context, contexts, self.singleton_template)
        h = prompt_hash(prompt)
        rec = self._generate("singleton", (mention.mention_id, h), prompt, contexts.passage_ids,
                             f"mention {mention.mention_id!r}")
        return SingletonDefinition(mention.mention_id, truncate_tokens(rec["text"], self.token_cap),
                                   tuple(rec["context_ids"]),
                                   {"backend": rec["backend"], "prompt_hash": rec["prompt_hash"]})

    def directed(self, anchor: Mention, other: Mention, topic: Topic) -> RelationalDefinition:
        a_ctx = self.contexts(anchor, topic)
        o_ctx = self.contexts(other, topic)
        prompt = build_relational_prompt(anchor, other, (anchor.local_context, a_ctx),
                                         (other.local_context, o_ctx), self.relational_template)
        h = prompt_hash(prompt)
        rec = self._generate("relational", (anchor.mention_id, other.mention_id, h), prompt,
                             a_ctx.passage_ids + o_ctx.passage_ids,
                             f"pair ({anchor.mention_id!r} -> {other.mention_id!r})")
        return RelationalDefinition(anchor.mention_id, other.mention_id,
                                    truncate_tokens(rec["text"], self.token_cap),
                                    tuple(rec["context_ids"]),
                                    {"backend": rec["backend"], "prompt_hash": rec["prompt_hash"]})

    def relational(self, m1: Mention, m2: Mention, topic: Topic) -> tuple[RelationalDefinition, RelationalDefinition]:
        """Both directed definitions: ``m1`` anchored on ``m2``, then ``m2`` anchored on ``m1``."""
        if m1.mention_id == m2.mention_id:
            raise ValueError("relational definitions need two distinct mentions")
        return self.directed(m1, m2, topic), self.directed(m2, m1, topic)


def generate_singleton(mention: Mention, topic: Topic, retrieval: RetrievalPipeline | None,
                       generator: Generator, cache: DefinitionCache, **kwargs) -> SingletonDefinition:
    return DefinitionGenerator(generator, cache, retrieval, **kwargs).singleton(mention, topic)


def generate_relational(pair: tuple[Mention, Mention], topic: Topic, retrieval: RetrievalPipeline | None,
                        generator: Generator, cache: DefinitionCache, **kwargs):
    return DefinitionGenerator(generator, cache, retrieval, **kwargs).relational(pair[0], pair[1], topic)
