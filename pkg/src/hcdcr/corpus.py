"""Topics, documents, mentions and gold annotations.

Topics are read from a canonical JSONL layout, one topic per line::

    {"topic_id": str,
     "documents": [{"doc_id": str, "paragraphs": [[token, ...], ...]}, ...],
     "mentions": [{"mention_id": str, "doc_id": str, "paragraph": int,
                   "start": int, "end": int}, ...],
     "gold": {"clusters": {mention_id: cluster_id, ...},
              "edges": [[parent_id, child_id], ...]} | null}

Gold edges point from parent cluster to child cluster.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import networkx as nx

logger = logging.getLogger(__name__)


class IngestError(ValueError):
    """A topic file line could not be parsed."""


class TopicValidationError(ValueError):
    """A parsed topic violates a structural invariant."""

    def __init__(self, topic_id, violations):
        self.topic_id = topic_id
        self.violations = list(violations)
        super().__init__(f"topic {topic_id!r}: " + "; ".join(self.violations))


@dataclass(frozen=True)
class Document:
    doc_id: str
    paragraphs: tuple[tuple[str, ...], ...]


@dataclass(frozen=True)
class Mention:
    mention_id: str
    doc_id: str
    paragraph_index: int
    start: int
    end: int
    surface: str = ""
    local_context: str = ""

    @property
    def token_span(self) -> tuple[int, int]:
        return (self.start, self.end)


@dataclass(frozen=True)
class GoldAnnotation:
    cluster_of: dict[str, str]
    hierarchy_edges: frozenset[tuple[str, str]] = frozenset()

    def cluster_ids(self) -> list[str]:
        return sorted(set(self.cluster_of.values()))


@dataclass(frozen=True)
class Topic:
    topic_id: str
    documents: tuple[Document, ...]
    mentions: tuple[Mention, ...]
    gold: GoldAnnotation | None = None
    _docs: dict = field(default=None, init=False, repr=False, compare=False)
    _mentions: dict = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "_docs", {d.doc_id: d for d in self.documents})
        object.__setattr__(self, "_mentions", {m.mention_id: m for m in self.mentions})

    def document(self, doc_id: str) -> Document:
        try:
            return self._docs[doc_id]
        except KeyError:
            raise LookupError(f"topic {self.topic_id!r} has no document {doc_id!r}") from None

    def mention(self, mention_id: str) -> Mention:
        try:
            return self._mentions[mention_id]
        except KeyError:
            raise LookupError(f"topic {self.topic_id!r} has no mention {mention_id!r}") from None

    def paragraph_of(self, mention: Mention) -> tuple[str, ...]:
        doc = self.document(mention.doc_id)
        if not 0 <= mention.paragraph_index < len(doc.paragraphs):
            raise LookupError(
                f"mention {mention.mention_id!r}: paragraph {mention.paragraph_index} "
                f"not in document {doc.doc_id!r}")
        return doc.paragraphs[mention.paragraph_index]

    @property
    def mention_ids(self) -> list[str]:
        return sorted(self._mentions)


def extract_local_context(mention: Mention, topic: Topic, window: int | None = None) -> str:
    """Return the passage surrounding ``mention``.

    ``window=None`` gives the whole paragraph. Otherwise the span is padded
    by ``window`` tokens on each side, clamped to the paragraph.
    """
    tokens = topic.paragraph_of(mention)
    if window is None:
        return " ".join(tokens)
    if window < 0:
        raise ValueError("window must be >= 0")
    lo = max(0, mention.start - window)
    hi = min(len(tokens), mention.end + window)
    return " ".join(tokens[lo:hi])


def validate_topic(topic: Topic) -> list[str]:
    violations = []
    seen_docs = set()
    for doc in topic.documents:
        if doc.doc_id in seen_docs:
            violations.append(f"duplicate doc_id {doc.doc_id!r}")
        seen_docs.add(doc.doc_id)
        for i, para in enumerate(doc.paragraphs):
            if not para:
                violations.append(f"document {doc.doc_id!r}: paragraph {i} is empty")

    seen_mentions = set()
    for m in topic.mentions:
        if m.mention_id in seen_mentions:
            violations.append(f"duplicate mention_id {m.mention_id!r}")
        seen_mentions.add(m.mention_id)
        doc = topic._docs.get(m.doc_id)
        if doc is None:
            violations.append(f"mention {m.mention_id!r}: unknown doc_id {m.doc_id!r}")
            continue
        if not 0 <= m.paragraph_index < len(doc.paragraphs):
            violations.append(f"mention {m.mention_id!r}: paragraph {m.paragraph_index} out of range")
            continue
        para = doc.paragraphs[m.paragraph_index]
        if not 0 <= m.start < m.end <= len(para):
            violations.append(
                f"mention {m.mention_id!r}: span [{m.start}, {m.end}) outside paragraph "
                f"of length {len(para)}")
            continue
        if m.surface != " ".join(para[m.start:m.end]):
            violations.append(f"mention {m.mention_id!r}: surface does not match span")

    gold = topic.gold
    if gold is not None:
        for mid in sorted(seen_mentions - set(gold.cluster_of)):
            violations.append(f"mention {mid!r} has no gold cluster")
        for mid in sorted(set(gold.cluster_of) - seen_mentions):
            violations.append(f"gold cluster assignment for unknown mention {mid!r}")
        clusters = set(gold.cluster_of.values())
        graph = nx.DiGraph()
        for parent, child in sorted(gold.hierarchy_edges):
            if parent not in clusters or child not in clusters:
                missing = parent if parent not in clusters else child
                violations.append(f"gold edge ({parent!r}, {child!r}): unknown cluster {missing!r}")
                continue
            if parent == child:
                violations.append(f"gold edge self-loop on cluster {parent!r}")
                continue
            graph.add_edge(parent, child)
        if not nx.is_directed_acyclic_graph(graph):
            cycle = nx.find_cycle(graph)
            violations.append(
                "gold hierarchy has a cycle through clusters "
                + ", ".join(repr(u) for u, _ in cycle))
    return violations


def _make_mention(record, documents, line_no):
    try:
        mid = str(record["mention_id"])
        doc_id = str(record["doc_id"])
        para = int(record["paragraph"])
        start, end = int(record["start"]), int(record["end"])
    except (KeyError, TypeError, ValueError) as exc:
        raise IngestError(f"line {line_no}: bad mention record {record!r}: {exc}") from exc
    doc = documents.get(doc_id)
    surface = context = ""
    if doc is not None and 0 <= para < len(doc.paragraphs):
        tokens = doc.paragraphs[para]
        if 0 <= start < end <= len(tokens):
            surface = " ".join(tokens[start:end])
            context = " ".join(tokens)
    return Mention(mid, doc_id, para, start, end, surface, context)


def topic_from_record(record: dict, line_no: int = 0) -> Topic:
    try:
        topic_id = str(record["topic_id"])
        documents = tuple(
            Document(str(d["doc_id"]), tuple(tuple(str(t) for t in p) for p in d["paragraphs"]))
            for d in record["documents"])
        raw_mentions = record["mentions"]
    except (KeyError, TypeError) as exc:
        raise IngestError(f"line {line_no}: malformed topic record: {exc!r}") from exc
    by_id = {d.doc_id: d for d in documents}
    mentions = tuple(_make_mention(m, by_id, line_no) for m in raw_mentions)
    gold = None
    raw_gold = record.get("gold")
    if raw_gold is not None:
        try:
            cluster_of = {str(k): str(v) for k, v in raw_gold["clusters"].items()}
            edges = frozenset((str(p), str(c)) for p, c in raw_gold.get("edges", []))
        except (KeyError, TypeError, ValueError, AttributeError) as exc:
            raise IngestError(f"line {line_no}: malformed gold annotation: {exc!r}") from exc
        gold = GoldAnnotation(cluster_of, edges)
    return Topic(topic_id, documents, mentions, gold)


def topic_to_record(topic: Topic) -> dict:
    return {
        "topic_id": topic.topic_id,
        "documents": [{"doc_id": d.doc_id, "paragraphs": [list(p) for p in d.paragraphs]}
                      for d in topic.documents],
        "mentions": [{"mention_id": m.mention_id, "doc_id": m.doc_id,
                      "paragraph": m.paragraph_index, "start": m.start, "end": m.end}
                     for m in topic.mentions],
        "gold": None if topic.gold is None else {
            "clusters": dict(sorted(topic.gold.cluster_of.items())),
            "edges": [list(e) for e in sorted(topic.gold.hierarchy_edges)],
        },
    }


def ingest_topics(path, format: str = "canonical-jsonl") -> list[Topic]:
    if format != "canonical-jsonl":
        raise ValueError(f"unsupported topic format {format!r}")
    topics = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise IngestError(f"line {line_no}: {exc.msg}") from exc
            if not isinstance(record, dict):
                raise IngestError(f"line {line_no}: expected a JSON object")
            topic = topic_from_record(record, line_no)
            violations = validate_topic(topic)
            if violations:
                raise TopicValidationError(topic.topic_id, violations)
            topics.append(topic)
    logger.info("ingested %d topics from %s", len(topics), path)
    return topics


def write_topics(topics: Iterable[Topic], path) -> Path:
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        for topic in topics:
            fh.write(json.dumps(topic_to_record(topic), sort_keys=True) + "\n")
    return path


def with_context_window(topic: Topic, window: int | None) -> Topic:
    """Copy of ``topic`` whose mentions carry windowed local contexts."""
    if window is None:
        return topic
    mentions = tuple(
        Mention(m.mention_id, m.doc_id, m.paragraph_index, m.start, m.end, m.surface,
                extract_local_context(m, topic, window))
        for m in topic.mentions)
    return Topic(topic.topic_id, topic.documents, mentions, topic.gold)
