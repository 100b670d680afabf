"""Per-topic and aggregate evaluation, and Table-style report rendering."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from statistics import fmean
from typing import Mapping, Sequence

from ..graph import ClusterGraph
from .hierarchy import HierarchyReport, evaluate_hierarchy
from .metrics import CoreferenceReport, evaluate_coreference

COLUMNS = ("Coreference CoNLL F1", "Hierarchy F1", "Hierarchy F1-50%", "Path Ratio")
SHORT_COLUMNS = ("CoNLL F1", "F1", "F1-50%", "Ratio")


@dataclass(frozen=True)
class TopicEvaluation:
    topic_id: str
    coreference: CoreferenceReport
    hierarchy: HierarchyReport

    def headline(self) -> dict:
        return {"conll_f1": self.coreference.conll_f1,
                "hierarchy_f1": self.hierarchy.hierarchy.f1,
                "hierarchy_f1_50": self.hierarchy.hierarchy_50.f1,
                "path_ratio": self.hierarchy.path_ratio}

    def as_dict(self) -> dict:
        return {"topic_id": self.topic_id, **self.coreference.as_dict(), **self.hierarchy.as_dict()}


def evaluate_topic(topic_id: str, gold: ClusterGraph, pred: ClusterGraph) -> TopicEvaluation:
    return TopicEvaluation(topic_id, evaluate_coreference(gold.clusters, pred.clusters),
                           evaluate_hierarchy(gold, pred))


def disjoint_union(graphs: Mapping[str, ClusterGraph]) -> ClusterGraph:
    """Pool several topics' graphs into one, prefixing mention ids with the topic id."""
    clusters, edges = [], {}
    for topic_id in sorted(graphs):
        g = graphs[topic_id]
        offset = len(clusters)
        clusters += [tuple(f"{topic_id}\x1f{m}" for m in c) for c in g.clusters]
        for (p, c) in g.edges:
            edges[(p + offset, c + offset)] = g.edge_confidence.get((p, c), 1.0)
    return ClusterGraph(tuple(clusters), frozenset(edges), edges)


@dataclass(frozen=True)
class EvaluationSummary:
    per_topic: list[TopicEvaluation]
    macro: dict
    micro: dict

    def as_dict(self) -> dict:
        return {"macro": self.macro, "micro": self.micro,
                "topics": [t.as_dict() for t in self.per_topic]}


def evaluate_topics(gold: Mapping[str, ClusterGraph], pred: Mapping[str, ClusterGraph],
                    topic_ids: Sequence[str] | None = None) -> EvaluationSummary:
    """Macro averages per-topic scores; micro pools every topic into one graph."""
    ids = sorted(gold) if topic_ids is None else sorted(topic_ids)
    per_topic = [evaluate_topic(t, gold[t], pred[t]) for t in ids]
    if per_topic:
        macro = {k: fmean(t.headline()[k] for t in per_topic) for k in per_topic[0].headline()}
        micro = evaluate_topic("*", disjoint_union({t: gold[t] for t in ids}),
                               disjoint_union({t: pred[t] for t in ids})).headline()
    else:
        macro, micro = {}, {}
    return EvaluationSummary(per_topic, macro, micro)


@dataclass(frozen=True)
class ReportRow:
    name: str
    conll_f1: float
    hierarchy_f1: float
    hierarchy_f1_50: float
    path_ratio: float

    @classmethod
    def from_scores(cls, name: str, scores: Mapping[str, float]) -> "ReportRow":
        return cls(name, scores["conll_f1"], scores["hierarchy_f1"], scores["hierarchy_f1_50"],
                   scores["path_ratio"])

    def cells(self) -> list[str]:
        return [f"{100 * v:.2f}" for v in (self.conll_f1, self.hierarchy_f1,
                                          self.hierarchy_f1_50, self.path_ratio)]


def format_row(row: ReportRow) -> str:
    return ", ".join(row.cells())


def render_report(rows: Sequence[ReportRow]) -> tuple[str, str]:
    """Render rows as an aligned text table (two header lines) and as CSV."""
    header1 = ["Model", "Coreference", "Hierarchy", "", "Path"]
    header2 = [""] + list(SHORT_COLUMNS)
    body = [[r.name] + r.cells() for r in rows]
    widths = [max(len(line[i]) for line in [header1, header2] + body) for i in range(5)]

    def fmt(line):
        return " | ".join([line[0].ljust(widths[0])] + [c.rjust(w) for c, w in zip(line[1:], widths[1:])]).rstrip()

    rule = "-+-".join("-" * w for w in widths)
    text = "\n".join([fmt(header1), fmt(header2), rule] + [fmt(b) for b in body]) + "\n"

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["Model"] + list(COLUMNS))
    writer.writerows(body)
    return text, buf.getvalue()
