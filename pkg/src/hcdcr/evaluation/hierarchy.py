"""Cluster-level hierarchy score and path-distance ratio."""
from __future__ import annotations

from dataclasses import dataclass

import networkx as nx

from ..graph import ClusterGraph, GraphError
from .metrics import MetricError, Score, f1

OVERLAP_MODES = ("any", "half")


def clusters_match(pred_cluster, gold_cluster, mode: str = "any") -> bool:
    shared = len(set(pred_cluster) & set(gold_cluster))
    if mode == "any":
        return shared > 0
    if mode == "half":
        return shared >= len(pred_cluster) / 2 and shared >= len(gold_cluster) / 2
    raise ValueError(f"unknown overlap mode {mode!r}")


def _check(gold: ClusterGraph, pred: ClusterGraph) -> None:
    try:
        gold.validate()
        pred.validate()
    except GraphError as exc:
        raise MetricError(f"invalid cluster graph: {exc}") from exc
    if gold.mentions != pred.mentions:
        raise MetricError("gold and predicted graphs cover different mentions")


def _edge_hits(edges_a, clusters_a, edges_b, clusters_b, matcher) -> int:
    hits = 0
    for pa, ca in edges_a:
        if any(matcher(clusters_a[pa], clusters_b[pb]) and matcher(clusters_a[ca], clusters_b[cb])
               for pb, cb in edges_b):
            hits += 1
    return hits


def hierarchy_counts(gold: ClusterGraph, pred: ClusterGraph, overlap_mode: str = "any") -> tuple[int, int, int, int]:
    """(recalled gold edges, gold edges, correct pred edges, pred edges)."""
    def matcher(p, g):
        return clusters_match(p, g, overlap_mode)

    recalled = _edge_hits(gold.edges, gold.clusters, pred.edges, pred.clusters,
                          lambda g, p: matcher(p, g))
    correct = _edge_hits(pred.edges, pred.clusters, gold.edges, gold.clusters, matcher)
    return recalled, len(gold.edges), correct, len(pred.edges)


def score_from_counts(recalled, n_gold, correct, n_pred) -> Score:
    if n_gold == 0 and n_pred == 0:
        return Score(1.0, 1.0, 1.0)
    r = recalled / n_gold if n_gold else 0.0
    p = correct / n_pred if n_pred else 0.0
    return Score(r, p, f1(r, p))


def hierarchy_score(gold: ClusterGraph, pred: ClusterGraph, overlap_mode: str = "any") -> Score:
    """Edge recall/precision where clusters match by any overlap or by half-overlap on both sides.

    Two edgeless graphs score (1, 1, 1); otherwise an empty denominator gives 0.
    """
    _check(gold, pred)
    return score_from_counts(*hierarchy_counts(gold, pred, overlap_mode))


def align_clusters(gold: ClusterGraph, pred: ClusterGraph) -> dict[int, int]:
    """Map each pred cluster index to the gold cluster it overlaps most (unaligned if none)."""
    gold_of = {m: i for i, c in enumerate(gold.clusters) for m in c}
    alignment = {}
    for j, cluster in enumerate(pred.clusters):
        counts: dict[int, int] = {}
        for m in cluster:
            g = gold_of.get(m)
            if g is not None:
                counts[g] = counts.get(g, 0) + 1
        if counts:
            alignment[j] = min(counts, key=lambda g: (-counts[g], g))
    return alignment


def path_counts(gold: ClusterGraph, pred: ClusterGraph) -> tuple[int, int]:
    """(matching distances, connected gold cluster pairs)."""
    gold_dist = dict(nx.all_pairs_shortest_path_length(gold.digraph().to_undirected()))
    pred_dist = dict(nx.all_pairs_shortest_path_length(pred.digraph().to_undirected()))
    aligned_to: dict[int, list[int]] = {}
    for j, g in align_clusters(gold, pred).items():
        aligned_to.setdefault(g, []).append(j)

    matches = total = 0
    n = len(gold.clusters)
    for a in range(n):
        for b in range(a + 1, n):
            d_gold = gold_dist[a].get(b)
            if d_gold is None:
                continue
            total += 1
            candidates = [pred_dist[x][y] for x in aligned_to.get(a, ()) for y in aligned_to.get(b, ())
                          if y in pred_dist[x]]
            if candidates and min(candidates) == d_gold:
                matches += 1
    return matches, total


def path_ratio(gold: ClusterGraph, pred: ClusterGraph) -> float:
    """Share of connected gold cluster pairs whose aligned pred clusters are equally far apart.

    Distances are undirected shortest paths; 1.0 when no gold clusters are connected.
    """
    _check(gold, pred)
    matches, total = path_counts(gold, pred)
    return matches / total if total else 1.0


@dataclass(frozen=True)
class HierarchyReport:
    hierarchy: Score
    hierarchy_50: Score
    path_ratio: float

    def as_dict(self) -> dict:
        return {"hierarchy": self.hierarchy._asdict(), "hierarchy_50": self.hierarchy_50._asdict(),
                "path_ratio": self.path_ratio}


def evaluate_hierarchy(gold: ClusterGraph, pred: ClusterGraph) -> HierarchyReport:
    return HierarchyReport(hierarchy_score(gold, pred, "any"), hierarchy_score(gold, pred, "half"),
                           path_ratio(gold, pred))
