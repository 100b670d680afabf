"""Coreference clusters and the cluster hierarchy graph from pair distributions."""
from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import networkx as nx
import numpy as np

from .corpus import Topic
from .scoring import RelationClass, ScoredPair

Partition = list[list[str]]


class GraphError(ValueError):
    pass


@dataclass(frozen=True)
class ClusteringConfig:
    tau_c: float = 0.5
    linkage: str = "average"

    def __post_init__(self):
        if not 0.0 <= self.tau_c <= 1.0:
            raise ValueError(f"tau_c must lie in [0, 1], got {self.tau_c}")
        if self.linkage != "average":
            raise ValueError(f"unsupported linkage {self.linkage!r}")


@dataclass(frozen=True)
class HierarchyConfig:
    tau_h: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.tau_h <= 1.0:
            raise ValueError(f"tau_h must lie in [0, 1], got {self.tau_h}")


@dataclass(frozen=True)
class ClusterGraph:
    clusters: tuple[tuple[str, ...], ...]
    edges: frozenset[tuple[int, int]] = frozenset()
    edge_confidence: dict = field(default_factory=dict, compare=False)

    def validate(self) -> None:
        seen = set()
        for c in self.clusters:
            if not c:
                raise GraphError("empty cluster")
            overlap = seen.intersection(c)
            if overlap:
                raise GraphError(f"mentions {sorted(overlap)} appear in more than one cluster")
            seen.update(c)
        n = len(self.clusters)
        for p, c in self.edges:
            if not (0 <= p < n and 0 <= c < n):
                raise GraphError(f"edge ({p}, {c}) references a missing cluster")
            if p == c:
                raise GraphError(f"self-loop on cluster {p}")
        if not nx.is_directed_acyclic_graph(self.digraph()):
            raise GraphError("cluster graph has a cycle")

    @property
    def mentions(self) -> set[str]:
        return {m for c in self.clusters for m in c}

    def digraph(self) -> nx.DiGraph:
        g = nx.DiGraph()
        g.add_nodes_from(range(len(self.clusters)))
        g.add_edges_from(sorted(self.edges))
        return g

    def to_record(self, topic_id: str) -> dict:
        return {"topic_id": topic_id,
                "clusters": [list(c) for c in self.clusters],
                "edges": [[p, c, self.edge_confidence.get((p, c), 1.0)] for p, c in sorted(self.edges)]}

    @classmethod
    def from_record(cls, rec: dict) -> "ClusterGraph":
        edges = {(int(p), int(c)): float(conf) for p, c, conf in rec["edges"]}
        return cls(tuple(tuple(c) for c in rec["clusters"]), frozenset(edges), edges)


def canonical_partition(partition: Iterable[Iterable[str]]) -> Partition:
    """Sort members of each cluster and order clusters by their smallest member."""
    clusters = [sorted(c) for c in partition if c]
    return sorted(clusters, key=lambda c: c[0])


def agglomerate(similarity: np.ndarray, tau_c: float) -> list[list[int]]:
    """Average-linkage agglomerative clustering over item indices ``0..n-1``.

    Starting from singletons, the two clusters with the highest average
    pairwise similarity are merged while that average is at least ``tau_c``.
    Ties go to the lexicographically smallest pair of (smallest member index).
    """
    n = similarity.shape[0]
    clusters = [[i] for i in range(n)]
    sums = np.array(similarity, dtype=np.float64, copy=True)
    sizes = np.ones(n)
    while len(clusters) > 1:
        avg = sums / np.outer(sizes, sizes)
        avg[np.tril_indices(len(clusters))] = -np.inf
        best = avg.max()
        if best < tau_c:
            break
        # clusters stay ordered by smallest member, so row-major order is the tie-break order
        i, j = np.argwhere(avg == best)[0]
        clusters[i] = clusters[i] + clusters[j]
        del clusters[j]
        sums[i, :] += sums[j, :]
        sums[:, i] += sums[:, j]
        sums = np.delete(np.delete(sums, j, axis=0), j, axis=1)
        sizes[i] += sizes[j]
        sizes = np.delete(sizes, j)
    return [sorted(c) for c in clusters]


def cluster_by_similarity(mention_ids: Sequence[str], sim_of, tau_c: float) -> Partition:
    ids = sorted(mention_ids)
    n = len(ids)
    sim = np.zeros((n, n))
    for a in range(n):
        for b in range(a + 1, n):
            sim[a, b] = sim[b, a] = sim_of(ids[a], ids[b])
    return [[ids[i] for i in c] for c in agglomerate(sim, tau_c)]


def cluster_mentions(pairs: Sequence[ScoredPair], mention_ids: Sequence[str],
                     config: ClusteringConfig = ClusteringConfig()) -> Partition:
    """Cluster one topic's mentions using P(Coref) as similarity; unscored pairs count as 0."""
    coref = {(sp.pair.first, sp.pair.second): sp.distribution[RelationClass.COREF] for sp in pairs}
    return cluster_by_similarity(mention_ids, lambda a, b: coref.get((a, b), 0.0), config.tau_c)


def _remove_cycles(edges: dict[tuple[int, int], float], n: int) -> dict[tuple[int, int], float]:
    g = nx.DiGraph()
    g.add_nodes_from(range(n))
    g.add_edges_from(sorted(edges))
    edges = dict(edges)
    while True:
        try:
            cycle = nx.find_cycle(g)
        except nx.NetworkXNoCycle:
            return edges
        weakest = min(((u, v) for u, v in cycle), key=lambda e: (edges[e], e))
        g.remove_edge(*weakest)
        del edges[weakest]


def induce_hierarchy(partition: Partition, pairs: Sequence[ScoredPair],
                     config: HierarchyConfig = HierarchyConfig()) -> ClusterGraph:
    """Directed cluster edges from averaged cross-cluster pair distributions.

    For clusters A < B the mean of [none + coref, A->B, B->A] over scored
    cross pairs is taken; an edge is emitted when a directed class is the
    argmax and reaches ``tau_h``. Cycles are then broken by deleting their
    weakest edge.
    """
    clusters = canonical_partition(partition)
    where = {m: i for i, c in enumerate(clusters) for m in c}
    totals: dict[tuple[int, int], np.ndarray] = defaultdict(lambda: np.zeros(3))
    counts: dict[tuple[int, int], int] = defaultdict(int)
    for sp in sorted(pairs, key=lambda sp: sp.pair):
        a, b = where.get(sp.pair.first), where.get(sp.pair.second)
        if a is None or b is None or a == b:
            continue
        p = sp.distribution
        none = p[RelationClass.NONE] + p[RelationClass.COREF]
        if a < b:
            totals[(a, b)] += (none, p[RelationClass.FIRST_PARENT], p[RelationClass.SECOND_PARENT])
        else:
            totals[(b, a)] += (none, p[RelationClass.SECOND_PARENT], p[RelationClass.FIRST_PARENT])
        counts[(min(a, b), max(a, b))] += 1

    edges = {}
    for (a, b), total in sorted(totals.items()):
        none, ab, ba = total / counts[(a, b)]
        if max(ab, ba) <= none:
            continue
        edge, conf = ((a, b), ab) if ab >= ba else ((b, a), ba)
        if conf >= config.tau_h:
            edges[edge] = float(conf)
    edges = _remove_cycles(edges, len(clusters))
    return ClusterGraph(tuple(tuple(c) for c in clusters), frozenset(edges), edges)


def gold_graph(topic: Topic) -> ClusterGraph:
    if topic.gold is None:
        raise GraphError(f"topic {topic.topic_id!r} has no gold annotation")
    members = defaultdict(list)
    for mid, cid in topic.gold.cluster_of.items():
        members[cid].append(mid)
    order = sorted(members, key=lambda cid: min(members[cid]))
    index = {cid: i for i, cid in enumerate(order)}
    clusters = tuple(tuple(sorted(members[cid])) for cid in order)
    edges = {(index[p], index[c]): 1.0 for p, c in topic.gold.hierarchy_edges}
    return ClusterGraph(clusters, frozenset(edges), edges)


def write_graphs(graphs: dict[str, ClusterGraph], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for topic_id in sorted(graphs):
            fh.write(json.dumps(graphs[topic_id].to_record(topic_id)) + "\n")


def read_graphs(path) -> dict[str, ClusterGraph]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                out[rec["topic_id"]] = ClusterGraph.from_record(rec)
    return out
