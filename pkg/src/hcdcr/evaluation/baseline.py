"""Edit-distance clustering baseline and hard-topic selection."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

from ..corpus import Topic
from ..graph import Partition, cluster_by_similarity, gold_graph
from .levenshtein import lexical_similarity
from .metrics import evaluate_coreference


@dataclass(frozen=True)
class TopicScore:
    topic_id: str
    baseline_conll_f1: float


def lexical_baseline_cluster(topic: Topic, tau_c: float = 0.5) -> Partition:
    surfaces = {m.mention_id: m.surface for m in topic.mentions}
    return cluster_by_similarity(list(surfaces),
                                 lambda a, b: lexical_similarity(surfaces[a], surfaces[b]), tau_c)


def baseline_score(topic: Topic, tau_c: float = 0.5) -> TopicScore:
    gold = gold_graph(topic).clusters
    pred = lexical_baseline_cluster(topic, tau_c)
    return TopicScore(topic.topic_id, evaluate_coreference(gold, pred).conll_f1)


def rank_topics(topics: Sequence[Topic], tau_c: float = 0.5) -> list[TopicScore]:
    """Baseline CoNLL F1 per topic, hardest first (ties by topic id)."""
    for t in topics:
        if t.gold is None:
            raise ValueError(f"topic {t.topic_id!r} has no gold annotation")
    scores = [baseline_score(t, tau_c) for t in topics]
    return sorted(scores, key=lambda s: (s.baseline_conll_f1, s.topic_id))


def select_hard_subset(topics: Sequence[Topic], fraction: float, tau_c: float = 0.5,
                       ranking: Sequence[TopicScore] | None = None) -> list[str]:
    """Ids of the ``floor(fraction * len(topics))`` topics the baseline handles worst."""
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    ranking = rank_topics(topics, tau_c) if ranking is None else ranking
    count = math.floor(fraction * len(topics) + 1e-9)
    return [s.topic_id for s in ranking[:count]]
