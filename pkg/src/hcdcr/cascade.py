"""Two-stage rescoring: singleton-scored filter/rank, then relational rescoring of survivors."""
from __future__ import annotations

import logging
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

from .corpus import Topic
from .definitions import DefinitionGenerator
from .scoring import (MentionPair, PairInput, PairScorer, RelationClass, ScoredPair,
                      score_pairs)

logger = logging.getLogger(__name__)

PairKey = tuple[str, MentionPair]  # (topic_id, pair)


class CascadeError(RuntimeError):
    pass


class MergeError(ValueError):
    pass


@dataclass(frozen=True)
class CascadeConfig:
    theta: float = 0.5
    top_k: int | None = 10  # None: no per-mention cap
    stage2_enabled: bool = True
    on_failure: str = "abort"  # or "fallback" to the stage-1 score

    def __post_init__(self):
        if not 0.0 <= self.theta <= 1.0:
            raise ValueError(f"theta must lie in [0, 1], got {self.theta}")
        if self.top_k is not None and self.top_k < 0:
            raise ValueError(f"top_k must be >= 0, got {self.top_k}")
        if self.on_failure not in ("abort", "fallback"):
            raise ValueError(f"unknown failure policy {self.on_failure!r}")


@dataclass
class CandidateSet:
    selected: set[PairKey] = field(default_factory=set)
    # key -> (stage-1 confidence, mention ids whose ranking selected it)
    provenance: dict[PairKey, tuple[float, frozenset[str]]] = field(default_factory=dict)

    def __len__(self):
        return len(self.selected)

    def __contains__(self, key):
        return key in self.selected

    def sorted_keys(self) -> list[PairKey]:
        return sorted(self.selected)


def stage1_filter_rank(stage1: Sequence[ScoredPair], config: CascadeConfig) -> CandidateSet:
    """Select pairs for relational rescoring.

    Pairs predicted as NONE are dropped. Each mention ranks its remaining
    pairs by confidence (probability of the predicted class) and keeps those
    at or above ``theta``, at most ``top_k``; the result is the union.
    """
    by_mention: dict[tuple[str, str], list[ScoredPair]] = defaultdict(list)
    for sp in stage1:
        if sp.predicted == RelationClass.NONE:
            continue
        by_mention[(sp.topic_id, sp.pair.first)].append(sp)
        by_mention[(sp.topic_id, sp.pair.second)].append(sp)

    chosen_by: dict[PairKey, set[str]] = defaultdict(set)
    confidence: dict[PairKey, float] = {}
    for (topic_id, mention_id), items in sorted(by_mention.items()):
        items = sorted(items, key=lambda sp: (-sp.confidence, sp.pair))
        kept = [sp for sp in items if sp.confidence >= config.theta]
        if config.top_k is not None:
            kept = kept[:config.top_k]
        for sp in kept:
            key = (topic_id, sp.pair)
            chosen_by[key].add(mention_id)
            confidence[key] = sp.confidence
    return CandidateSet(set(chosen_by),
                        {k: (confidence[k], frozenset(v)) for k, v in chosen_by.items()})


def relational_definitions_for(pair: MentionPair, topic: Topic, definer: DefinitionGenerator) -> dict:
    d1, d2 = definer.relational(topic.mention(pair.first), topic.mention(pair.second), topic)
    return {(pair.first, pair.second): d1.text, (pair.second, pair.first): d2.text}


def stage2_rescore(candidates: CandidateSet, topics: dict[str, Topic], definer: DefinitionGenerator,
                   scorer: PairScorer, serializer: Callable[[PairInput], str] | str = "chatml",
                   stage1: Sequence[ScoredPair] = (), on_failure: str = "abort",
                   parallelism: int = 1) -> list[ScoredPair]:
    """Rescore every candidate with both directed relational definitions in its input."""
    fallback = {(sp.topic_id, sp.pair): sp for sp in stage1}

    def one(key):
        topic_id, pair = key
        topic = topics[topic_id]
        try:
            defs = relational_definitions_for(pair, topic, definer)
            return score_pairs([pair], topic, "relational", scorer, serializer, defs)[0]
        except Exception as exc:
            if on_failure == "fallback" and key in fallback:
                logger.warning("stage 2 failed for %s %s, keeping stage-1 score: %s", topic_id, pair, exc)
                return fallback[key]
            raise CascadeError(f"stage 2 failed for pair ({pair.first!r}, {pair.second!r}) "
                               f"in topic {topic_id!r}: {exc}") from exc

    keys = candidates.sorted_keys()
    if parallelism > 1 and len(keys) > 1:
        with ThreadPoolExecutor(parallelism) as pool:
            results = list(pool.map(one, keys))
    else:
        results = [one(k) for k in keys]
    # fallback entries are stage-1 results, not rescored ones
    return [r for r in results if r.stage == "relational"]


def merge_predictions(stage1: Sequence[ScoredPair], stage2: Sequence[ScoredPair]) -> list[ScoredPair]:
    """Stage-1 pairs in their original order, with stage-2 results replacing their counterparts."""
    index = {(sp.topic_id, sp.pair): i for i, sp in enumerate(stage1)}
    merged = list(stage1)
    for sp in stage2:
        key = (sp.topic_id, sp.pair)
        if key not in index:
            raise MergeError(f"stage-2 pair {key} has no stage-1 counterpart")
        merged[index[key]] = sp
    return merged


@dataclass
class CascadeResult:
    final: list[ScoredPair]
    candidates: CandidateSet
    stage2: list[ScoredPair]

    def manifest(self, config: CascadeConfig, n_stage1: int, counts: dict | None = None) -> dict:
        return {
            "theta": config.theta,
            "top_k": config.top_k,
            "stage2_enabled": config.stage2_enabled,
            "stage1_pairs": n_stage1,
            "candidates": len(self.candidates),
            "stage2_pairs": len(self.stage2),
            "calls": dict(counts or {}),
        }


def run_cascade(stage1: Sequence[ScoredPair], topics: dict[str, Topic], config: CascadeConfig,
                definer: DefinitionGenerator | None, scorer: PairScorer,
                serializer: Callable[[PairInput], str] | str = "chatml",
                parallelism: int = 1) -> CascadeResult:
    candidates = stage1_filter_rank(stage1, config)
    if not config.stage2_enabled:
        return CascadeResult(list(stage1), candidates, [])
    if definer is None:
        raise CascadeError("stage 2 needs a definition generator")
    stage2 = stage2_rescore(candidates, topics, definer, scorer, serializer, stage1,
                            config.on_failure, parallelism)
    return CascadeResult(merge_predictions(stage1, stage2), candidates, stage2)
