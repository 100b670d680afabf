"""Mention-pair enumeration, scorer input serialization and 4-way pair scoring."""
from __future__ import annotations

import enum
import itertools
import json
import logging
import math
import random
import re
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Protocol, Sequence

from .corpus import Mention, Topic
from .definitions import load_template
from .evaluation.levenshtein import lexical_similarity

logger = logging.getLogger(__name__)


class RelationClass(enum.IntEnum):
    NONE = 0
    COREF = 1
    FIRST_PARENT = 2   # first -> second: the first mention's cluster is the parent
    SECOND_PARENT = 3  # second -> first


STAGES = ("none-def", "singleton", "relational")


class SerializationError(ValueError):
    pass


class ScoringError(RuntimeError):
    pass


@dataclass(frozen=True, order=True)
class MentionPair:
    first: str
    second: str

    def __post_init__(self):
        if self.first == self.second:
            raise ValueError("a mention pair needs two distinct mentions")
        if self.first > self.second:
            raise ValueError(f"pair ({self.first!r}, {self.second!r}) is not in canonical order")

    @classmethod
    def of(cls, a: str, b: str) -> "MentionPair":
        return cls(a, b) if a < b else cls(b, a)


def enumerate_pairs(topic: Topic) -> list[MentionPair]:
    return [MentionPair(a, b) for a, b in itertools.combinations(topic.mention_ids, 2)]


def gold_relation(topic: Topic, pair: MentionPair) -> RelationClass:
    """Gold class of a canonical pair, from direct gold hierarchy edges."""
    if topic.gold is None:
        raise ValueError(f"topic {topic.topic_id!r} has no gold annotation")
    c1 = topic.gold.cluster_of[pair.first]
    c2 = topic.gold.cluster_of[pair.second]
    if c1 == c2:
        return RelationClass.COREF
    if (c1, c2) in topic.gold.hierarchy_edges:
        return RelationClass.FIRST_PARENT
    if (c2, c1) in topic.gold.hierarchy_edges:
        return RelationClass.SECOND_PARENT
    return RelationClass.NONE


def softmax(logits: Sequence[float]) -> tuple[float, ...]:
    values = [float(x) for x in logits]
    if not all(math.isfinite(x) for x in values):
        raise ArithmeticError(f"non-finite logits {values}")
    top = max(values)
    exps = [math.exp(x - top) for x in values]
    total = math.fsum(exps)
    return tuple(e / total for e in exps)


def pairwise_loss(predictions: Sequence[Sequence[float]], golds: Sequence[int]) -> float:
    """Mean negative log-probability of the gold class."""
    if len(predictions) != len(golds):
        raise ValueError(f"{len(predictions)} predictions but {len(golds)} gold labels")
    if not predictions:
        raise ValueError("pairwise_loss needs at least one pair")
    total = 0.0
    for dist, gold in zip(predictions, golds):
        p = dist[int(gold)]
        if p <= 0.0:
            raise ArithmeticError("gold-class probability is 0: loss is infinite")
        total -= math.log(p)
    return total / len(predictions)


# --- scorer inputs -----------------------------------------------------------

@dataclass(frozen=True)
class PairInput:
    """Everything a serializer needs to render one canonical pair."""

    topic_id: str
    pair: MentionPair
    first: Mention
    second: Mention
    first_paragraph: tuple[str, ...]
    second_paragraph: tuple[str, ...]
    first_definition: str | None = None
    second_definition: str | None = None

    @property
    def has_definitions(self) -> bool:
        return self.first_definition is not None and self.second_definition is not None


def pair_input(topic: Topic, pair: MentionPair, definitions: tuple[str, str] | None = None) -> PairInput:
    m1, m2 = topic.mention(pair.first), topic.mention(pair.second)
    d1, d2 = definitions if definitions is not None else (None, None)
    return PairInput(topic.topic_id, pair, m1, m2, topic.paragraph_of(m1), topic.paragraph_of(m2), d1, d2)


def _mention_lines(item: PairInput, with_definitions: bool) -> list[str]:
    lines = [
        f"Mention 1: {item.first.surface}",
        f"Context 1: {item.first.local_context}",
        f"Mention 2: {item.second.surface}",
        f"Context 2: {item.second.local_context}",
    ]
    if with_definitions:
        if not item.has_definitions:
            raise SerializationError(f"pair {item.pair} is missing a definition")
        lines += [f"Definition 1: {item.first_definition}", f"Definition 2: {item.second_definition}"]
    return lines


def serialize_chatml(item: PairInput, system: str | None = None, require_definitions: bool = False) -> str:
    if system is None:
        system = load_template("chatml_system")
    with_defs = require_definitions or item.has_definitions
    user = "\n".join(_mention_lines(item, with_defs))
    return (f"<|im_start|>system\n{system.strip()}<|im_end|>\n"
            f"<|im_start|>user\n{user}<|im_end|>\n"
            f"<|im_start|>assistant\n")


def _marker_block(mention: Mention, tokens: Sequence[str], definition: str | None) -> str:
    if not 0 <= mention.start < mention.end <= len(tokens):
        raise SerializationError(
            f"span [{mention.start}, {mention.end}) of {mention.mention_id!r} not in its paragraph")
    body = (list(tokens[:mention.start]) + ["<m>"] + list(tokens[mention.start:mention.end])
            + ["</m>"] + list(tokens[mention.end:]))
    if definition is not None:
        body += ["<def>", definition, "</def>"]
    return "<s> " + " ".join(body) + " </s>"


def serialize_marker_format(item: PairInput, require_definitions: bool = False) -> str:
    if require_definitions and not item.has_definitions:
        raise SerializationError(f"pair {item.pair} is missing a definition")
    return (_marker_block(item.first, item.first_paragraph, item.first_definition)
            + _marker_block(item.second, item.second_paragraph, item.second_definition))


def build_fewshot_prompt(examples: Sequence[tuple[PairInput, RelationClass]], target: PairInput,
                         with_definitions: bool, instruction: str | None = None,
                         balanced: bool = False) -> str:
    if balanced:
        labels = sorted(int(label) for _, label in examples)
        if labels != [int(c) for c in RelationClass]:
            raise ValueError(f"balanced few-shot prompt needs one example per class, got labels {labels}")
    if instruction is None:
        instruction = load_template("fewshot_instruction")
    parts = [instruction.strip()]
    for i, (item, label) in enumerate(examples, 1):
        block = [f"Example {i}:"] + _mention_lines(item, with_definitions) + [f"LABEL: {int(label)}"]
        parts.append("\n".join(block))
    parts.append("\n".join(["Target:"] + _mention_lines(target, with_definitions)))
    return "\n\n".join(parts) + "\n"


def sample_fewshot_examples(pool: Sequence[tuple[PairInput, RelationClass]], rng: random.Random,
                            balanced: bool = True, n: int = 4) -> list[tuple[PairInput, RelationClass]]:
    """Uniformly sample demonstrations; one per class (in class order) when ``balanced``."""
    if not balanced:
        return rng.sample(list(pool), min(n, len(pool)))
    picked = []
    for cls in RelationClass:
        options = [ex for ex in pool if ex[1] == cls]
        if not options:
            raise ValueError(f"no few-shot candidates for class {cls.name}")
        picked.append(rng.choice(options))
    return picked


_LABEL = re.compile(r"^\s*LABEL\s*:\s*([0-3])\b", re.IGNORECASE)


def parse_icl_response(text: str) -> RelationClass:
    first_line = text.strip().splitlines()[0] if text.strip() else ""
    match = _LABEL.match(first_line)
    if match is None:
        logger.warning("unparseable model answer, mapping to NONE: %r", first_line[:80])
        return RelationClass.NONE
    return RelationClass(int(match.group(1)))


class FewShotSerializer:
    def __init__(self, examples, with_definitions: bool, instruction: str | None = None,
                 balanced: bool = True):
        self.examples = list(examples)
        self.with_definitions = with_definitions
        self.instruction = instruction
        self.balanced = balanced

    def __call__(self, item: PairInput) -> str:
        return build_fewshot_prompt(self.examples, item, self.with_definitions, self.instruction,
                                    self.balanced)


def make_serializer(kind: str, **kwargs) -> Callable[[PairInput], str]:
    if kind == "chatml":
        return lambda item: serialize_chatml(item, kwargs.get("system"))
    if kind == "marker":
        return serialize_marker_format
    if kind == "fewshot":
        return FewShotSerializer(kwargs["examples"], kwargs.get("with_definitions", False),
                                 kwargs.get("instruction"), kwargs.get("balanced", True))
    raise ValueError(f"unknown serializer {kind!r}")


# --- scorers -----------------------------------------------------------------

class PairScorer(Protocol):
    def score(self, item: PairInput, text: str) -> Sequence[float]: ...


def _log_probs(probs: Sequence[float]) -> list[float]:
    return [math.log(p) for p in probs]


class OracleScorer:
    """Test double that reads the gold annotation: 0.97 on the gold class, 0.01 elsewhere."""

    def __init__(self, topics: Iterable[Topic], p_gold: float = 0.97):
        self.topics = {t.topic_id: t for t in topics}
        self.p_gold = p_gold

    def score(self, item: PairInput, text: str) -> list[float]:
        gold = gold_relation(self.topics[item.topic_id], item.pair)
        rest = (1.0 - self.p_gold) / 3
        return _log_probs([self.p_gold if c == gold else rest for c in RelationClass])


class LexicalBaselineScorer:
    """Surface-similarity scorer: Coref mass = 1 - normalized edit distance."""

    def __init__(self, eps: float = 1e-6):
        self.eps = eps

    def distribution(self, surface1: str, surface2: str) -> list[float]:
        s = lexical_similarity(surface1, surface2)
        raw = [max(1.0 - s, self.eps), max(s, self.eps), self.eps, self.eps]
        total = sum(raw)
        return [x / total for x in raw]

    def score(self, item: PairInput, text: str) -> list[float]:
        return _log_probs(self.distribution(item.first.surface, item.second.surface))


class FewShotScorer:
    """Scores with a generative model answering few-shot prompts."""

    def __init__(self, generator, eps: float = 1e-6):
        self.generator = generator
        self.eps = eps

    def score(self, item: PairInput, text: str) -> list[float]:
        label = parse_icl_response(self.generator.generate(text))
        return _log_probs([1 - 3 * self.eps if c == label else self.eps for c in RelationClass])


class CountingScorer:
    def __init__(self, inner: PairScorer):
        self.inner = inner
        self.calls = 0
        self._lock = threading.Lock()

    def score(self, item, text):
        with self._lock:
            self.calls += 1
        return self.inner.score(item, text)


# --- scored pairs ------------------------------------------------------------

@dataclass(frozen=True)
class ScoredPair:
    topic_id: str
    pair: MentionPair
    distribution: tuple[float, ...]
    stage: str = "none-def"
    definitions_used: tuple[str, ...] = field(default=())

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}")
        if (self.stage == "none-def") != (not self.definitions_used):
            raise ValueError(f"stage {self.stage!r} inconsistent with definitions {self.definitions_used}")

    @property
    def predicted(self) -> RelationClass:
        d = self.distribution
        return RelationClass(max(range(4), key=lambda i: (d[i], -i)))

    @property
    def confidence(self) -> float:
        return self.distribution[self.predicted]

    def to_record(self) -> dict:
        return {"topic_id": self.topic_id, "first": self.pair.first, "second": self.pair.second,
                "p": list(self.distribution), "stage": self.stage,
                "definitions": list(self.definitions_used)}

    @classmethod
    def from_record(cls, rec: dict) -> "ScoredPair":
        return cls(rec["topic_id"], MentionPair(rec["first"], rec["second"]), tuple(rec["p"]),
                   rec["stage"], tuple(rec.get("definitions", ())))


def definition_texts(augmenter: str, pair: MentionPair, definitions: Mapping | None):
    """Return ``((text1, text2), keys)`` for the chosen augmentation."""
    if augmenter == "none":
        return None, ()
    if definitions is None:
        raise SerializationError(f"augmenter {augmenter!r} needs definitions")
    if augmenter == "singleton":
        lookup = [pair.first, pair.second]
        used = (pair.first, pair.second)
    elif augmenter == "relational":
        lookup = [(pair.first, pair.second), (pair.second, pair.first)]
        used = (f"{pair.first}->{pair.second}", f"{pair.second}->{pair.first}")
    else:
        raise ValueError(f"unknown augmenter {augmenter!r}")
    try:
        texts = tuple(definitions[k] for k in lookup)
    except KeyError as exc:
        raise SerializationError(f"no {augmenter} definition for {exc.args[0]!r}") from None
    return texts, used


_STAGE_OF = {"none": "none-def", "singleton": "singleton", "relational": "relational"}


def score_pairs(pairs: Sequence[MentionPair], topic: Topic, augmenter: str, scorer: PairScorer,
                serializer: Callable[[PairInput], str] | str = "chatml",
                definitions: Mapping | None = None, parallelism: int = 1) -> list[ScoredPair]:
    """Score every pair; output order equals input order.

    ``definitions`` maps mention ids to singleton texts, or ``(anchor, other)``
    tuples to relational texts.
    """
    if isinstance(serializer, str):
        serializer = make_serializer(serializer)
    stage = _STAGE_OF[augmenter]

    def one(pair):
        texts, used = definition_texts(augmenter, pair, definitions)
        item = pair_input(topic, pair, texts)
        text = serializer(item)
        try:
            dist = softmax(scorer.score(item, text))
        except Exception as exc:
            raise ScoringError(f"scoring failed for pair ({pair.first!r}, {pair.second!r}) "
                               f"in topic {topic.topic_id!r}: {exc}") from exc
        return ScoredPair(topic.topic_id, pair, dist, stage, tuple(used))

    if parallelism > 1 and len(pairs) > 1:
        with ThreadPoolExecutor(parallelism) as pool:
            return list(pool.map(one, pairs))
    return [one(p) for p in pairs]


def write_scored_pairs(scored: Iterable[ScoredPair], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for sp in scored:
            fh.write(json.dumps(sp.to_record()) + "\n")


def read_scored_pairs(path) -> list[ScoredPair]:
    with open(path, encoding="utf-8") as fh:
        return [ScoredPair.from_record(json.loads(line)) for line in fh if line.strip()]
