"""Dense passage retrieval with a rerank-and-filter step."""
from __future__ import annotations

import hashlib
import json
import logging
import math
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np

logger = logging.getLogger(__name__)

_WORD = re.compile(r"\w+", re.UNICODE)


class RetrievalError(RuntimeError):
    pass


class IndexingError(RetrievalError):
    pass


@dataclass(frozen=True)
class Passage:
    passage_id: str
    source_id: str
    text: str


@dataclass(frozen=True)
class ContextSet:
    mention_id: str
    entries: tuple[tuple[Passage, float], ...] = ()

    @property
    def passages(self) -> list[Passage]:
        return [p for p, _ in self.entries]

    @property
    def passage_ids(self) -> list[str]:
        return [p.passage_id for p, _ in self.entries]

    def __len__(self):
        return len(self.entries)


class Embedder(Protocol):
    dim: int

    def embed(self, text: str) -> np.ndarray: ...


class Reranker(Protocol):
    def score(self, query: str, passages: Sequence[Passage]) -> list[float]: ...


def tokenize(text: str) -> list[str]:
    return [w.lower() for w in _WORD.findall(text)]


class HashingEmbedder:
    """Deterministic bag-of-words embedder using signed feature hashing.

    Vectors are L2-normalised so dot products are cosine similarities.
    """

    def __init__(self, dim: int = 256):
        self.dim = dim

    def embed(self, text: str) -> np.ndarray:
        vec = np.zeros(self.dim)
        for tok in tokenize(text):
            h = int.from_bytes(hashlib.blake2b(tok.encode(), digest_size=8).digest(), "little")
            vec[h % self.dim] += 1.0 if (h >> 63) & 1 else -1.0
        norm = np.linalg.norm(vec)
        return vec / norm if norm > 0 else vec


class LexicalOverlapReranker:
    """Scores a passage by the fraction of distinct query words it contains."""

    def score(self, query: str, passages: Sequence[Passage]) -> list[float]:
        q = set(tokenize(query))
        if not q:
            return [0.0] * len(passages)
        return [len(q & set(tokenize(p.text))) / len(q) for p in passages]


class CorpusIndex:
    """Exact dot-product index; immutable once built."""

    def __init__(self, passages: Sequence[Passage], vectors: np.ndarray, embedder: Embedder | None = None):
        vectors = np.asarray(vectors, dtype=np.float64)
        if vectors.ndim != 2 or vectors.shape[0] != len(passages):
            raise IndexingError("need one vector per passage")
        if not np.all(np.isfinite(vectors)):
            raise IndexingError("index vectors must be finite")
        # sort by passage_id so results never depend on insertion order
        order = sorted(range(len(passages)), key=lambda i: passages[i].passage_id)
        self.passages = [passages[i] for i in order]
        self.vectors = vectors[order]
        self.vectors.setflags(write=False)
        self.embedder = embedder

    def __len__(self):
        return len(self.passages)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def search(self, query_vector, k: int) -> list[tuple[Passage, float]]:
        if k < 1:
            raise ValueError("k must be >= 1")
        q = np.asarray(query_vector, dtype=np.float64)
        if q.shape != (self.dim,):
            raise ValueError(f"query vector has shape {q.shape}, index dim is {self.dim}")
        scores = self.vectors @ q
        # passages are stored in id order, so a stable sort on -score breaks ties by id
        top = np.argsort(-scores, kind="stable")[:k]
        return [(self.passages[i], float(scores[i])) for i in top]

    def save(self, path) -> None:
        np.savez(path, vectors=self.vectors,
                 passages=np.array([json.dumps([p.passage_id, p.source_id, p.text]) for p in self.passages]))

    @classmethod
    def load(cls, path, embedder: Embedder | None = None) -> "CorpusIndex":
        data = np.load(path)
        passages = [Passage(*json.loads(s)) for s in data["passages"]]
        return cls(passages, data["vectors"], embedder)


def index_corpus(corpus: Sequence[Passage], embedder: Embedder, parallelism: int = 1) -> CorpusIndex:
    if not corpus:
        raise IndexingError("cannot index an empty corpus")
    seen = set()
    for p in corpus:
        if p.passage_id in seen:
            raise IndexingError(f"duplicate passage_id {p.passage_id!r}")
        if not p.text:
            raise IndexingError(f"passage {p.passage_id!r} has empty text")
        seen.add(p.passage_id)

    def embed_one(p):
        try:
            vec = np.asarray(embedder.embed(p.text), dtype=np.float64)
        except Exception as exc:
            raise IndexingError(f"embedding failed for passage {p.passage_id!r}: {exc}") from exc
        if vec.shape != (embedder.dim,) or not np.all(np.isfinite(vec)):
            raise IndexingError(f"embedder returned a bad vector for passage {p.passage_id!r}")
        return vec

    if parallelism > 1:
        with ThreadPoolExecutor(parallelism) as pool:
            vectors = list(pool.map(embed_one, corpus))
    else:
        vectors = [embed_one(p) for p in corpus]
    return CorpusIndex(list(corpus), np.vstack(vectors), embedder)


def retrieve(query: str, index: CorpusIndex, k: int) -> list[tuple[Passage, float]]:
    if index.embedder is None:
        raise RetrievalError("index was built without an embedder; use CorpusIndex.search")
    return index.search(index.embedder.embed(query), k)


def rerank_filter(query: str, candidates: Sequence[Passage], reranker: Reranker, keep: int,
                  min_score: float = 0.0, mention_id: str = "", on_failure: str = "fail") -> ContextSet:
    """Rerank ``candidates`` and keep at most ``keep`` scoring at least ``min_score``.

    With ``on_failure="passthrough"`` a reranker error falls back to the input
    order, scored by reversed rank.
    """
    if keep < 0:
        raise ValueError("keep must be >= 0")
    if keep == 0 or not candidates:
        return ContextSet(mention_id)
    try:
        scores = [float(s) for s in reranker.score(query, candidates)]
        if len(scores) != len(candidates) or not all(math.isfinite(s) for s in scores):
            raise RetrievalError("reranker returned malformed scores")
    except Exception as exc:
        if on_failure != "passthrough":
            raise RetrievalError(f"reranking failed for mention {mention_id!r}: {exc}") from exc
        logger.warning("reranker failed for %r, keeping retrieval order: %s", mention_id, exc)
        scores = [float(len(candidates) - i) for i in range(len(candidates))]
    scored = [(p, s) for p, s in zip(candidates, scores) if s >= min_score]
    scored.sort(key=lambda ps: (-ps[1], ps[0].passage_id))
    return ContextSet(mention_id, tuple(scored[:keep]))


class RetrievalPipeline:
    """First-stage dense retrieval followed by rerank-and-filter."""

    def __init__(self, index: CorpusIndex, reranker: Reranker, k: int = 20, keep: int = 5,
                 min_score: float = 0.0, on_failure: str = "fail"):
        self.index = index
        self.reranker = reranker
        self.k = k
        self.keep = keep
        self.min_score = min_score
        self.on_failure = on_failure

    def contexts_for(self, mention_id: str, query: str) -> ContextSet:
        hits = retrieve(query, self.index, self.k)
        return rerank_filter(query, [p for p, _ in hits], self.reranker, self.keep,
                             self.min_score, mention_id, self.on_failure)


def load_corpus(path) -> list[Passage]:
    passages = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                passages.append(Passage(str(rec["passage_id"]), str(rec["source_id"]), str(rec["text"])))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise IndexingError(f"{path}: line {line_no}: {exc}") from exc
    return passages
