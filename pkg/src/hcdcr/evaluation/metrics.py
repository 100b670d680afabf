"""Coreference metrics: MUC, B-cubed, CEAF-e, LEA and CoNLL F1.

Partitions are iterables of clusters, each an iterable of mention ids. Gold
and predicted partitions must cover the same mentions.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, NamedTuple

import numpy as np
from scipy.optimize import linear_sum_assignment


class MetricError(ValueError):
    pass


class Score(NamedTuple):
    recall: float
    precision: float
    f1: float


def f1(recall: float, precision: float) -> float:
    if recall + precision == 0:
        return 0.0
    return 2 * recall * precision / (recall + precision)


def _score(r_num, r_den, p_num, p_den) -> Score:
    r = r_num / r_den if r_den else 0.0
    p = p_num / p_den if p_den else 0.0
    return Score(r, p, f1(r, p))


def _prepare(gold, pred):
    gold = [frozenset(c) for c in gold if c]
    pred = [frozenset(c) for c in pred if c]
    g_all = frozenset().union(*gold) if gold else frozenset()
    p_all = frozenset().union(*pred) if pred else frozenset()
    if g_all != p_all:
        diff = sorted(g_all ^ p_all)[:5]
        raise MetricError(f"gold and predicted partitions cover different mentions, e.g. {diff}")
    if sum(map(len, gold)) != len(g_all) or sum(map(len, pred)) != len(p_all):
        raise MetricError("clusters within a partition overlap")
    return gold, pred


def _cluster_of(partition):
    return {m: c for c in partition for m in c}


def _muc_side(keys, responses):
    where = _cluster_of(responses)
    num = den = 0
    for k in keys:
        if len(k) < 2:
            continue
        parts = {where[m] for m in k}
        num += len(k) - len(parts)
        den += len(k) - 1
    return num, den


def muc(gold, pred) -> Score:
    gold, pred = _prepare(gold, pred)
    r_num, r_den = _muc_side(gold, pred)
    p_num, p_den = _muc_side(pred, gold)
    return _score(r_num, r_den, p_num, p_den)


def _b3_side(keys, responses):
    where = _cluster_of(responses)
    total = 0.0
    for k in keys:
        for m in k:
            total += len(k & where[m]) / len(k)
    return total


def b_cubed(gold, pred) -> Score:
    gold, pred = _prepare(gold, pred)
    n = sum(map(len, gold))
    return _score(_b3_side(gold, pred), n, _b3_side(pred, gold), n)


def phi4(k: frozenset, r: frozenset) -> float:
    return 2 * len(k & r) / (len(k) + len(r))


def ceaf_e_similarity(gold, pred) -> float:
    """Value of the optimal one-to-one cluster matching under phi4."""
    if not gold or not pred:
        return 0.0
    sim = np.array([[phi4(k, r) for r in pred] for k in gold])
    rows, cols = linear_sum_assignment(sim, maximize=True)
    return float(sim[rows, cols].sum())


def ceaf_e(gold, pred) -> Score:
    gold, pred = _prepare(gold, pred)
    total = ceaf_e_similarity(gold, pred)
    return _score(total, len(gold), total, len(pred))


def _links(size: int) -> int:
    return size * (size - 1) // 2


def _lea_side(keys, responses):
    where = _cluster_of(responses)
    num = den = 0.0
    for k in keys:
        if len(k) == 1:
            (m,) = k
            resolved = 1.0 if len(where[m]) == 1 else 0.0
            link = 1
        else:
            resolved = sum(_links(len(k & r)) for r in {where[m] for m in k})
            link = _links(len(k))
        num += len(k) * resolved / link
        den += len(k)
    return num, den


def lea(gold, pred) -> Score:
    gold, pred = _prepare(gold, pred)
    r_num, r_den = _lea_side(gold, pred)
    p_num, p_den = _lea_side(pred, gold)
    return _score(r_num, r_den, p_num, p_den)


def conll_f1(muc_score: Score, b3_score: Score, ceafe_score: Score) -> float:
    return (muc_score.f1 + b3_score.f1 + ceafe_score.f1) / 3


@dataclass(frozen=True)
class CoreferenceReport:
    muc: Score
    b3: Score
    ceafe: Score
    lea: Score

    @property
    def conll_f1(self) -> float:
        return conll_f1(self.muc, self.b3, self.ceafe)

    def as_dict(self) -> dict:
        out = {name: score._asdict() for name, score in
               (("MUC", self.muc), ("B3", self.b3), ("CEAFe", self.ceafe), ("LEA", self.lea))}
        out["conll_f1"] = self.conll_f1
        return out


def evaluate_coreference(gold: Iterable, pred: Iterable) -> CoreferenceReport:
    gold, pred = list(gold), list(pred)
    return CoreferenceReport(muc(gold, pred), b_cubed(gold, pred), ceaf_e(gold, pred), lea(gold, pred))
