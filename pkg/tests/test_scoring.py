import math
import random

import pytest
from hypothesis import given, strategies as st

from hcdcr.corpus import topic_from_record
from hcdcr.scoring import (FewShotScorer, LexicalBaselineScorer, MentionPair, OracleScorer, RelationClass,
                           ScoredPair, SerializationError, build_fewshot_prompt, enumerate_pairs,
                           gold_relation, pair_input, pairwise_loss, parse_icl_response,
                           read_scored_pairs, sample_fewshot_examples, score_pairs, serialize_chatml,
                           serialize_marker_format, softmax, write_scored_pairs)

from synthetic import random_topic, small_record

finite = st.floats(-50, 50, allow_nan=False)


@pytest.fixture
def topic():
    return topic_from_record(small_record())


def exp_normalize_oracle(values):
    exps = [math.exp(v) for v in values]
    return [e / sum(exps) for e in exps]


class TestSoftmax:
    def test_uniform(self):
        assert softmax([0, 0, 0, 0]) == pytest.approx([0.25] * 4, abs=1e-15)

    @given(finite)
    def test_constant(self, c):
        assert softmax([c] * 4) == pytest.approx([0.25] * 4, abs=1e-12)

    def test_log_values(self):
        expected = exp_normalize_oracle([math.log(i) for i in (1, 2, 3, 4)])
        assert softmax([math.log(i) for i in (1, 2, 3, 4)]) == pytest.approx(expected, abs=1e-12)
        assert softmax([math.log(i) for i in (1, 2, 3, 4)]) == pytest.approx([0.1, 0.2, 0.3, 0.4], abs=1e-12)

    def test_non_finite(self):
        with pytest.raises(ArithmeticError):
            softmax([0, float("inf"), 0, 0])

    def test_large_logits_stable(self):
        assert softmax([1000, 0, 0, 0])[0] == pytest.approx(1.0)

    @given(st.lists(finite, min_size=4, max_size=4), finite)
    def test_shift_and_simplex(self, logits, c):
        p = softmax(logits)
        q = softmax([x + c for x in logits])
        assert abs(sum(p) - 1) < 1e-9 and all(0 <= x <= 1 for x in p)
        assert max(range(4), key=p.__getitem__) == max(range(4), key=q.__getitem__) or \
            max(p) == pytest.approx(sorted(p)[-2])

    @given(st.lists(finite, min_size=4, max_size=4), st.integers(0, 3), st.floats(0.01, 5))
    def test_monotone(self, logits, i, bump):
        raised = list(logits)
        raised[i] += bump
        assert softmax(raised)[i] >= softmax(logits)[i]


class TestLoss:
    def test_perfect(self):
        assert pairwise_loss([(0, 1, 0, 0), (1, 0, 0, 0)], [1, 0]) == 0

    def test_half(self):
        assert pairwise_loss([(0.5, 0.5, 0, 0)], [1]) == pytest.approx(math.log(2), abs=1e-12)

    def test_two_pairs(self):
        # direct formula: -(log 1 + log 0.25) / 2
        expected = -(math.log(1.0) + math.log(0.25)) / 2
        assert pairwise_loss([(0, 1, 0, 0), (0.25, 0.75, 0, 0)], [1, 0]) == pytest.approx(expected, abs=1e-12)
        assert expected == pytest.approx(0.693147, abs=1e-6)

    def test_errors(self):
        with pytest.raises(ArithmeticError):
            pairwise_loss([(1, 0, 0, 0)], [1])
        with pytest.raises(ValueError):
            pairwise_loss([(1, 0, 0, 0)], [0, 1])

    @given(st.lists(st.tuples(st.lists(finite, min_size=4, max_size=4), st.integers(0, 3)), min_size=1, max_size=10))
    def test_non_negative(self, items):
        preds = [softmax(l) for l, _ in items]
        golds = [g for _, g in items]
        if all(p[g] > 0 for p, g in zip(preds, golds)):
            assert pairwise_loss(preds, golds) >= 0


class TestPairs:
    def test_counts(self):
        rng = random.Random(0)
        for _ in range(20):
            t = random_topic(rng)
            n = len(t.mentions)
            pairs = enumerate_pairs(t)
            assert len(pairs) == n * (n - 1) // 2
            assert pairs == sorted(pairs)
            assert len(set(pairs)) == len(pairs)
            assert not any(MentionPair.of(p.second, p.first) != p for p in pairs)

    def test_canonical(self):
        assert MentionPair.of("b", "a") == MentionPair("a", "b")
        with pytest.raises(ValueError):
            MentionPair("b", "a")
        with pytest.raises(ValueError):
            MentionPair("a", "a")

    def test_gold_relation_direction(self, topic):
        # gold edge rep -> emb: m2 (rep) is parent of m1 and m3 (emb)
        assert gold_relation(topic, MentionPair("m1", "m2")) == RelationClass.SECOND_PARENT
        assert gold_relation(topic, MentionPair("m2", "m3")) == RelationClass.FIRST_PARENT
        assert gold_relation(topic, MentionPair("m1", "m3")) == RelationClass.COREF
        assert gold_relation(topic, MentionPair("m1", "m4")) == RelationClass.NONE


class TestSerializers:
    def test_chatml_without_definitions(self, topic):
        text = serialize_chatml(pair_input(topic, MentionPair("m1", "m2")))
        assert "Definition" not in text
        assert text.startswith("<|im_start|>system\n") and text.endswith("<|im_start|>assistant\n")
        assert "network embedding" in text and "representation learning" in text

    def test_chatml_with_definitions(self, topic):
        item = pair_input(topic, MentionPair("m1", "m2"), ("DEF-ONE", "DEF-TWO"))
        text = serialize_chatml(item)
        assert text.index("DEF-ONE") < text.index("DEF-TWO")
        assert text == serialize_chatml(item)

    def test_chatml_missing_definition(self, topic):
        with pytest.raises(SerializationError):
            serialize_chatml(pair_input(topic, MentionPair("m1", "m2")), require_definitions=True)

    def test_marker(self, topic):
        text = serialize_marker_format(pair_input(topic, MentionPair("m1", "m2")))
        assert text == ("<s> we study <m> network embedding </m> for graphs </s>"
                        "<s> <m> representation learning </m> maps nodes to vectors </s>")

    def test_marker_with_definitions(self, topic):
        text = serialize_marker_format(pair_input(topic, MentionPair("m1", "m2"), ("d one", "d two")))
        assert text == ("<s> we study <m> network embedding </m> for graphs <def> d one </def> </s>"
                        "<s> <m> representation learning </m> maps nodes to vectors <def> d two </def> </s>")

    @given(st.text(min_size=1, max_size=20), st.text(min_size=1, max_size=20))
    def test_injective_in_definitions(self, d1, d2):
        t = topic_from_record(small_record())
        pair = MentionPair("m1", "m2")
        a = serialize_marker_format(pair_input(t, pair, (d1, "x")))
        b = serialize_marker_format(pair_input(t, pair, (d2, "x")))
        assert (a == b) == (d1 == d2)
        a = serialize_chatml(pair_input(t, pair, ("x", d1)))
        b = serialize_chatml(pair_input(t, pair, ("x", d2)))
        assert (a == b) == (d1 == d2)


class TestFewShot:
    def examples(self, topic, defs=None):
        out = []
        for cls, pair in [(0, ("m1", "m4")), (1, ("m1", "m3")), (2, ("m2", "m3")), (3, ("m1", "m2"))]:
            p = MentionPair(*pair)
            assert gold_relation(topic, p) == cls
            out.append((pair_input(topic, p, defs), RelationClass(cls)))
        return out

    def test_one_per_class(self, topic):
        target = pair_input(topic, MentionPair("m3", "m4"))
        prompt = build_fewshot_prompt(self.examples(topic), target, False, balanced=True)
        assert sum(1 for line in prompt.splitlines() if line.startswith("LABEL: ") and line[7:].isdigit()) == 4
        assert prompt.rstrip().endswith(f"Context 2: {topic.mention('m4').local_context}")
        assert prompt.index("Example 4:") < prompt.index("Target:")

    def test_without_definitions(self, topic):
        target = pair_input(topic, MentionPair("m3", "m4"), ("SECRET-DEF", "SECRET-DEF"))
        prompt = build_fewshot_prompt(self.examples(topic, ("SECRET-DEF", "SECRET-DEF")), target, False)
        assert "SECRET-DEF" not in prompt and "Definition" not in prompt
        with_defs = build_fewshot_prompt(self.examples(topic, ("SECRET-DEF", "SECRET-DEF")), target, True)
        assert with_defs.count("SECRET-DEF") == 10

    def test_zero_shot(self, topic):
        target = pair_input(topic, MentionPair("m3", "m4"))
        prompt = build_fewshot_prompt([], target, False)
        assert "Example" not in prompt and "Target:" in prompt

    def test_balance_violation(self, topic):
        ex = self.examples(topic)
        with pytest.raises(ValueError):
            build_fewshot_prompt(ex[:3] + [ex[0]], pair_input(topic, MentionPair("m3", "m4")), False, balanced=True)

    def test_seeded_sampling(self, topic):
        pool = self.examples(topic) * 3
        a = sample_fewshot_examples(pool, random.Random(5))
        b = sample_fewshot_examples(pool, random.Random(5))
        assert a == b and [int(l) for _, l in a] == [0, 1, 2, 3]

    def test_parse(self):
        assert parse_icl_response("LABEL: 2\nbecause") == RelationClass.FIRST_PARENT
        assert parse_icl_response("label:3") == RelationClass.SECOND_PARENT
        assert parse_icl_response("I think they corefer") == RelationClass.NONE
        assert parse_icl_response("") == RelationClass.NONE

    def test_fewshot_scorer(self, topic):
        class Answer:
            def generate(self, prompt):
                return "LABEL: 1\nsame thing"
        item = pair_input(topic, MentionPair("m1", "m3"))
        dist = softmax(FewShotScorer(Answer()).score(item, "prompt"))
        assert max(range(4), key=dist.__getitem__) == 1


class TestScorePairs:
    def test_oracle(self):
        rng = random.Random(4)
        for i in range(10):
            t = random_topic(rng, f"t{i}")
            scored = score_pairs(enumerate_pairs(t), t, "none", OracleScorer([t]), "chatml")
            for sp in scored:
                assert sp.predicted == gold_relation(t, sp.pair)
                assert sp.distribution[sp.predicted] == pytest.approx(0.97)

    def test_lexical_identical_surfaces(self):
        rec = {"topic_id": "t", "documents": [{"doc_id": "d", "paragraphs": [["ResNet", "and", "ResNet"]]}],
               "mentions": [{"mention_id": "a", "doc_id": "d", "paragraph": 0, "start": 0, "end": 1},
                            {"mention_id": "b", "doc_id": "d", "paragraph": 0, "start": 2, "end": 3}],
               "gold": None}
        t = topic_from_record(rec)
        (sp,) = score_pairs(enumerate_pairs(t), t, "none", LexicalBaselineScorer(), "marker")
        assert sp.predicted == RelationClass.COREF

    def test_empty(self, topic):
        assert score_pairs([], topic, "none", LexicalBaselineScorer()) == []

    def test_order_and_parallel(self, topic):
        pairs = list(reversed(enumerate_pairs(topic)))
        seq = score_pairs(pairs, topic, "none", LexicalBaselineScorer())
        par = score_pairs(pairs, topic, "none", LexicalBaselineScorer(), parallelism=4)
        assert [s.pair for s in seq] == pairs and seq == par

    def test_singleton_augmentation(self, topic):
        defs = {m: f"def of {m}" for m in topic.mention_ids}
        seen = []

        class Spy:
            def score(self, item, text):
                seen.append(text)
                return [0, 0, 0, 0]
        (sp,) = score_pairs([MentionPair("m1", "m2")], topic, "singleton", Spy(), "chatml", defs)
        assert sp.stage == "singleton" and sp.definitions_used == ("m1", "m2")
        assert "def of m1" in seen[0] and "def of m2" in seen[0]
        with pytest.raises(SerializationError):
            score_pairs([MentionPair("m1", "m2")], topic, "singleton", Spy(), "chatml", {})

    def test_relational_augmentation(self, topic):
        defs = {("m1", "m2"): "m1 vs m2", ("m2", "m1"): "m2 vs m1"}
        (sp,) = score_pairs([MentionPair("m1", "m2")], topic, "relational", LexicalBaselineScorer(), "marker", defs)
        assert sp.stage == "relational"

    def test_scorer_failure_names_pair(self, topic):
        class Down:
            def score(self, item, text):
                raise RuntimeError("503")
        with pytest.raises(Exception, match="m1"):
            score_pairs([MentionPair("m1", "m2")], topic, "none", Down())

    def test_persistence(self, topic, tmp_path):
        scored = score_pairs(enumerate_pairs(topic), topic, "none", LexicalBaselineScorer())
        write_scored_pairs(scored, tmp_path / "s.jsonl")
        assert read_scored_pairs(tmp_path / "s.jsonl") == scored

    def test_stage_consistency(self):
        with pytest.raises(ValueError):
            ScoredPair("t", MentionPair("a", "b"), (1, 0, 0, 0), "singleton", ())
