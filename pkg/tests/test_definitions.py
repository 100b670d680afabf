import threading

import pytest

from hcdcr.corpus import topic_from_record
from hcdcr.definitions import (CountingGenerator, DefinitionCache, DefinitionGenerator, EchoGenerator,
                               GenerationError, TemplateError, build_relational_prompt,
                               build_singleton_prompt, generate_relational, generate_singleton,
                               load_template, truncate_tokens)
from hcdcr.retrieval import (ContextSet, HashingEmbedder, LexicalOverlapReranker, Passage, RetrievalPipeline,
                             index_corpus)

from synthetic import small_record


@pytest.fixture
def topic():
    return topic_from_record(small_record())


@pytest.fixture
def retrieval():
    corpus = [Passage("p1", "s", "network embedding maps graphs to vectors"),
              Passage("p2", "s", "representation learning learns features"),
              Passage("p3", "s", "segmentation splits images")]
    return RetrievalPipeline(index_corpus(corpus, HashingEmbedder(64)), LexicalOverlapReranker(), k=3, keep=2)


def ctx(*texts):
    return ContextSet("m", tuple((Passage(f"p{i}", "s", t), 1.0 - i / 10) for i, t in enumerate(texts)))


class TestSingletonPrompt:
    def test_empty_contexts(self, topic):
        m = topic.mention("m1")
        prompt = build_singleton_prompt(m, m.local_context, ContextSet("m1"), load_template("singleton"))
        assert m.surface in prompt and m.local_context in prompt
        assert "Reference passages" not in prompt

    def test_passages_in_order(self, topic):
        m = topic.mention("m1")
        prompt = build_singleton_prompt(m, m.local_context, ctx("alpha text", "beta text"),
                                        load_template("singleton"))
        assert prompt.index("alpha text") < prompt.index("beta text")

    def test_deterministic(self, topic):
        m = topic.mention("m1")
        args = (m, m.local_context, ctx("a"), load_template("singleton"))
        assert build_singleton_prompt(*args) == build_singleton_prompt(*args)

    def test_missing_placeholder(self, topic):
        m = topic.mention("m1")
        with pytest.raises(TemplateError, match="passages"):
            build_singleton_prompt(m, "", None, "Define $mention given $context")


class TestRelationalPrompt:
    def test_asymmetric(self, topic):
        a, b = topic.mention("m1"), topic.mention("m2")
        t = load_template("relational")
        ab = build_relational_prompt(a, b, (a.local_context, None), (b.local_context, None), t)
        ba = build_relational_prompt(b, a, (b.local_context, None), (a.local_context, None), t)
        assert ab != ba
        assert ab.index(a.local_context) < ab.index(b.local_context)
        assert f'Define "{a.surface}" in relation to "{b.surface}"' in ab

    def test_local_contexts_only(self, topic):
        a, b = topic.mention("m1"), topic.mention("m2")
        p = build_relational_prompt(a, b, (a.local_context, ContextSet("m1")), (b.local_context, ContextSet("m2")),
                                    load_template("relational"))
        assert "Reference passages" not in p and a.local_context in p and b.local_context in p

    def test_same_mention_rejected(self, topic):
        a = topic.mention("m1")
        with pytest.raises(ValueError):
            build_relational_prompt(a, a, ("", None), ("", None), load_template("relational"))


class TestGeneration:
    def test_cache_idempotence(self, topic, retrieval):
        gen = CountingGenerator(EchoGenerator())
        cache = DefinitionCache()
        m = topic.mention("m1")
        d1 = generate_singleton(m, topic, retrieval, gen, cache)
        d2 = generate_singleton(m, topic, retrieval, gen, cache)
        assert d1.text == d2.text
        assert gen.calls == 1

    def test_persistent_cache(self, topic, retrieval, tmp_path):
        gen = CountingGenerator(EchoGenerator())
        m = topic.mention("m3")
        first = generate_singleton(m, topic, retrieval, gen, DefinitionCache(tmp_path))
        again = generate_singleton(m, topic, retrieval, gen, DefinitionCache(tmp_path))
        assert first == again and gen.calls == 1

    def test_empty_output_is_error(self, topic):
        class Silent:
            def generate(self, prompt):
                return ""
        with pytest.raises(GenerationError):
            generate_singleton(topic.mention("m1"), topic, None, Silent(), DefinitionCache())

    def test_retries_then_error(self, topic):
        class Flaky:
            calls = 0

            def generate(self, prompt):
                Flaky.calls += 1
                raise ConnectionError("down")
        with pytest.raises(GenerationError):
            generate_singleton(topic.mention("m1"), topic, None, Flaky(), DefinitionCache(), attempts=3, backoff=0)
        assert Flaky.calls == 3

    def test_echo_embeds_surface(self, topic, retrieval):
        m = topic.mention("m2")
        d = generate_singleton(m, topic, retrieval, EchoGenerator(), DefinitionCache())
        assert m.surface in d.text
        assert set(d.context_ids) <= {"p1", "p2", "p3"}

    def test_no_retrieval_mode(self, topic, retrieval):
        d = DefinitionGenerator(EchoGenerator(40), retrieval=retrieval, use_retrieval=False)
        assert d.singleton(topic.mention("m1"), topic).context_ids == ()

    def test_token_cap(self, topic):
        d = DefinitionGenerator(EchoGenerator(100), token_cap=5).singleton(topic.mention("m1"), topic)
        assert len(d.text.split()) == 5
        assert truncate_tokens("a  b c", None) == "a  b c"


class TestRelationalGeneration:
    def test_both_directions_and_cache(self, topic, retrieval):
        gen = CountingGenerator(EchoGenerator())
        cache = DefinitionCache()
        a, b = topic.mention("m1"), topic.mention("m2")
        d_ab, d_ba = generate_relational((a, b), topic, retrieval, gen, cache)
        assert gen.calls == 2
        assert (d_ab.anchor_id, d_ab.other_id) == ("m1", "m2")
        assert (d_ba.anchor_id, d_ba.other_id) == ("m2", "m1")
        assert a.surface in d_ab.text and b.surface in d_ba.text
        generate_relational((a, b), topic, retrieval, gen, cache)
        assert gen.calls == 2

    def test_one_direction_cached(self, topic, retrieval):
        gen = CountingGenerator(EchoGenerator())
        definer = DefinitionGenerator(gen, retrieval=retrieval)
        a, b = topic.mention("m1"), topic.mention("m2")
        definer.directed(a, b, topic)
        assert gen.calls == 1
        definer.relational(a, b, topic)
        assert gen.calls == 2


def test_cache_first_write_wins(tmp_path):
    cache = DefinitionCache(tmp_path)
    results = []

    def put(text):
        results.append(cache.put("singleton", ("m", "h"), {"text": text}))

    threads = [threading.Thread(target=put, args=(f"v{i}",)) for i in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert len({r["text"] for r in results}) == 1
    assert len((tmp_path / "singleton.jsonl").read_text().splitlines()) == 1
    assert DefinitionCache(tmp_path).get("singleton", ("m", "h"))["text"] == results[0]["text"]
