"""Staged end-to-end pipeline with persisted intermediates and a run manifest.

Stages, in order, and the files they leave in the output directory:

    ingest           topics.jsonl
    index            index.npz                  (only when definitions use retrieval)
    define-singleton singleton_definitions.jsonl (only when definitions are used)
    score            stage1_scores.jsonl
    cascade          final_scores.jsonl (+ candidates.json, stage2_scores.jsonl,
                     cascade_manifest.json in relational-cascade mode)
    cluster          graphs.jsonl
    evaluate         evaluation.json, report.txt, report.csv

A stage whose output already exists is loaded instead of recomputed, so an
interrupted run resumes where it stopped.
"""
from __future__ import annotations

import hashlib
import json
import logging
import random
import time
from collections import defaultdict
from pathlib import Path

from . import backends as bk
from .cascade import CascadeConfig, run_cascade
from .config import PipelineConfig
from .corpus import Topic, ingest_topics, with_context_window, write_topics
from .definitions import CountingGenerator, DefinitionCache, DefinitionGenerator, EchoGenerator, load_template
from .evaluation.baseline import rank_topics, select_hard_subset
from .evaluation.report import ReportRow, evaluate_topics, render_report
from .graph import (ClusteringConfig, HierarchyConfig, cluster_mentions, gold_graph, induce_hierarchy,
                    read_graphs, write_graphs)
from .retrieval import (CorpusIndex, HashingEmbedder, LexicalOverlapReranker, RetrievalPipeline,
                        index_corpus, load_corpus)
from .scoring import (CountingScorer, FewShotScorer, FewShotSerializer, LexicalBaselineScorer, OracleScorer,
                      enumerate_pairs, gold_relation, make_serializer, pair_input, read_scored_pairs,
                      sample_fewshot_examples, score_pairs, write_scored_pairs)

logger = logging.getLogger(__name__)

STAGES = ("ingest", "index", "define-singleton", "score", "cascade", "cluster", "evaluate")
DIGESTED = ("topics.jsonl", "singleton_definitions.jsonl", "stage1_scores.jsonl", "candidates.json",
            "stage2_scores.jsonl", "final_scores.jsonl", "graphs.jsonl", "evaluation.json",
            "report.csv")


class StageError(RuntimeError):
    def __init__(self, stage, cause):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage {stage!r} failed: {cause}")


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _client(b):
    return bk.HttpClient(b.url, b.token_env, b.timeout)


def make_embedder(cfg: PipelineConfig):
    b = cfg.backends.embedder
    if b.kind == "http":
        return bk.HttpEmbedder(_client(b), b.model, b.dim, cfg.definitions.retries, cfg.definitions.backoff)
    return HashingEmbedder(b.dim)


def make_reranker(cfg: PipelineConfig):
    b = cfg.backends.reranker
    if b.kind == "http":
        return bk.HttpReranker(_client(b), cfg.definitions.retries, cfg.definitions.backoff)
    return LexicalOverlapReranker()


def make_generator(cfg: PipelineConfig):
    b = cfg.backends.generator
    if b.kind == "http":
        # retries happen one level up, in DefinitionGenerator
        return bk.HttpChatGenerator(_client(b), b.model, b.temperature, attempts=1)
    return EchoGenerator()


class Pipeline:
    """Runs the stages for one configuration.

    Backends may be injected (test doubles); otherwise they are built from the
    configuration. Every backend is wrapped in a call counter for the manifest.
    """

    def __init__(self, config: PipelineConfig, *, generator=None, scorer=None, embedder=None,
                 reranker=None, resume: bool = True):
        self.cfg = config
        self.out = Path(config.run.output_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.resume = resume
        self.generator = CountingGenerator(generator if generator is not None else make_generator(config))
        self._scorer = scorer
        self._embedder = embedder
        self._reranker = reranker
        self.counts: dict[str, int] = defaultdict(int)
        self.stage_log: dict[str, dict] = {}
        self._memo: dict[str, object] = {}
        self._definer: DefinitionGenerator | None = None

    # --- helpers ---------------------------------------------------------

    def path(self, name: str) -> Path:
        return self.out / name

    def _done(self, name: str) -> bool:
        return self.resume and self.path(name).exists()

    @property
    def augmenter(self) -> str:
        return "singleton" if self.cfg.uses_definitions else "none"

    def scorer(self):
        if "scorer" not in self._memo:
            inner = self._scorer
            if inner is None:
                b = self.cfg.backends.scorer
                if b.kind == "oracle":
                    inner = OracleScorer(self.ingest())
                elif b.kind == "lexical":
                    inner = LexicalBaselineScorer()
                elif b.kind == "http":
                    inner = bk.HttpPairScorer(_client(b), self.cfg.definitions.retries,
                                                  self.cfg.definitions.backoff)
                else:
                    icl = self._scorer_generator()
                    inner = FewShotScorer(icl)
            self._memo["scorer"] = CountingScorer(inner)
        return self._memo["scorer"]

    def _scorer_generator(self):
        counted = CountingGenerator(make_generator(self.cfg))
        self._memo["icl_generator"] = counted
        return counted

    def definer(self) -> DefinitionGenerator:
        if self._definer is None:
            d = self.cfg.definitions
            retrieval = None
            if self.cfg.uses_retrieval:
                r = self.cfg.retrieval
                retrieval = RetrievalPipeline(self.index(), self._reranker or make_reranker(self.cfg),
                                              r.k, r.keep, r.min_score, r.on_failure)
            self._definer = DefinitionGenerator(
                self.generator, DefinitionCache(self.cfg.run.cache_dir), retrieval,
                load_template(d.singleton_template), load_template(d.relational_template),
                d.token_cap, d.retries, d.backoff)
        return self._definer

    # --- stages ----------------------------------------------------------

    def ingest(self) -> list[Topic]:
        if "topics" not in self._memo:
            target = self.path("topics.jsonl")
            if not self._done("topics.jsonl"):
                write_topics(ingest_topics(self.cfg.data.topics), target)
            topics = [with_context_window(t, self.cfg.data.window) for t in ingest_topics(target)]
            self._memo["topics"] = topics
        return self._memo["topics"]

    def topic_map(self) -> dict[str, Topic]:
        return {t.topic_id: t for t in self.ingest()}

    def index(self) -> CorpusIndex | None:
        if not self.cfg.uses_retrieval:
            return None
        if "index" not in self._memo:
            embedder = self._embedder or make_embedder(self.cfg)
            target = self.path("index.npz")
            if self._done("index.npz"):
                idx = CorpusIndex.load(target, embedder)
            else:
                idx = index_corpus(load_corpus(self.cfg.data.corpus), embedder, self.cfg.run.parallelism)
                idx.save(target)
            self.counts["passages_indexed"] = len(idx)
            self._memo["index"] = idx
        return self._memo["index"]

    def define_singleton(self) -> dict[str, dict[str, str]]:
        if not self.cfg.uses_definitions:
            return {}
        if "singleton" not in self._memo:
            target = self.path("singleton_definitions.jsonl")
            defs: dict[str, dict[str, str]] = defaultdict(dict)
            if self._done("singleton_definitions.jsonl"):
                with open(target, encoding="utf-8") as fh:
                    for line in fh:
                        rec = json.loads(line)
                        defs[rec["topic_id"]][rec["mention_id"]] = rec["text"]
            else:
                definer = self.definer()
                records = []
                for topic in self.ingest():
                    for m in sorted(topic.mentions, key=lambda m: m.mention_id):
                        d = definer.singleton(m, topic)
                        defs[topic.topic_id][m.mention_id] = d.text
                        records.append({"topic_id": topic.topic_id, "mention_id": m.mention_id,
                                        "text": d.text, "context_ids": list(d.context_ids),
                                        "prompt_hash": d.generator_meta["prompt_hash"]})
                with open(target, "w", encoding="utf-8") as fh:
                    for rec in records:
                        fh.write(json.dumps(rec, ensure_ascii=False) + "\n")
            self._memo["singleton"] = dict(defs)
        return self._memo["singleton"]

    def serializer(self):
        s = self.cfg.scoring
        if s.serializer != "fewshot":
            system = load_template(s.chatml_system)
            return make_serializer(s.serializer, system=system)
        if "fewshot" not in self._memo:
            pool_topics = ingest_topics(self.cfg.data.fewshot_topics)
            pool = []
            for topic in pool_topics:
                defs = None
                if s.fewshot_with_definitions:
                    definer = self.definer()
                    defs = {m.mention_id: definer.singleton(m, topic).text for m in topic.mentions}
                for pair in enumerate_pairs(topic):
                    texts = (defs[pair.first], defs[pair.second]) if defs else None
                    pool.append((pair_input(topic, pair, texts), gold_relation(topic, pair)))
            rng = random.Random(self.cfg.run.seed)
            examples = sample_fewshot_examples(pool, rng, balanced=s.fewshot_balanced)
            self._memo["fewshot"] = FewShotSerializer(examples, s.fewshot_with_definitions,
                                                      load_template(s.fewshot_instruction),
                                                      s.fewshot_balanced)
        return self._memo["fewshot"]

    def score(self):
        if "stage1" not in self._memo:
            target = self.path("stage1_scores.jsonl")
            if self._done("stage1_scores.jsonl"):
                scored = read_scored_pairs(target)
            else:
                defs = self.define_singleton()
                scorer, serializer = self.scorer(), self.serializer()
                scored = []
                for topic in self.ingest():
                    scored += score_pairs(enumerate_pairs(topic), topic, self.augmenter, scorer, serializer,
                                          defs.get(topic.topic_id) if defs else None,
                                          self.cfg.run.parallelism)
                write_scored_pairs(scored, target)
            self.counts["stage1_pairs"] = len(scored)
            self._memo["stage1"] = scored
        return self._memo["stage1"]

    def cascade(self):
        if "final" not in self._memo:
            target = self.path("final_scores.jsonl")
            if self._done("final_scores.jsonl"):
                final = read_scored_pairs(target)
            else:
                stage1 = self.score()
                final = stage1
                if self.cfg.definitions.mode == "relational-cascade":
                    c = self.cfg.cascade
                    ccfg = CascadeConfig(c.theta, c.top_k, c.stage2_enabled, c.on_failure)
                    calls_before = self.generator.calls
                    scorer_before = self.scorer().calls
                    result = run_cascade(stage1, self.topic_map(), ccfg,
                                         self.definer() if c.stage2_enabled else None,
                                         self.scorer(), self.serializer(), self.cfg.run.parallelism)
                    final = result.final
                    counts = {"relational_generator_calls": self.generator.calls - calls_before,
                              "stage2_scorer_calls": self.scorer().calls - scorer_before}
                    self.counts["candidates"] = len(result.candidates)
                    self.counts["stage2_pairs"] = len(result.stage2)
                    with open(self.path("candidates.json"), "w", encoding="utf-8") as fh:
                        json.dump([{"topic_id": t, "first": p.first, "second": p.second,
                                    "confidence": result.candidates.provenance[(t, p)][0],
                                    "selected_by": sorted(result.candidates.provenance[(t, p)][1])}
                                   for t, p in result.candidates.sorted_keys()], fh, indent=1)
                    write_scored_pairs(result.stage2, self.path("stage2_scores.jsonl"))
                    with open(self.path("cascade_manifest.json"), "w", encoding="utf-8") as fh:
                        json.dump(result.manifest(ccfg, len(stage1), counts), fh, indent=1, sort_keys=True)
                write_scored_pairs(final, target)
            self._memo["final"] = final
        return self._memo["final"]

    def cluster(self):
        if "graphs" not in self._memo:
            target = self.path("graphs.jsonl")
            if self._done("graphs.jsonl"):
                graphs = read_graphs(target)
            else:
                by_topic = defaultdict(list)
                for sp in self.cascade():
                    by_topic[sp.topic_id].append(sp)
                ccfg = ClusteringConfig(self.cfg.clustering.tau_c)
                hcfg = HierarchyConfig(self.cfg.hierarchy.tau_h)
                graphs = {}
                for topic in self.ingest():
                    pairs = by_topic.get(topic.topic_id, [])
                    partition = cluster_mentions(pairs, topic.mention_ids, ccfg)
                    graphs[topic.topic_id] = induce_hierarchy(partition, pairs, hcfg)
                write_graphs(graphs, target)
            self._memo["graphs"] = graphs
        return self._memo["graphs"]

    def evaluate(self) -> dict:
        if "evaluation" not in self._memo:
            target = self.path("evaluation.json")
            if self._done("evaluation.json"):
                with open(target, encoding="utf-8") as fh:
                    evaluation = json.load(fh)
            else:
                evaluation = self._evaluate()
                with open(target, "w", encoding="utf-8") as fh:
                    json.dump(evaluation, fh, indent=1, sort_keys=True)
                text, csv_text = render_report(self.report_rows(evaluation))
                self.path("report.txt").write_text(text, encoding="utf-8")
                self.path("report.csv").write_text(csv_text, encoding="utf-8")
            self._memo["evaluation"] = evaluation
        return self._memo["evaluation"]

    def _evaluate(self) -> dict:
        topics = [t for t in self.ingest() if t.gold is not None]
        if not topics:
            logger.warning("no gold-annotated topics; skipping evaluation")
            return {"subsets": {}}
        pred = self.cluster()
        gold = {t.topic_id: gold_graph(t) for t in topics}
        ranking = rank_topics(topics, self.cfg.evaluation.baseline_tau_c)
        subsets = {"all": sorted(gold)}
        for frac in self.cfg.evaluation.hard_fractions:
            subsets[f"hard {round(frac * 100)}"] = select_hard_subset(
                topics, frac, self.cfg.evaluation.baseline_tau_c, ranking)
        out = {"subsets": {}, "baseline": [{"topic_id": s.topic_id, "baseline_conll_f1": s.baseline_conll_f1}
                                             for s in ranking]}
        for name, ids in subsets.items():
            if ids:
                out["subsets"][name] = dict(evaluate_topics(gold, pred, ids).as_dict(), topic_ids=ids)
        return out

    def report_rows(self, evaluation: dict) -> list[ReportRow]:
        name = self.cfg.run.name or self.out.name
        return [ReportRow.from_scores(f"{name} ({subset})", data["macro"])
                for subset, data in evaluation["subsets"].items()]

    # --- driver ----------------------------------------------------------

    def _call_counts(self) -> dict:
        counts = dict(self.counts)
        counts["generator_calls"] = self.generator.calls
        if "scorer" in self._memo:
            counts["scorer_calls"] = self._memo["scorer"].calls
        if "icl_generator" in self._memo:
            counts["icl_generator_calls"] = self._memo["icl_generator"].calls
        if self._definer is not None:
            counts["definition_cache_hits"] = self._definer.cache_hits
            counts["definitions_generated"] = self._definer.generated
        return counts

    def run(self, until: str = "evaluate") -> dict:
        """Run stages up to and including ``until``; write and return the manifest."""
        if until not in STAGES:
            raise ValueError(f"unknown stage {until!r}")
        runners = {"ingest": self.ingest, "index": self.index, "define-singleton": self.define_singleton,
                   "score": self.score, "cascade": self.cascade, "cluster": self.cluster,
                   "evaluate": self.evaluate}
        failed = None
        try:
            for stage in STAGES[:STAGES.index(until) + 1]:
                start = time.perf_counter()
                try:
                    runners[stage]()
                except Exception as exc:
                    failed = stage
                    raise StageError(stage, exc) from exc
                finally:
                    self.stage_log[stage] = {"seconds": round(time.perf_counter() - start, 6),
                                             "status": "failed" if failed == stage else "done"}
        finally:
            manifest = self.write_manifest(failed)
        return manifest

    def write_manifest(self, failed_stage: str | None = None) -> dict:
        digests = {name: file_digest(self.path(name)) for name in DIGESTED if self.path(name).exists()}
        manifest = {"config": self.cfg.to_dict(), "stages": self.stage_log, "counts": self._call_counts(),
                    "failed_stage": failed_stage, "digests": digests}
        with open(self.path("manifest.json"), "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=1, sort_keys=True)
        return manifest


def run_pipeline(config: PipelineConfig, **backends) -> tuple[dict, dict]:
    pipe = Pipeline(config, **backends)
    manifest = pipe.run()
    return pipe.evaluate(), manifest
