"""Reflection synthesis pipeline tests against fully scripted generators.

The flagship fixture is a 3-document corpus (one document spans two
chunks) whose mock script exercises every step: extraction, merging,
verification verdicts (pass, rewrite, discard, unlisted index),
entity surfacing, and cross-document synthesis with one rejection.
Every expected pair and event count is hand-derived from the script.
"""

import gzip
import json
import random

import pytest

from memo.corpus import Corpus, DocumentGroup, build_groups, normalize_document
from memo.gateway import MockBackend, MockScript
from memo.synthesis import prompts
from memo.synthesis.pipeline import (
    ALL_STEPS,
    PipelineConfig,
    PipelineError,
    PipelineLog,
    QAPair,
    ReflectionDataset,
    compression_ratio,
    consolidate,
    export_sft,
    load_dataset_jsonl,
    run_pipeline,
    save_dataset_jsonl,
    surface_entities,
    synthesize_cross_document,
)

# Sentinel-style ids: never appear in document text or script responses,
# so any leak into prompts or output pairs is detectable.
ALPHA = "zzq-alpha-7f3"
BETA = "zzq-beta-1c9"
GAMMA = "zzq-gamma-e52"

WINDOW, OVERLAP = 10, 2

P1 = ("Who founded Acme Corporation?", "Ada Lovelace")
P2 = ("When was it founded?", "It was founded in 1901")
P3 = ("How many years separated the founding of Acme Corporation from its first public offering?",
      "Nine years")
M1 = ("Who founded Acme Corporation, and in which year?",
      "Ada Lovelace founded Acme Corporation in 1901")
R2 = ("In which year was Acme Corporation founded?", "1901")
P4 = ("What product did Acme Corporation launch in 1910?", "The Widget")
P5 = ("Where was it launched?", "At the company's headquarters")
P6 = ("Who wrote the Widget assembly manual?", "Grace Hopper")
P7 = ("Who acquired Acme Corporation in 1950?", "Bolt Industries")
P8 = ("What does Bolt Industries manufacture?", "Fasteners")
E_ADA = ("Which mathematician founded Acme Corporation in 1901 and launched the Widget in 1910?",
         "Ada Lovelace")
E_BOLT = ("Which company acquired Acme Corporation and manufactures fasteners?",
          "Bolt Industries")
X1 = ("Which company, founded by Ada Lovelace, was eventually bought by a fastener manufacturer?",
      "Acme Corporation")

# Canonical order: stage rank, then sorted source chunks, then question.
EXPECTED_ORDER = [
    ("direct", P1[0]),
    ("direct", P4[0]),
    ("direct", P6[0]),
    ("direct", P8[0]),
    ("direct", P7[0]),
    ("indirect", P3[0]),
    ("merged", M1[0]),
    ("verified_rewrite", R2[0]),
    ("entity_surfacing", E_ADA[0]),
    ("entity_surfacing", E_BOLT[0]),
    ("cross_document", X1[0]),
]


def words(n, prefix):
    return " ".join(f"{prefix}{i}" for i in range(n))


def flagship_corpus():
    docs = [
        normalize_document(ALPHA, words(16, "wa"), question_ids=["q1"]),
        normalize_document(BETA, words(6, "wb"), question_ids=["q1"]),
        normalize_document(GAMMA, words(7, "wc"), question_ids=["q1"]),
    ]
    corpus = Corpus(documents=docs)
    corpus.apply_chunking(WINDOW, OVERLAP)
    corpus.groups = build_groups(corpus, "per_question", {"q1": [ALPHA, BETA, GAMMA]})
    return corpus


def qa(*pairs):
    return json.dumps([{"question": q, "answer": a} for q, a in pairs])


def base_script():
    """Tag -> response for the flagship run; ordinal 0 everywhere.

    Step 3 for the first chunk omits index 2 (unlisted means pass) and
    rewrites index 1; the second chunk discards one pair. The step-5
    response emits one accepted cross pair and one citing a single
    chunk, which must be rejected.
    """
    return {
        f"step1a:{ALPHA}:0": qa(P1, P2),
        f"step1b:{ALPHA}:0": qa(P3),
        f"step2:{ALPHA}:0": qa(M1),
        f"step3:{ALPHA}:0": json.dumps([
            {"index": 0, "verdict": "pass"},
            {"index": 1, "verdict": "rewrite", "question": R2[0], "answer": R2[1]},
            {"index": 3, "verdict": "pass"},
        ]),
        f"step1a:{ALPHA}:1": qa(P4, P5),
        f"step1b:{ALPHA}:1": "[]",
        f"step2:{ALPHA}:1": "[]",
        f"step3:{ALPHA}:1": json.dumps([
            {"index": 0, "verdict": "pass"},
            {"index": 1, "verdict": "discard", "reason": "location is ambiguous"},
        ]),
        f"step1a:{BETA}:0": qa(P6),
        f"step1b:{BETA}:0": "[]",
        f"step2:{BETA}:0": "[]",
        f"step3:{BETA}:0": json.dumps([{"index": 0, "verdict": "pass"}]),
        f"step1a:{GAMMA}:0": qa(P7, P8),
        f"step1b:{GAMMA}:0": "[]",
        f"step2:{GAMMA}:0": "[]",
        f"step3:{GAMMA}:0": json.dumps([
            {"index": 0, "verdict": "pass"},
            {"index": 1, "verdict": "pass"},
        ]),
        f"step4:{ALPHA}": json.dumps([{
            "question": E_ADA[0], "answer": E_ADA[1],
            "entities": ["Ada Lovelace"], "sources": [0, 1, 4],
        }]),
        f"step4:{BETA}": "[]",
        f"step4:{GAMMA}": json.dumps([{
            "question": E_BOLT[0], "answer": E_BOLT[1],
            "entities": ["Bolt Industries"], "sources": [0, 1],
        }]),
        "step5:q:q1": json.dumps([
            {"question": X1[0], "answer": X1[1], "sources": [0, 7, 9],
             "entities": ["Acme Corporation", "Bolt Industries"]},
            {"question": "What single-chunk trivia should be rejected?",
             "answer": "This one", "sources": [0, 1], "entities": []},
        ]),
    }


def backend_from(script_map, strict=True):
    entries = [{"tag": tag, "ordinal": 0, "response": resp}
               for tag, resp in script_map.items()]
    return MockBackend(MockScript.from_entries(entries, strict=strict))


def run_flagship(steps=ALL_STEPS, script=None, max_inflight=1):
    backend = backend_from(script if script is not None else base_script())
    log = PipelineLog()
    cfg = PipelineConfig(enabled_steps=frozenset(steps), max_inflight=max_inflight)
    dataset = run_pipeline(flagship_corpus(), backend, cfg, log)
    return dataset, log, backend


class TestFlagshipPipeline:
    def test_exact_per_stage_counts(self):
        dataset, _, _ = run_flagship()
        assert dataset.per_stage_counts == {
            "direct": 5,
            "indirect": 1,
            "merged": 1,
            "verified_rewrite": 1,
            "entity_surfacing": 2,
            "cross_document": 1,
        }
        assert len(dataset) == 11

    def test_canonical_order_and_content(self):
        dataset, _, _ = run_flagship()
        assert [(p.stage, p.question) for p in dataset.pairs] == EXPECTED_ORDER

    def test_discard_and_rejection_events(self):
        _, log, _ = run_flagship()
        discards = log.events("discard")
        assert len(discards) == 1
        assert discards[0].ref == f"step3:{ALPHA}:1"
        assert discards[0].detail == "location is ambiguous"
        rejected = log.events("cross_rejected")
        assert len(rejected) == 1
        assert rejected[0].ref == "step5:q:q1"
        assert len(log.events()) == 2

    def test_unlisted_verdict_index_passes(self):
        dataset, _, _ = run_flagship()
        kept = [p for p in dataset.pairs if p.question == P3[0]]
        assert len(kept) == 1
        assert kept[0].stage == "indirect"
        assert kept[0].answer == P3[1]

    def test_rewrite_replaces_original(self):
        dataset, _, _ = run_flagship()
        questions = [p.question for p in dataset.pairs]
        assert P2[0] not in questions
        rewritten = next(p for p in dataset.pairs if p.question == R2[0])
        assert rewritten.stage == "verified_rewrite"
        assert rewritten.source_chunks == frozenset({(ALPHA, 0)})

    def test_discarded_pair_absent(self):
        dataset, _, _ = run_flagship()
        assert P5[0] not in [p.question for p in dataset.pairs]

    def test_entity_pair_sources_union(self):
        dataset, _, _ = run_flagship()
        ada = next(p for p in dataset.pairs if p.question == E_ADA[0])
        assert ada.source_chunks == frozenset({(ALPHA, 0), (ALPHA, 1)})
        assert ada.entity_tags == frozenset({"Ada Lovelace"})

    def test_cross_pair_fields(self):
        dataset, _, _ = run_flagship()
        cross = next(p for p in dataset.pairs if p.stage == "cross_document")
        assert cross.question == X1[0]
        assert cross.group_id == "q:q1"
        assert cross.source_chunks == frozenset({(ALPHA, 0), (GAMMA, 0)})
        assert cross.entity_tags == frozenset({"Acme Corporation", "Bolt Industries"})

    def test_sentinel_freedom(self):
        dataset, _, backend = run_flagship()
        sentinels = (ALPHA, BETA, GAMMA)
        for pair in dataset.pairs:
            blob = pair.question + pair.answer + "".join(pair.entity_tags)
            for sentinel in sentinels:
                assert sentinel not in blob
        step5 = [r for r in backend.audit.records() if r.tag.startswith("step5:")]
        assert len(step5) == 1
        prompt = step5[0].request.user_content
        for sentinel in sentinels:
            assert sentinel not in prompt
        assert "[chunk C1+C2]" in prompt  # the two-chunk entity pair
        assert "[chunk C4]" in prompt

    def test_provenance(self):
        dataset, _, backend = run_flagship()
        prov = dataset.provenance
        assert prov["chunks_total"] == 4
        assert prov["chunks_failed"] == 0
        assert prov["errors"] == []
        assert prov["enabled_steps"] == sorted(ALL_STEPS)
        assert prov["event_counts"] == {"cross_rejected": 1, "discard": 1}
        assert prov["generator"] == "mock"
        assert prov["prompt_version"] == prompts.PROMPT_VERSION
        assert prov["config_hash"] == PipelineConfig().config_hash()
        # 4 chunks x (1a, 1b, 2, 3) + 3 documents for step 4 + 1 group.
        assert len(backend.audit) == 20

    def test_rerun_is_byte_identical(self, tmp_path):
        first, _, _ = run_flagship()
        second, _, _ = run_flagship()
        path_a, path_b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        save_dataset_jsonl(first, path_a)
        save_dataset_jsonl(second, path_b)
        assert path_a.read_bytes() == path_b.read_bytes()
        assert first.provenance == second.provenance

    def test_parallel_run_matches_sequential(self):
        sequential, _, _ = run_flagship(max_inflight=1)
        parallel, _, _ = run_flagship(max_inflight=4)
        assert parallel.pairs == sequential.pairs
        assert parallel.provenance["event_counts"] == sequential.provenance["event_counts"]


class TestLeaveOneOut:
    def test_step5_disabled_yields_zero_cross_pairs(self):
        script = base_script()
        del script["step5:q:q1"]
        dataset, _, backend = run_flagship(steps=set(ALL_STEPS) - {"5"}, script=script)
        assert dataset.per_stage_counts["cross_document"] == 0
        assert len(dataset) == 10
        assert not any(r.tag.startswith("step5:") for r in backend.audit.records())
        # Upstream stages are untouched by the switch.
        assert dataset.per_stage_counts["direct"] == 5
        assert dataset.per_stage_counts["entity_surfacing"] == 2

    def test_step4_disabled_removes_entity_pairs(self):
        script = base_script()
        for tag in (f"step4:{ALPHA}", f"step4:{BETA}", f"step4:{GAMMA}"):
            del script[tag]
        # Without entity pairs the group member list shrinks to
        # [P1, R2, P3, M1, P4, P6, P7, P8]; re-cite P1 and P7.
        script["step5:q:q1"] = json.dumps([
            {"question": X1[0], "answer": X1[1], "sources": [0, 6], "entities": []},
            {"question": "What single-chunk trivia should be rejected?",
             "answer": "This one", "sources": [0, 1], "entities": []},
        ])
        dataset, log, backend = run_flagship(steps=set(ALL_STEPS) - {"4"}, script=script)
        assert dataset.per_stage_counts["entity_surfacing"] == 0
        assert dataset.per_stage_counts["cross_document"] == 1
        assert len(dataset) == 9
        assert not any(r.tag.startswith("step4:") for r in backend.audit.records())
        assert len(log.events("cross_rejected")) == 1

    def test_step2_disabled_is_passthrough(self):
        script = base_script()
        for tag in list(script):
            if tag.startswith("step2:"):
                del script[tag]
        # Verification for the first chunk now sees [P1, P2, P3].
        script[f"step3:{ALPHA}:0"] = json.dumps([
            {"index": 0, "verdict": "pass"},
            {"index": 1, "verdict": "rewrite", "question": R2[0], "answer": R2[1]},
        ])
        script[f"step4:{ALPHA}"] = json.dumps([{
            "question": E_ADA[0], "answer": E_ADA[1],
            "entities": ["Ada Lovelace"], "sources": [0, 1, 3],
        }])
        # Member list: [P1, R2, P3, E_ada, P4, P6, P7, P8, E_bolt].
        script["step5:q:q1"] = json.dumps([
            {"question": X1[0], "answer": X1[1], "sources": [0, 6, 8],
             "entities": ["Acme Corporation", "Bolt Industries"]},
            {"question": "What single-chunk trivia should be rejected?",
             "answer": "This one", "sources": [0, 1], "entities": []},
        ])
        dataset, _, backend = run_flagship(steps=set(ALL_STEPS) - {"2"}, script=script)
        assert dataset.per_stage_counts["merged"] == 0
        assert len(dataset) == 10
        assert not any(r.tag.startswith("step2:") for r in backend.audit.records())

    def test_step1b_disabled_removes_indirect_pairs(self):
        script = base_script()
        for tag in list(script):
            if tag.startswith("step1b:"):
                del script[tag]
        # Verification for the first chunk now sees [P1, P2, M1].
        script[f"step3:{ALPHA}:0"] = json.dumps([
            {"index": 0, "verdict": "pass"},
            {"index": 1, "verdict": "rewrite", "question": R2[0], "answer": R2[1]},
            {"index": 2, "verdict": "pass"},
        ])
        script[f"step4:{ALPHA}"] = json.dumps([{
            "question": E_ADA[0], "answer": E_ADA[1],
            "entities": ["Ada Lovelace"], "sources": [0, 1, 3],
        }])
        # Member list: [P1, R2, M1, E_ada, P4, P6, P7, P8, E_bolt].
        script["step5:q:q1"] = json.dumps([
            {"question": X1[0], "answer": X1[1], "sources": [0, 6, 8],
             "entities": ["Acme Corporation", "Bolt Industries"]},
            {"question": "What single-chunk trivia should be rejected?",
             "answer": "This one", "sources": [0, 1], "entities": []},
        ])
        dataset, _, backend = run_flagship(steps=set(ALL_STEPS) - {"1b"}, script=script)
        assert dataset.per_stage_counts["indirect"] == 0
        assert len(dataset) == 10
        assert not any(r.tag.startswith("step1b:") for r in backend.audit.records())

    def test_step3_requires_an_extraction_step(self):
        with pytest.raises(PipelineError, match="step 3 requires"):
            PipelineConfig(enabled_steps=frozenset({"3"}))
        with pytest.raises(PipelineError, match="step 3 requires"):
            PipelineConfig(enabled_steps=frozenset({"2", "3"}))
        PipelineConfig(enabled_steps=frozenset({"1b", "3"}))

    def test_step5_requires_an_upstream_step(self):
        with pytest.raises(PipelineError, match="step 5 requires"):
            PipelineConfig(enabled_steps=frozenset({"5"}))

    def test_unknown_step_rejected(self):
        with pytest.raises(PipelineError, match="unknown steps"):
            PipelineConfig(enabled_steps=frozenset({"1a", "7"}))

    def test_config_bounds(self):
        with pytest.raises(PipelineError, match="parse_retry_limit"):
            PipelineConfig(parse_retry_limit=-1)
        with pytest.raises(PipelineError, match="max_inflight"):
            PipelineConfig(max_inflight=0)

    def test_unchunked_corpus_rejected(self):
        corpus = Corpus(documents=[normalize_document(ALPHA, words(4, "w"))])
        with pytest.raises(PipelineError, match="chunking"):
            run_pipeline(corpus, backend_from({}))


SOLO = "zzq-solo-9d4"
OTHER = "zzq-other-3b8"


def mini_corpus(*doc_ids):
    docs = [normalize_document(d, words(5, f"m{i}")) for i, d in enumerate(doc_ids)]
    corpus = Corpus(documents=docs)
    corpus.apply_chunking(WINDOW, OVERLAP)
    return corpus


def mini_backend(entries, strict=True):
    return MockBackend(MockScript.from_entries(entries, strict=strict))


class TestParseHandling:
    def test_retry_then_success(self):
        tag = f"step1a:{SOLO}:0"
        backend = mini_backend([
            {"tag": tag, "ordinal": 0, "response": "this is not json"},
            {"tag": tag, "ordinal": 1, "response": qa(("Q fine?", "A fine"))},
        ])
        log = PipelineLog()
        cfg = PipelineConfig(enabled_steps=frozenset({"1a"}))
        dataset = run_pipeline(mini_corpus(SOLO), backend, cfg, log)
        assert [p.question for p in dataset.pairs] == ["Q fine?"]
        assert len(log.events("parse_retry")) == 1
        assert log.events("parse_exhausted") == []
        calls = backend.audit.records(tag)
        assert len(calls) == 2
        first, second = (r.request.user_content for r in calls)
        assert second.startswith(first)
        assert "Your previous reply was not valid" in second
        assert dataset.provenance["errors"] == []

    def test_exhaustion_fails_only_that_chunk(self):
        bad = f"step1a:{SOLO}:0"
        entries = [{"tag": bad, "ordinal": k, "response": "still not json"}
                   for k in range(4)]
        entries.append({"tag": f"step1a:{OTHER}:0", "ordinal": 0,
                        "response": qa(("Q other?", "A other"))})
        backend = mini_backend(entries)
        log = PipelineLog()
        cfg = PipelineConfig(enabled_steps=frozenset({"1a"}), parse_retry_limit=3)
        dataset = run_pipeline(mini_corpus(SOLO, OTHER), backend, cfg, log)
        assert [p.question for p in dataset.pairs] == ["Q other?"]
        prov = dataset.provenance
        assert prov["chunks_failed"] == 1
        assert prov["chunks_total"] == 2
        assert prov["event_counts"] == {"parse_exhausted": 1, "parse_retry": 3}
        assert len(prov["errors"]) == 1
        assert prov["errors"][0][:2] == ["parse_exhausted", bad]

    def test_zero_retry_limit(self):
        entries = [
            {"tag": f"step1a:{SOLO}:0", "ordinal": 0, "response": "nope"},
            {"tag": f"step1a:{OTHER}:0", "ordinal": 0, "response": qa(("Q?", "A"))},
        ]
        backend = mini_backend(entries)
        log = PipelineLog()
        cfg = PipelineConfig(enabled_steps=frozenset({"1a"}), parse_retry_limit=0)
        run_pipeline(mini_corpus(SOLO, OTHER), backend, cfg, log)
        assert log.events("parse_retry") == []
        assert len(log.events("parse_exhausted")) == 1
        assert len(backend.audit.records(f"step1a:{SOLO}:0")) == 1

    def test_every_chunk_failed_raises(self):
        entries = [{"tag": f"step1a:{SOLO}:0", "ordinal": k, "response": "junk"}
                   for k in range(4)]
        backend = mini_backend(entries)
        cfg = PipelineConfig(enabled_steps=frozenset({"1a"}))
        with pytest.raises(PipelineError, match="every chunk failed"):
            run_pipeline(mini_corpus(SOLO), backend, cfg)

    def test_generator_error_flagged_without_parse_retries(self):
        # Strict mock with no entry for SOLO: the backend reports an
        # error response, which must not be re-prompted.
        backend = mini_backend([
            {"tag": f"step1a:{OTHER}:0", "ordinal": 0, "response": qa(("Q?", "A"))},
        ])
        log = PipelineLog()
        cfg = PipelineConfig(enabled_steps=frozenset({"1a"}))
        dataset = run_pipeline(mini_corpus(SOLO, OTHER), backend, cfg, log)
        assert [p.question for p in dataset.pairs] == ["Q?"]
        assert len(log.events("generator_error")) == 1
        assert log.events("parse_retry") == []
        assert dataset.provenance["chunks_failed"] == 1
        assert dataset.provenance["errors"][0][0] == "generator_error"
        assert len(backend.audit.records(f"step1a:{SOLO}:0")) == 1

    def test_failed_verification_keeps_all_pairs(self):
        entries = [{"tag": f"step1a:{SOLO}:0", "ordinal": 0,
                    "response": qa(("Q one?", "A one"), ("Q two?", "A two"))}]
        entries += [{"tag": f"step3:{SOLO}:0", "ordinal": k, "response": "garbled"}
                    for k in range(4)]
        backend = mini_backend(entries)
        log = PipelineLog()
        cfg = PipelineConfig(enabled_steps=frozenset({"1a", "3"}))
        dataset = run_pipeline(mini_corpus(SOLO), backend, cfg, log)
        assert len(dataset) == 2
        assert all(p.stage == "direct" for p in dataset.pairs)
        unverified = log.events("verify_unverified")
        assert len(unverified) == 1
        assert unverified[0].detail == "kept 2 pairs unverified"
        assert dataset.provenance["chunks_failed"] == 0


D1 = "zzq-d1-s"
D2 = "zzq-d2-s"
D9 = "zzq-d9-s"


def direct_pair(question, answer, chunks):
    return QAPair(question, answer, "direct", frozenset(chunks))


class TestCrossDocumentUnit:
    group = DocumentGroup("g1", ((D1, 0), (D2, 0)))

    def cfg(self, **kw):
        return PipelineConfig(enabled_steps=frozenset({"1a", "5"}), **kw)

    def test_oversized_list_is_halved(self):
        a1 = direct_pair("Alpha fact one?", "One", {(D1, 0)})
        b1 = direct_pair("Beta fact one?", "Two", {(D2, 0)})
        a2 = direct_pair("Alpha fact two?", "Three", {(D1, 0)})
        b2 = direct_pair("Beta fact two?", "Four", {(D2, 0)})
        pairs = [a1, b1, a2, b2]
        labeled = [(p.question, p.answer, "C1" if (D1, 0) in p.source_chunks else "C2")
                   for p in pairs]
        full = prompts.cross_document_prompt(labeled)
        limit = len(full) - 1
        assert len(prompts.cross_document_prompt(labeled[:2])) <= limit
        assert len(prompts.cross_document_prompt(labeled[2:])) <= limit
        backend = mini_backend([
            {"tag": "step5:g1", "ordinal": 0, "response": json.dumps([
                {"question": "Combined?", "answer": "Yes", "sources": [0, 1],
                 "entities": []},
            ])},
            {"tag": "step5:g1", "ordinal": 1, "response": "[]"},
        ])
        log = PipelineLog()
        out = synthesize_cross_document(self.group, pairs, backend,
                                        self.cfg(max_prompt_chars=limit), log)
        assert [p.question for p in out] == ["Combined?"]
        assert out[0].source_chunks == frozenset({(D1, 0), (D2, 0)})
        splits = log.events("cross_split")
        assert len(splits) == 1
        assert splits[0].detail == "4 pairs -> 2 + 2"
        assert len(backend.audit.records("step5:g1")) == 2

    def test_insufficient_chunk_coverage_skips_without_calling(self):
        pairs = [direct_pair("Alpha one?", "A", {(D1, 0)}),
                 direct_pair("Alpha two?", "B", {(D1, 0)})]
        backend = mini_backend([])
        log = PipelineLog()
        out = synthesize_cross_document(self.group, pairs, backend, self.cfg(), log)
        assert out == []
        skipped = log.events("cross_skipped")
        assert len(skipped) == 1
        assert skipped[0].detail == "2 pairs cover 1 group chunk(s)"
        assert len(backend.audit) == 0

    def test_single_oversized_pair_skipped(self):
        wide = direct_pair("Spans both chunks?", "Yes", {(D1, 0), (D2, 0)})
        backend = mini_backend([])
        log = PipelineLog()
        out = synthesize_cross_document(self.group, [wide], backend,
                                        self.cfg(max_prompt_chars=10), log)
        assert out == []
        assert log.events("cross_skipped")[0].detail == "single oversized pair"
        assert len(backend.audit) == 0

    def test_out_of_group_chunks_hidden_but_preserved(self):
        a1 = direct_pair("Alpha one?", "A", {(D1, 0)})
        bx = direct_pair("Beta plus stray?", "B", {(D2, 0), (D9, 7)})
        backend = mini_backend([
            {"tag": "step5:g1", "ordinal": 0, "response": json.dumps([
                {"question": "Across?", "answer": "Sure", "sources": [0, 1],
                 "entities": []},
            ])},
        ])
        out = synthesize_cross_document(self.group, [a1, bx], backend, self.cfg())
        prompt = backend.audit.records("step5:g1")[0].request.user_content
        assert D9 not in prompt and D1 not in prompt and D2 not in prompt
        assert "[chunk C2]" in prompt
        # The stray chunk stays in provenance even though it was unlabeled.
        assert out[0].source_chunks == frozenset({(D1, 0), (D2, 0), (D9, 7)})

    def test_single_chunk_citation_rejected(self):
        a1 = direct_pair("Alpha one?", "A", {(D1, 0)})
        b1 = direct_pair("Beta one?", "B", {(D2, 0)})
        backend = mini_backend([
            {"tag": "step5:g1", "ordinal": 0, "response": json.dumps([
                {"question": "Narrow?", "answer": "No", "sources": [0], "entities": []},
            ])},
        ])
        log = PipelineLog()
        out = synthesize_cross_document(self.group, [a1, b1], backend, self.cfg(), log)
        assert out == []
        assert len(log.events("cross_rejected")) == 1


class TestEntityAndConsolidateUnits:
    def test_surface_entities_rejects_multi_document_input(self):
        pairs = [direct_pair("Q1?", "A1", {(D1, 0)}),
                 direct_pair("Q2?", "A2", {(D2, 0)})]
        with pytest.raises(ValueError, match="exactly one document"):
            surface_entities(pairs, mini_backend([]), PipelineConfig())

    def test_surface_entities_defaults_to_all_sources(self):
        pairs = [direct_pair("Q1?", "A1", {(D1, 0)}),
                 direct_pair("Q2?", "A2", {(D1, 1)})]
        backend = mini_backend([
            {"tag": f"step4:{D1}", "ordinal": 0, "response": json.dumps([
                {"question": "Which thing?", "answer": "That one",
                 "entities": ["That one"]},
            ])},
        ])
        out = surface_entities(pairs, backend, PipelineConfig())
        assert out[0].source_chunks == frozenset({(D1, 0), (D1, 1)})

    def test_consolidate_rejects_multi_chunk_input(self):
        pairs = [direct_pair("Q1?", "A1", {(D1, 0)}),
                 direct_pair("Q2?", "A2", {(D1, 1)})]
        with pytest.raises(ValueError, match="exactly one chunk"):
            consolidate(pairs, mini_backend([]), PipelineConfig())

    def test_consolidate_never_deletes_inputs(self):
        pairs = [direct_pair("Q1?", "A1", {(D1, 0)}),
                 direct_pair("Q2?", "A2", {(D1, 0)})]
        backend = mini_backend([
            {"tag": f"step2:{D1}:0", "ordinal": 0, "response": "[]"},
        ])
        out = consolidate(pairs, backend, PipelineConfig())
        assert out == pairs


class TestDatasetRoundTrip:
    def test_dedup_keeps_earliest_stage(self):
        as_direct = QAPair("Q?", "A", "direct", {(D1, 0)})
        as_merged = QAPair("Q?", "A", "merged", {(D1, 0)})
        dataset = ReflectionDataset.from_pairs([as_merged, as_direct])
        assert dataset.pairs == (as_direct,)

    def test_dedup_is_whitespace_normalized(self):
        loose = QAPair("Q  spaced?", "A", "direct", {(D1, 0)})
        tight = QAPair("Q spaced?", "A", "direct", {(D1, 0)})
        dataset = ReflectionDataset.from_pairs([loose, tight])
        assert len(dataset) == 1
        assert dataset.pairs[0].question == "Q  spaced?"

    def test_jsonl_roundtrip(self, tmp_path):
        dataset, _, _ = run_flagship()
        path = tmp_path / "pairs.jsonl"
        save_dataset_jsonl(dataset, path)
        loaded = load_dataset_jsonl(path)
        assert loaded.pairs == dataset.pairs

    def test_pair_validation(self):
        with pytest.raises(ValueError, match="unknown stage"):
            QAPair("Q?", "A", "bogus", {(D1, 0)})
        with pytest.raises(ValueError, match="non-empty"):
            QAPair("   ", "A", "direct", {(D1, 0)})
        with pytest.raises(ValueError, match="group id"):
            QAPair("Q?", "A", "cross_document", {(D1, 0)})


def small_dataset(n=8):
    pairs = [QAPair(f"Question number {i}?", f"Answer number {i}", "direct", {(D1, 0)})
             for i in range(n)]
    return ReflectionDataset.from_pairs(pairs)


class TestExportSft:
    def test_format_and_count(self, tmp_path):
        dataset = small_dataset()
        path = tmp_path / "sft.jsonl"
        assert export_sft(dataset, path, shuffle_seed=7) == 8
        rows = [json.loads(line) for line in path.read_text().splitlines()]
        assert len(rows) == 8
        for row in rows:
            assert row["train_on"] == "assistant"
            roles = [m["role"] for m in row["messages"]]
            assert roles == ["user", "assistant"]
        exported = {(r["messages"][0]["content"], r["messages"][1]["content"])
                    for r in rows}
        assert exported == {(p.question, p.answer) for p in dataset.pairs}

    def test_same_seed_is_deterministic(self, tmp_path):
        dataset = small_dataset()
        a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        export_sft(dataset, a, shuffle_seed=7)
        export_sft(dataset, b, shuffle_seed=7)
        assert a.read_bytes() == b.read_bytes()

    def test_seed_changes_order(self, tmp_path):
        dataset = small_dataset()
        a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        export_sft(dataset, a, shuffle_seed=7)
        export_sft(dataset, b, shuffle_seed=8)
        assert sorted(a.read_text().splitlines()) == sorted(b.read_text().splitlines())
        assert a.read_bytes() != b.read_bytes()

    def test_empty_dataset_rejected(self, tmp_path):
        with pytest.raises(PipelineError, match="empty"):
            export_sft(ReflectionDataset.from_pairs([]), tmp_path / "x.jsonl", 0)


def one_pair_dataset(question, answer):
    return ReflectionDataset.from_pairs(
        [QAPair(question, answer, "direct", {(D1, 0)})])


class TestCompressionRatio:
    def test_repetitive_pair_compresses_over_100x(self):
        dataset = one_pair_dataset("x" * 5000, "y" * 4999)
        ratio, raw, comp = compression_ratio(dataset)
        expected = ("x" * 5000 + "\n" + "y" * 4999).encode("utf-8")
        oracle = gzip.compress(expected, compresslevel=9, mtime=0)
        assert raw == 10_000
        assert ratio > 100
        assert ratio == pytest.approx(len(expected) / len(oracle), rel=0.02)
        assert comp == pytest.approx(len(oracle), rel=0.02)

    def test_random_bytes_stay_near_unity(self):
        rng = random.Random(20260817)
        q_bytes = rng.randbytes(5000)
        a_bytes = rng.randbytes(4999)
        question = q_bytes.decode("utf-8", "surrogateescape")
        answer = a_bytes.decode("utf-8", "surrogateescape")
        assert question.encode("utf-8", "surrogateescape") == q_bytes
        ratio, raw, _ = compression_ratio(one_pair_dataset(question, answer))
        expected = q_bytes + b"\n" + a_bytes
        oracle = gzip.compress(expected, compresslevel=9, mtime=0)
        assert raw == 10_000
        assert ratio < 1.05
        assert ratio == pytest.approx(len(expected) / len(oracle), rel=0.02)

    def test_concatenation_follows_canonical_order(self):
        first = QAPair("A question?", "First answer", "direct", {(D1, 0)})
        second = QAPair("B question?", "Second answer", "direct", {(D1, 0)})
        dataset = ReflectionDataset.from_pairs([second, first])
        _, raw, _ = compression_ratio(dataset)
        expected = "\n".join(["A question?", "First answer",
                              "B question?", "Second answer"]).encode("utf-8")
        assert raw == len(expected)

    def test_empty_dataset_rejected(self):
        with pytest.raises(PipelineError, match="empty"):
            compression_ratio(ReflectionDataset.from_pairs([]))
