"""Five-step reflection QA synthesis over a chunked corpus.

Per chunk: direct extraction, indirect extraction, consolidation into
multi-fact pairs, and self-containment verification. Per document:
entity surfacing over the verified pairs. Per group: cross-document
synthesis. The final dataset is the union of verified, entity, and
cross pairs, deduplicated by whitespace-normalized (question, answer)
and canonically ordered so reruns are byte-identical.

Each step can be disabled independently for leave-one-out ablation.
Disabling a step removes its contribution without touching the rest:
steps 2 and 3 become pass-throughs, the others contribute nothing.
"""

from __future__ import annotations

import gzip
import hashlib
import json
import random
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from ..corpus import Chunk, Corpus, DocumentGroup
from ..gateway import CompletionRequest
from . import prompts

STAGES = ("direct", "indirect", "merged", "verified_rewrite",
          "entity_surfacing", "cross_document")
ALL_STEPS = ("1a", "1b", "2", "3", "4", "5")


class PipelineError(RuntimeError):
    """Configuration violation or total pipeline failure."""


class ParseError(ValueError):
    """Generator output does not satisfy the step's JSON schema."""


def _norm(text: str) -> str:
    return " ".join(text.split())


@dataclass(frozen=True)
class QAPair:
    """One reflection: a question-answer pair with provenance."""

    question: str
    answer: str
    stage: str
    source_chunks: frozenset
    entity_tags: frozenset = frozenset()
    group_id: str | None = None

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}")
        if not _norm(self.question) or not _norm(self.answer):
            raise ValueError("question and answer must be non-empty")
        if self.stage == "cross_document" and not self.group_id:
            raise ValueError("cross_document pairs must carry a group id")
        object.__setattr__(self, "source_chunks",
                           frozenset((str(d), int(i)) for d, i in self.source_chunks))
        object.__setattr__(self, "entity_tags", frozenset(self.entity_tags))

    @property
    def dedup_key(self) -> tuple[str, str]:
        return (_norm(self.question), _norm(self.answer))

    @property
    def sort_key(self):
        return (STAGES.index(self.stage), sorted(self.source_chunks),
                self.question, self.answer, self.group_id or "")


@dataclass(frozen=True)
class StepEvent:
    kind: str  # parse_retry | parse_exhausted | generator_error | discard | cross_rejected | cross_split | cross_skipped | verify_unverified | fallback
    ref: str
    detail: str = ""


class PipelineLog:
    """Thread-safe append-only event log."""

    def __init__(self):
        self._lock = threading.Lock()
        self._events: list[StepEvent] = []

    def add(self, kind: str, ref: str, detail: str = ""):
        with self._lock:
            self._events.append(StepEvent(kind, ref, detail))

    def events(self, kind: str | None = None) -> list[StepEvent]:
        with self._lock:
            if kind is None:
                return list(self._events)
            return [e for e in self._events if e.kind == kind]


@dataclass(frozen=True)
class StepSampling:
    temperature: float = 0.7
    max_output_tokens: int = 2048


@dataclass(frozen=True)
class PipelineConfig:
    enabled_steps: frozenset = frozenset(ALL_STEPS)
    sampling: StepSampling = StepSampling()
    parse_retry_limit: int = 3
    max_prompt_chars: int = 200_000
    max_inflight: int = 1

    def __post_init__(self):
        object.__setattr__(self, "enabled_steps", frozenset(self.enabled_steps))
        unknown = self.enabled_steps - set(ALL_STEPS)
        if unknown:
            raise PipelineError(f"unknown steps: {sorted(unknown)}")
        if "3" in self.enabled_steps and not self.enabled_steps & {"1a", "1b"}:
            raise PipelineError("step 3 requires step 1a or 1b")
        if "5" in self.enabled_steps and not self.enabled_steps & {"1a", "1b", "2", "3", "4"}:
            raise PipelineError("step 5 requires at least one upstream step")
        if self.parse_retry_limit < 0:
            raise PipelineError("parse_retry_limit must be >= 0")
        if self.max_inflight < 1:
            raise PipelineError("max_inflight must be >= 1")

    def enabled(self, step: str) -> bool:
        return step in self.enabled_steps

    def config_hash(self) -> str:
        blob = json.dumps({
            "enabled_steps": sorted(self.enabled_steps),
            "temperature": self.sampling.temperature,
            "max_output_tokens": self.sampling.max_output_tokens,
            "parse_retry_limit": self.parse_retry_limit,
            "max_prompt_chars": self.max_prompt_chars,
            "prompt_version": prompts.PROMPT_VERSION,
        }, sort_keys=True)
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def _strip_fences(text: str) -> str:
    body = text.strip()
    if body.startswith("```"):
        first_newline = body.find("\n")
        if first_newline != -1 and body.endswith("```"):
            body = body[first_newline + 1:-3].strip()
    return body


def _parse_json_array(text: str) -> list:
    try:
        value = json.loads(_strip_fences(text))
    except ValueError as exc:
        raise ParseError(f"not valid JSON: {exc}") from exc
    if not isinstance(value, list):
        raise ParseError(f"expected a JSON array, got {type(value).__name__}")
    return value


def _require_str(obj: dict, key: str) -> str:
    value = obj.get(key)
    if not isinstance(value, str) or not value.strip():
        raise ParseError(f"field {key!r} must be a non-empty string")
    return value


def _call_parsed(gen, prompt: str, tag: str, cfg: PipelineConfig, validate, log: PipelineLog):
    """One generation with parse retries; returns validated items or None.

    None means the step failed for this target: generator error (no
    retry at this layer; the backend owns transport retries) or schema
    failure after cfg.parse_retry_limit re-prompts. Both are logged.
    """
    current = prompt
    for attempt in range(cfg.parse_retry_limit + 1):
        response = gen.complete(CompletionRequest(
            messages=(("user", current),),
            temperature=cfg.sampling.temperature,
            max_output_tokens=cfg.sampling.max_output_tokens,
            tag=tag,
        ))
        if not response.ok:
            log.add("generator_error", tag, response.error or "")
            return None
        try:
            return validate(_parse_json_array(response.content))
        except ParseError as exc:
            if attempt < cfg.parse_retry_limit:
                log.add("parse_retry", tag, str(exc))
                current = prompt + prompts.RETRY_SUFFIX.format(error=exc)
            else:
                log.add("parse_exhausted", tag, str(exc))
                return None


def _validate_simple_pairs(items: list) -> list[tuple[str, str]]:
    out = []
    for obj in items:
        if not isinstance(obj, dict):
            raise ParseError("array elements must be objects")
        out.append((_require_str(obj, "question"), _require_str(obj, "answer")))
    return out


def _single_chunk_of(pairs: Sequence[QAPair]) -> tuple[str, int]:
    chunks = {c for p in pairs for c in p.source_chunks}
    if len(chunks) != 1:
        raise ValueError(f"pairs must originate from exactly one chunk, found {len(chunks)}")
    return next(iter(chunks))


def extract_direct(chunk: Chunk, gen, cfg: PipelineConfig,
                   log: PipelineLog | None = None) -> list[QAPair]:
    """Step 1a: QA pairs for facts stated explicitly in the chunk."""
    return _extract(chunk, gen, cfg, log or PipelineLog(), "direct")[0]


def extract_indirect(chunk: Chunk, gen, cfg: PipelineConfig,
                     log: PipelineLog | None = None) -> list[QAPair]:
    """Step 1b: QA pairs for information inferable from the chunk."""
    return _extract(chunk, gen, cfg, log or PipelineLog(), "indirect")[0]


def _extract(chunk: Chunk, gen, cfg: PipelineConfig, log: PipelineLog,
             stage: str) -> tuple[list[QAPair], bool]:
    """Returns (pairs, errored); errored means the generation itself failed."""
    if stage == "direct":
        tag = f"step1a:{chunk.doc_id}:{chunk.index}"
        prompt = prompts.direct_prompt(chunk.text)
    else:
        tag = f"step1b:{chunk.doc_id}:{chunk.index}"
        prompt = prompts.indirect_prompt(chunk.text)
    items = _call_parsed(gen, prompt, tag, cfg, _validate_simple_pairs, log)
    if items is None:
        return [], True
    source = frozenset({(chunk.doc_id, chunk.index)})
    return [QAPair(q, a, stage, source) for q, a in items], False


def consolidate(pairs: Sequence[QAPair], gen, cfg: PipelineConfig,
                log: PipelineLog | None = None) -> list[QAPair]:
    """Step 2: add merged multi-fact pairs; never removes the inputs."""
    log = log or PipelineLog()
    pairs = list(pairs)
    if not pairs:
        return pairs
    doc_id, index = _single_chunk_of(pairs)
    tag = f"step2:{doc_id}:{index}"
    prompt = prompts.consolidate_prompt([(p.question, p.answer) for p in pairs])
    items = _call_parsed(gen, prompt, tag, cfg, _validate_simple_pairs, log)
    if items is None:
        return pairs
    source = frozenset({(doc_id, index)})
    return pairs + [QAPair(q, a, "merged", source) for q, a in items]


def _validate_verdicts(count: int):
    def validate(items: list) -> dict[int, dict]:
        verdicts: dict[int, dict] = {}
        for obj in items:
            if not isinstance(obj, dict):
                raise ParseError("array elements must be objects")
            index = obj.get("index")
            if not isinstance(index, int) or not 0 <= index < count:
                raise ParseError(f"index must be an int in [0, {count})")
            if index in verdicts:
                raise ParseError(f"duplicate verdict for index {index}")
            verdict = obj.get("verdict")
            if verdict not in ("pass", "rewrite", "discard"):
                raise ParseError("verdict must be pass, rewrite, or discard")
            if verdict == "rewrite":
                _require_str(obj, "question")
                _require_str(obj, "answer")
            verdicts[index] = obj
        return verdicts
    return validate


def verify_self_containment(pairs: Sequence[QAPair], chunk: Chunk, gen,
                            cfg: PipelineConfig,
                            log: PipelineLog | None = None) -> list[QAPair]:
    """Step 3: pass, rewrite, or discard each pair for self-containment.

    A failed verification call keeps every pair unmodified and flags the
    chunk; losing data to a transient fault is the worse outcome.
    """
    log = log or PipelineLog()
    pairs = list(pairs)
    if not pairs:
        return pairs
    tag = f"step3:{chunk.doc_id}:{chunk.index}"
    prompt = prompts.verify_prompt([(p.question, p.answer) for p in pairs], chunk.text)
    verdicts = _call_parsed(gen, prompt, tag, cfg, _validate_verdicts(len(pairs)), log)
    if verdicts is None:
        log.add("verify_unverified", tag, f"kept {len(pairs)} pairs unverified")
        return pairs
    out = []
    for i, pair in enumerate(pairs):
        obj = verdicts.get(i)
        if obj is None or obj["verdict"] == "pass":
            out.append(pair)
        elif obj["verdict"] == "rewrite":
            out.append(QAPair(obj["question"], obj["answer"], "verified_rewrite",
                              pair.source_chunks, pair.entity_tags))
        else:
            log.add("discard", tag, obj.get("reason", "") or pair.question)
    return out


def _validate_entity_items(count: int):
    def validate(items: list) -> list[dict]:
        out = []
        for obj in items:
            if not isinstance(obj, dict):
                raise ParseError("array elements must be objects")
            _require_str(obj, "question")
            _require_str(obj, "answer")
            entities = obj.get("entities")
            if not isinstance(entities, list) or not entities or \
                    not all(isinstance(e, str) and e.strip() for e in entities):
                raise ParseError("entities must be a non-empty list of strings")
            sources = obj.get("sources", [])
            if not isinstance(sources, list) or \
                    not all(isinstance(s, int) and 0 <= s < count for s in sources):
                raise ParseError(f"sources must be ints in [0, {count})")
            out.append(obj)
        return out
    return validate


def surface_entities(doc_pairs: Sequence[QAPair], gen, cfg: PipelineConfig,
                     log: PipelineLog | None = None) -> list[QAPair]:
    """Step 4: questions describing an entity's attributes, answered by its name."""
    log = log or PipelineLog()
    doc_pairs = list(doc_pairs)
    if not doc_pairs:
        return []
    doc_ids = {d for p in doc_pairs for d, _ in p.source_chunks}
    if len(doc_ids) != 1:
        raise ValueError(f"doc_pairs must belong to exactly one document, found {len(doc_ids)}")
    doc_id = next(iter(doc_ids))
    tag = f"step4:{doc_id}"
    prompt = prompts.entity_prompt([(p.question, p.answer) for p in doc_pairs])
    items = _call_parsed(gen, prompt, tag, cfg, _validate_entity_items(len(doc_pairs)), log)
    if items is None:
        return []
    out = []
    for obj in items:
        cited = obj.get("sources") or range(len(doc_pairs))
        source = frozenset().union(*(doc_pairs[i].source_chunks for i in cited))
        out.append(QAPair(obj["question"], obj["answer"], "entity_surfacing",
                          source, frozenset(obj["entities"])))
    return out


def _validate_cross_items(count: int):
    def validate(items: list) -> list[dict]:
        out = []
        for obj in items:
            if not isinstance(obj, dict):
                raise ParseError("array elements must be objects")
            _require_str(obj, "question")
            _require_str(obj, "answer")
            sources = obj.get("sources")
            if not isinstance(sources, list) or not sources or \
                    not all(isinstance(s, int) and 0 <= s < count for s in sources):
                raise ParseError(f"sources must be a non-empty list of ints in [0, {count})")
            entities = obj.get("entities", [])
            if not isinstance(entities, list) or \
                    not all(isinstance(e, str) and e.strip() for e in entities):
                raise ParseError("entities must be a list of strings")
            out.append(obj)
        return out
    return validate


def synthesize_cross_document(group: DocumentGroup, member_pairs: Sequence[QAPair],
                              gen, cfg: PipelineConfig,
                              log: PipelineLog | None = None) -> list[QAPair]:
    """Step 5: pairs combining facts from at least two chunks of the group.

    Document ids never enter the prompt; chunks are labeled with opaque
    per-group ordinals. An oversized pair list is halved recursively.
    """
    log = log or PipelineLog()
    member_pairs = list(member_pairs)
    group_chunks = set(group.member_chunks)

    def covered(pairs: Sequence[QAPair]) -> set:
        return {c for p in pairs for c in p.source_chunks if c in group_chunks}

    labels = {chunk: f"C{i + 1}" for i, chunk in enumerate(sorted(covered(member_pairs)))}

    def synthesize(pairs: list[QAPair]) -> list[QAPair]:
        span = covered(pairs)
        if len(span) < 2:
            log.add("cross_skipped", group.id,
                    f"{len(pairs)} pairs cover {len(span)} group chunk(s)")
            return []
        labeled = [(p.question, p.answer,
                    "+".join(labels[c] for c in sorted(p.source_chunks & group_chunks)))
                   for p in pairs]
        prompt = prompts.cross_document_prompt(labeled)
        if len(prompt) > cfg.max_prompt_chars:
            if len(pairs) == 1:
                log.add("cross_skipped", group.id, "single oversized pair")
                return []
            mid = len(pairs) // 2
            log.add("cross_split", group.id, f"{len(pairs)} pairs -> {mid} + {len(pairs) - mid}")
            return synthesize(pairs[:mid]) + synthesize(pairs[mid:])
        tag = f"step5:{group.id}"
        items = _call_parsed(gen, prompt, tag, cfg, _validate_cross_items(len(pairs)), log)
        if items is None:
            return []
        out = []
        for obj in items:
            source = frozenset().union(*(pairs[i].source_chunks for i in obj["sources"]))
            if len(source & group_chunks) < 2:
                log.add("cross_rejected", tag, obj["question"])
                continue
            out.append(QAPair(obj["question"], obj["answer"], "cross_document",
                              source, frozenset(obj.get("entities", [])), group.id))
        return out

    return synthesize(member_pairs)


@dataclass(frozen=True)
class ReflectionDataset:
    """The synthesized QA dataset: canonically ordered, deduplicated pairs."""

    pairs: tuple[QAPair, ...]
    provenance: dict = field(default_factory=dict)

    @classmethod
    def from_pairs(cls, pairs: Iterable[QAPair], provenance: dict | None = None) -> "ReflectionDataset":
        ordered = sorted(pairs, key=lambda p: p.sort_key)
        seen = set()
        unique = []
        for pair in ordered:
            if pair.dedup_key not in seen:
                seen.add(pair.dedup_key)
                unique.append(pair)
        return cls(tuple(unique), provenance or {})

    @property
    def per_stage_counts(self) -> dict[str, int]:
        counts = {stage: 0 for stage in STAGES}
        for pair in self.pairs:
            counts[pair.stage] += 1
        return counts

    def __len__(self) -> int:
        return len(self.pairs)


def run_pipeline(corpus: Corpus, gen, cfg: PipelineConfig | None = None,
                 log: PipelineLog | None = None) -> ReflectionDataset:
    """Execute the enabled steps over a chunked, grouped corpus."""
    cfg = cfg or PipelineConfig()
    log = log or PipelineLog()
    if not corpus.chunks:
        raise PipelineError("corpus has no chunks; apply chunking first")
    corpus.validate_groups()

    def chunk_work(chunk: Chunk) -> tuple[list[QAPair], bool]:
        raw: list[QAPair] = []
        errors = 0
        enabled_extractions = 0
        for step, stage in (("1a", "direct"), ("1b", "indirect")):
            if cfg.enabled(step):
                enabled_extractions += 1
                pairs, errored = _extract(chunk, gen, cfg, log, stage)
                raw.extend(pairs)
                errors += errored
        failed = enabled_extractions > 0 and errors == enabled_extractions
        con = consolidate(raw, gen, cfg, log) if cfg.enabled("2") else raw
        ver = verify_self_containment(con, chunk, gen, cfg, log) if cfg.enabled("3") else con
        return ver, failed

    all_chunks = list(corpus.chunks)
    if cfg.max_inflight > 1 and len(all_chunks) > 1:
        with ThreadPoolExecutor(max_workers=cfg.max_inflight) as pool:
            results = list(pool.map(chunk_work, all_chunks))
    else:
        results = [chunk_work(c) for c in all_chunks]

    failures = sum(1 for _, failed in results if failed)
    if failures == len(all_chunks) and failures > 0:
        raise PipelineError(f"every chunk failed ({failures} of {len(all_chunks)})")

    verified_by_doc: dict[str, list[QAPair]] = {}
    for chunk, (ver, _) in zip(all_chunks, results):
        verified_by_doc.setdefault(chunk.doc_id, []).extend(ver)

    collected: list[QAPair] = []
    for doc in corpus.documents:
        doc_pairs = verified_by_doc.get(doc.id, [])
        collected.extend(doc_pairs)
        if cfg.enabled("4") and doc_pairs:
            collected.extend(surface_entities(doc_pairs, gen, cfg, log))

    if cfg.enabled("5"):
        by_chunk: dict[tuple[str, int], list[QAPair]] = {}
        for pair in collected:
            for ref in pair.source_chunks:
                by_chunk.setdefault(ref, []).append(pair)
        for group in corpus.groups:
            member_set = []
            seen_ids = set()
            for ref in group.member_chunks:
                for pair in by_chunk.get(ref, []):
                    if id(pair) not in seen_ids:
                        seen_ids.add(id(pair))
                        member_set.append(pair)
            collected.extend(synthesize_cross_document(group, member_set, gen, cfg, log))

    events = log.events()
    kinds: dict[str, int] = {}
    for event in events:
        kinds[event.kind] = kinds.get(event.kind, 0) + 1
    provenance = {
        "config_hash": cfg.config_hash(),
        "generator": getattr(gen, "name", type(gen).__name__),
        "prompt_version": prompts.PROMPT_VERSION,
        "enabled_steps": sorted(cfg.enabled_steps),
        "event_counts": dict(sorted(kinds.items())),
        "errors": [[e.kind, e.ref, e.detail] for e in events
                   if e.kind in ("generator_error", "parse_exhausted")],
        "chunks_failed": failures,
        "chunks_total": len(all_chunks),
    }
    return ReflectionDataset.from_pairs(collected, provenance)


def save_dataset_jsonl(dataset: ReflectionDataset, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for pair in dataset.pairs:
            fh.write(json.dumps({
                "question": pair.question,
                "answer": pair.answer,
                "stage": pair.stage,
                "source_chunks": [[d, i] for d, i in sorted(pair.source_chunks)],
                "entity_tags": sorted(pair.entity_tags),
                "group_id": pair.group_id,
            }, ensure_ascii=False) + "\n")


def load_dataset_jsonl(path) -> ReflectionDataset:
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            obj = json.loads(line)
            pairs.append(QAPair(
                obj["question"], obj["answer"], obj["stage"],
                frozenset((d, i) for d, i in obj.get("source_chunks", [])),
                frozenset(obj.get("entity_tags", [])),
                obj.get("group_id"),
            ))
    return ReflectionDataset.from_pairs(pairs)


def export_sft(dataset: ReflectionDataset, path, shuffle_seed: int) -> int:
    """Write chat-format JSONL for external trainers; returns the line count.

    train_on marks which role's tokens carry loss. Order is a seeded
    uniform shuffle of the canonical pair order.
    """
    if not dataset.pairs:
        raise PipelineError("refusing to export an empty dataset")
    lines = []
    for pair in dataset.pairs:
        lines.append(json.dumps({
            "messages": [
                {"role": "user", "content": pair.question},
                {"role": "assistant", "content": pair.answer},
            ],
            "train_on": "assistant",
        }, ensure_ascii=False))
    random.Random(shuffle_seed).shuffle(lines)
    try:
        with open(path, "w", encoding="utf-8") as fh:
            for line in lines:
                fh.write(line + "\n")
    except OSError as exc:
        raise PipelineError(f"cannot write SFT export to {path}: {exc}") from exc
    return len(lines)


def compression_ratio(dataset: ReflectionDataset) -> tuple[float, int, int]:
    """(ratio, raw_bytes, compressed_bytes) under gzip at maximum level."""
    if not dataset.pairs:
        raise PipelineError("compression ratio of an empty dataset is undefined")
    parts = []
    for pair in dataset.pairs:
        parts.append(pair.question)
        parts.append(pair.answer)
    # surrogateescape keeps the measurement byte-faithful for pairs whose
    # text was decoded from raw bytes; ordinary text encodes identically.
    raw = "\n".join(parts).encode("utf-8", "surrogateescape")
    compressed = gzip.compress(raw, compresslevel=9, mtime=0)
    return len(raw) / len(compressed), len(raw), len(compressed)
