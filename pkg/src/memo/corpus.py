"""Target corpus modeling: documents, chunking, groups, and noise assembly.

Documents are whitespace-normalized at load time so that word spans are
reproducible across platforms. Chunking uses a fixed sliding window in
word coordinates; groups collect topically related chunks either per
document or per annotated question.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Iterable, Sequence

EVIDENCE = "evidence"
NEGATIVE = "negative"

# Chunk-length histogram boundaries (token/word counts). Buckets are
# 0-512, 513-1024, doubling up to 65537-131072, then an overflow bucket.
LENGTH_BUCKETS = [512, 1024, 2048, 4096, 8192, 16384, 32768, 65536, 131072]

# Group-size histogram boundaries: 0-2, 3-4, 5-8, 9-16, >16.
GROUP_SIZE_BUCKETS = [2, 4, 8, 16]


class CorpusError(ValueError):
    """Invalid corpus content or corpus-operation arguments."""


@dataclass(frozen=True)
class Document:
    """One corpus document with its polarity label.

    ``source_question_ids`` lists the questions this document supports
    (evidence) or distracts (negative).
    """

    id: str
    text: str
    polarity: str = EVIDENCE
    source_question_ids: frozenset[str] = frozenset()

    def __post_init__(self):
        if not self.id:
            raise CorpusError("document id must be nonempty")
        if not self.text.strip():
            raise CorpusError(f"document {self.id!r} has no text")
        if self.polarity not in (EVIDENCE, NEGATIVE):
            raise CorpusError(f"document {self.id!r}: unknown polarity {self.polarity!r}")
        object.__setattr__(self, "source_question_ids", frozenset(self.source_question_ids))

    @property
    def words(self) -> list[str]:
        return self.text.split()


@dataclass(frozen=True)
class Chunk:
    """A contiguous word window of one document.

    ``word_span`` is half-open [start, end) in whitespace-word
    coordinates of the parent document.
    """

    doc_id: str
    index: int
    text: str
    word_span: tuple[int, int]

    @property
    def key(self) -> tuple[str, int]:
        return (self.doc_id, self.index)


@dataclass(frozen=True)
class DocumentGroup:
    """An ordered set of topically related chunk references."""

    id: str
    member_chunks: tuple[tuple[str, int], ...]

    def __post_init__(self):
        if not self.member_chunks:
            raise CorpusError(f"group {self.id!r} is empty")
        if len(set(self.member_chunks)) != len(self.member_chunks):
            raise CorpusError(f"group {self.id!r} has duplicate member references")
        object.__setattr__(self, "member_chunks", tuple(tuple(m) for m in self.member_chunks))


@dataclass
class Corpus:
    """Documents plus derived chunks and groups.

    ``noise_ratio`` is the achieved distractor ratio (added negatives per
    unique evidence document); ``ratio_warning`` is set when assembly
    could not reach the requested ratio.
    """

    documents: list[Document] = field(default_factory=list)
    groups: list[DocumentGroup] = field(default_factory=list)
    noise_ratio: Fraction = Fraction(0)
    ratio_warning: bool = False
    chunks: list[Chunk] = field(default_factory=list)

    def __post_init__(self):
        seen = set()
        for doc in self.documents:
            if doc.id in seen:
                raise CorpusError(f"duplicate document id {doc.id!r}")
            seen.add(doc.id)

    def document(self, doc_id: str) -> Document:
        for doc in self.documents:
            if doc.id == doc_id:
                return doc
        raise CorpusError(f"unknown document id {doc_id!r}")

    def chunks_of(self, doc_id: str) -> list[Chunk]:
        return [c for c in self.chunks if c.doc_id == doc_id]

    def chunk_by_key(self, key: tuple[str, int]) -> Chunk:
        for c in self.chunks:
            if c.key == tuple(key):
                return c
        raise CorpusError(f"unknown chunk reference {key!r}")

    def apply_chunking(self, window_words: int | None = None, overlap_words: int = 0) -> None:
        """Chunk every document; ``window_words=None`` keeps each document whole."""
        chunks: list[Chunk] = []
        for doc in self.documents:
            if window_words is None:
                words = doc.words
                chunks.append(Chunk(doc.id, 0, " ".join(words), (0, len(words))))
            else:
                chunks.extend(chunk_document(doc, window_words, overlap_words))
        self.chunks = chunks

    def validate_groups(self) -> None:
        keys = {c.key for c in self.chunks}
        for group in self.groups:
            for ref in group.member_chunks:
                if tuple(ref) not in keys:
                    raise CorpusError(f"group {group.id!r} references unknown chunk {ref!r}")


def normalize_document(doc_id: str, text: str, polarity: str = EVIDENCE,
                       question_ids: Iterable[str] = ()) -> Document:
    """Build a Document with whitespace-normalized text.

    Tokenizes on Unicode whitespace and rejoins with single spaces;
    documents with zero words are rejected.
    """
    words = text.split()
    if not words:
        raise CorpusError(f"document {doc_id!r} has zero words after normalization")
    return Document(doc_id, " ".join(words), polarity, frozenset(question_ids))


def chunk_document(doc: Document, window_words: int, overlap_words: int) -> list[Chunk]:
    """Slide a fixed word window over the document.

    Chunk k covers words [k*stride, min(k*stride + window, total)) where
    stride = window - overlap; the final chunk is the first one whose
    window reaches the end of the document.
    """
    if window_words <= 0:
        raise CorpusError("window_words must be positive")
    if overlap_words < 0:
        raise CorpusError("overlap_words must be nonnegative")
    if overlap_words >= window_words:
        raise CorpusError(
            f"overlap_words ({overlap_words}) must be smaller than window_words ({window_words})"
        )
    words = doc.words
    total = len(words)
    stride = window_words - overlap_words
    chunks = []
    k = 0
    while True:
        start = k * stride
        end = min(start + window_words, total)
        chunks.append(Chunk(doc.id, k, " ".join(words[start:end]), (start, end)))
        if start + window_words >= total:
            break
        k += 1
    return chunks


def expected_chunk_count(total_words: int, window_words: int, overlap_words: int) -> int:
    """Closed-form chunk count for a document of ``total_words`` words."""
    if total_words <= window_words:
        return 1
    stride = window_words - overlap_words
    return 1 + math.ceil((total_words - window_words) / stride)


def build_groups(corpus: Corpus, grouping: str,
                 annotation: dict[str, Sequence[str]] | None = None) -> list[DocumentGroup]:
    """Form document groups per document or per annotated question.

    ``per_document`` emits one group per multi-chunk document;
    ``per_question`` needs ``annotation`` mapping question id -> document
    ids and emits one group per question covering all chunks of those
    documents.
    """
    if grouping == "per_document":
        groups = []
        for doc in corpus.documents:
            members = tuple(c.key for c in corpus.chunks_of(doc.id))
            if len(members) >= 2:
                groups.append(DocumentGroup(f"doc:{doc.id}", members))
        return groups
    if grouping == "per_question":
        if annotation is None:
            raise CorpusError("per_question grouping requires an annotation table")
        known = {doc.id for doc in corpus.documents}
        groups = []
        for qid in sorted(annotation):
            members: list[tuple[str, int]] = []
            for doc_id in annotation[qid]:
                if doc_id not in known:
                    raise CorpusError(f"annotation for question {qid!r} references unknown document {doc_id!r}")
                members.extend(c.key for c in corpus.chunks_of(doc_id))
            if members:
                groups.append(DocumentGroup(f"q:{qid}", tuple(members)))
        return groups
    raise CorpusError(f"unknown grouping {grouping!r}")


def assemble_noise_corpus(evidence: Sequence[Document], negatives: Sequence[Document],
                          ratio: Fraction | int, per_question_cap: int) -> Corpus:
    """Combine evidence documents with distractors at a target ratio.

    Adds negatives until the total added equals ratio * |unique evidence|,
    taking at most ``per_question_cap`` per question, deduplicating by
    document id. Negatives are consumed in ascending (question id,
    document id) order so assembly is deterministic. A shortfall sets
    ``ratio_warning`` and records the achieved ratio.
    """
    ratio = Fraction(ratio)
    if ratio < 0:
        raise CorpusError("ratio must be nonnegative")
    if per_question_cap <= 0:
        raise CorpusError("per_question_cap must be positive")
    for doc in evidence:
        if doc.polarity != EVIDENCE:
            raise CorpusError(f"document {doc.id!r} in evidence list has polarity {doc.polarity!r}")
    for doc in negatives:
        if doc.polarity != NEGATIVE:
            raise CorpusError(f"document {doc.id!r} in negatives list has polarity {doc.polarity!r}")

    unique_evidence: dict[str, Document] = {}
    for doc in evidence:
        unique_evidence.setdefault(doc.id, doc)
    target = int(ratio * len(unique_evidence))

    by_question: dict[str, list[Document]] = {}
    negative_by_id: dict[str, Document] = {}
    for doc in negatives:
        negative_by_id.setdefault(doc.id, doc)
        for qid in doc.source_question_ids:
            by_question.setdefault(qid, []).append(doc)

    selected: dict[str, Document] = {}
    taken_per_question: dict[str, int] = {}
    for qid in sorted(by_question):
        for doc in sorted(by_question[qid], key=lambda d: d.id):
            if len(selected) >= target:
                break
            if doc.id in selected or doc.id in unique_evidence:
                continue
            if taken_per_question.get(qid, 0) >= per_question_cap:
                break
            selected[doc.id] = doc
            taken_per_question[qid] = taken_per_question.get(qid, 0) + 1
        if len(selected) >= target:
            break

    achieved = Fraction(len(selected), len(unique_evidence)) if unique_evidence else Fraction(0)
    documents = list(unique_evidence.values()) + sorted(selected.values(), key=lambda d: d.id)
    return Corpus(
        documents=documents,
        noise_ratio=achieved,
        ratio_warning=len(selected) < target,
    )


def _percentile_nearest_rank(sorted_values: Sequence[float], pct: float) -> float:
    """Nearest-rank percentile: the value at 1-based index ceil(pct/100 * n)."""
    n = len(sorted_values)
    rank = max(1, math.ceil(pct / 100.0 * n))
    return sorted_values[rank - 1]


def _summary(values: Sequence[float]) -> dict:
    vals = sorted(values)
    n = len(vals)
    if n == 0:
        return {"count": 0, "min": None, "median": None, "mean": None, "p95": None, "max": None}
    mid = n // 2
    median = vals[mid] if n % 2 else (vals[mid - 1] + vals[mid]) / 2
    return {
        "count": n,
        "min": vals[0],
        "median": median,
        "mean": sum(vals) / n,
        "p95": _percentile_nearest_rank(vals, 95),
        "max": vals[-1],
    }


def _bucketize(values: Sequence[float], boundaries: Sequence[int]) -> dict[str, int]:
    labels = []
    lo = 0
    for hi in boundaries:
        labels.append((f"{lo}-{hi}", lo, hi))
        lo = hi + 1
    histogram = {label: 0 for label, _, _ in labels}
    histogram[f">{boundaries[-1]}"] = 0
    for v in values:
        for label, lo, hi in labels:
            if lo <= v <= hi:
                histogram[label] += 1
                break
        else:
            histogram[f">{boundaries[-1]}"] += 1
    return histogram


def corpus_stats(corpus: Corpus, length_fn: Callable[[str], int] | None = None) -> dict:
    """Chunk-length and group-size distributions with summary statistics.

    ``length_fn`` defaults to whitespace word count; plug in a tokenizer
    to report token lengths instead.
    """
    if length_fn is None:
        length_fn = lambda text: len(text.split())
    chunk_lengths = [length_fn(c.text) for c in corpus.chunks]
    group_sizes = [len(g.member_chunks) for g in corpus.groups]
    return {
        "chunks": {
            "histogram": _bucketize(chunk_lengths, LENGTH_BUCKETS),
            **_summary(chunk_lengths),
        },
        "groups": {
            "histogram": _bucketize(group_sizes, GROUP_SIZE_BUCKETS),
            **_summary(group_sizes),
        },
        "documents": len(corpus.documents),
        "noise_ratio": str(corpus.noise_ratio),
        "ratio_warning": corpus.ratio_warning,
    }


def load_corpus_jsonl(path: str) -> Corpus:
    """Read a corpus from JSONL lines {"id","text","polarity","question_ids"}."""
    documents = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{path}:{line_no}: invalid JSON: {exc}") from exc
            documents.append(normalize_document(
                row["id"], row["text"],
                row.get("polarity", EVIDENCE),
                row.get("question_ids", ()),
            ))
    return Corpus(documents=documents)


def save_corpus_jsonl(corpus: Corpus, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for doc in corpus.documents:
            fh.write(json.dumps({
                "id": doc.id,
                "text": doc.text,
                "polarity": doc.polarity,
                "question_ids": sorted(doc.source_question_ids),
            }, ensure_ascii=False) + "\n")


def load_annotation_jsonl(path: str) -> dict[str, dict[str, list[str]]]:
    """Read annotation rows {"question_id","evidence_doc_ids","negative_doc_ids"}."""
    table: dict[str, dict[str, list[str]]] = {}
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{path}:{line_no}: invalid JSON: {exc}") from exc
            table[row["question_id"]] = {
                "evidence_doc_ids": list(row.get("evidence_doc_ids", [])),
                "negative_doc_ids": list(row.get("negative_doc_ids", [])),
            }
    return table


def annotation_to_groups_table(table: dict[str, dict[str, list[str]]]) -> dict[str, list[str]]:
    """Flatten an annotation table to question id -> all annotated doc ids."""
    return {
        qid: list(entry["evidence_doc_ids"]) + list(entry["negative_doc_ids"])
        for qid, entry in table.items()
    }
