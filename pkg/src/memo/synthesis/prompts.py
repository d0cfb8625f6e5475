"""Versioned prompt templates for the five synthesis steps.

Every template demands a strict JSON array so generator output is
machine-parseable; parse retries append the schema error to the
original prompt. Templates are versioned as a unit — any wording change
must bump PROMPT_VERSION since it changes provenance hashes.
"""

from __future__ import annotations

from typing import Sequence

PROMPT_VERSION = "1"

_DIRECT = """\
Read the following passage and write question-answer pairs that capture \
facts stated explicitly in it. Each question must be answerable from the \
passage alone and must not use pronouns or phrases like "the passage" or \
"the author". Cover every distinct fact once.

Passage:
{chunk}

Reply with only a JSON array of objects, each {{"question": str, "answer": str}}. \
Reply with [] if the passage states no facts."""

_INDIRECT = """\
Read the following passage and write question-answer pairs about information \
that is implied, inferable, or synthesized from multiple statements in it \
(durations between dated events, totals, comparisons, causal links), but \
never stated in a single sentence. Questions must stand alone without \
referring to the passage.

Passage:
{chunk}

Reply with only a JSON array of objects, each {{"question": str, "answer": str}}. \
Reply with [] if nothing can be inferred."""

_CONSOLIDATE = """\
Below are question-answer pairs extracted from one passage. Identify subsets \
that share a common underlying context (same entity, same time period, \
sequential events) and write NEW multi-fact pairs that combine them. Do not \
repeat or rephrase the input pairs; emit only genuinely combined questions.

Pairs:
{pairs}

Reply with only a JSON array of objects, each {{"question": str, "answer": str}}. \
Reply with [] if no pairs share context."""

_VERIFY = """\
For each numbered question-answer pair below, judge whether the question is \
self-contained: answerable with no unresolved pronouns and no implicit \
reference to an unnamed source. Use the passage only to resolve references; \
a rewrite must not introduce facts absent from the original pair.

Passage:
{chunk}

Pairs:
{pairs}

Reply with only a JSON array with one object per pair: {{"index": int, \
"verdict": "pass" | "rewrite" | "discard", "question": str, "answer": str, \
"reason": str}}. Include "question" and "answer" only for rewrites; include \
"reason" only for discards (use discard when the pair stays ambiguous even \
after rewriting)."""

_ENTITY = """\
Below are verified question-answer pairs from one document. For each named \
entity they mention, aggregate its attributes and relationships across all \
pairs, then write questions that describe the entity through those attributes \
and answer with the entity's identity. Vary complexity from single-fact to \
multi-fact questions.

Pairs:
{pairs}

Reply with only a JSON array of objects, each {{"question": str, "answer": str, \
"entities": [str, ...], "sources": [int, ...]}} where "sources" lists the \
indices of the pairs used. Reply with [] if no named entities appear."""

_CROSS = """\
Below are question-answer pairs drawn from different chunks of related \
documents; each pair is numbered and labeled with its chunk. Write questions \
that can only be answered by combining pairs from at least two different \
chunks, of two kinds: converging clues (complementary facts that together \
identify one entity) and parallel properties (distinct entities sharing an \
attribute or role, enabling comparison).

Pairs:
{pairs}

Reply with only a JSON array of objects, each {{"question": str, "answer": str, \
"sources": [int, ...], "entities": [str, ...]}} where "sources" lists the \
indices of the pairs combined (they must span at least two chunks) and \
"entities" may be empty. Reply with [] if no cross-chunk connection exists."""

RETRY_SUFFIX = """

Your previous reply was not valid: {error}
Reply again with only the JSON array described above."""


def _numbered(pairs: Sequence[tuple[str, str]]) -> str:
    return "\n".join(f"{i}. Q: {q}\n   A: {a}" for i, (q, a) in enumerate(pairs))


def _numbered_with_chunks(pairs: Sequence[tuple[str, str, str]]) -> str:
    return "\n".join(f"{i}. [chunk {c}] Q: {q}\n   A: {a}"
                     for i, (q, a, c) in enumerate(pairs))


def direct_prompt(chunk_text: str) -> str:
    return _DIRECT.format(chunk=chunk_text)


def indirect_prompt(chunk_text: str) -> str:
    return _INDIRECT.format(chunk=chunk_text)


def consolidate_prompt(pairs: Sequence[tuple[str, str]]) -> str:
    return _CONSOLIDATE.format(pairs=_numbered(pairs))


def verify_prompt(pairs: Sequence[tuple[str, str]], chunk_text: str) -> str:
    return _VERIFY.format(chunk=chunk_text, pairs=_numbered(pairs))


def entity_prompt(pairs: Sequence[tuple[str, str]]) -> str:
    return _ENTITY.format(pairs=_numbered(pairs))


def cross_document_prompt(pairs_with_chunks: Sequence[tuple[str, str, str]]) -> str:
    return _CROSS.format(pairs=_numbered_with_chunks(pairs_with_chunks))
