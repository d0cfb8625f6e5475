"""Three-stage inference protocol between an executive and a memory model.

Stage 1 (grounding) decomposes the query into sub-questions answered
independently by the memory model. Stage 2 (entity identification)
iteratively narrows executive-ranked candidate entities, with a running
tally of unanswerable-response streaks injected into each decision
prompt. Stage 3 (answer seeking) gathers targeted facts about the
working entity, with sufficiency and pivot escapes. A final low-
temperature synthesis call produces the answer from everything gathered.

Stage decisions are strict JSON; a decision that stays unparseable
after two retries forfeits its round against the stage budget rather
than aborting the run. Single-turn and unstructured multi-turn
baselines share the same transcript machinery.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

from .gateway import CompletionRequest

DECOMPOSITION_CAP = 12
PARSE_RETRIES = 2

STAGE_GROUNDING = "grounding"
STAGE_ENTITY = "entity_identification"
STAGE_SEEKING = "answer_seeking"
STAGE_DONE = "done"


class ProtocolError(RuntimeError):
    """Unrecoverable protocol failure; carries the transcript so far."""

    def __init__(self, message: str, transcript=None):
        super().__init__(message)
        self.transcript = list(transcript or [])


class ParseError(ValueError):
    """Executive output does not satisfy the decision schema."""


@dataclass(frozen=True)
class StageBudgets:
    grounding: int = 1
    entity_identification: int = 7
    answer_seeking: int = 8

    def __post_init__(self):
        for name in ("grounding", "entity_identification", "answer_seeking"):
            if getattr(self, name) < 1:
                raise ValueError(f"budget {name} must be positive")


@dataclass(frozen=True)
class StageTemperatures:
    grounding_executive: float = 0.4
    grounding_memory: float = 0.1
    entity_executive: float = 0.4
    entity_memory: float = 0.1
    seeking_executive: float = 1.0
    seeking_memory: float = 0.3
    synthesis_executive: float = 0.3

    def __post_init__(self):
        for name in self.__dataclass_fields__:
            value = getattr(self, name)
            if not 0.0 <= value <= 2.0:
                raise ValueError(f"temperature {name}={value} outside [0, 2]")


@dataclass(frozen=True)
class OutputCaps:
    memory: int = 512
    executive: int = 1024
    synthesis: int = 2048


@dataclass(frozen=True)
class UncertaintyDetector:
    """A memory response counts as uncertain if empty or containing a pattern."""

    patterns: tuple[str, ...] = ("i don't know", "not sure", "no information")

    def matches(self, text: str) -> bool:
        if not text.strip():
            return True
        lowered = text.lower()
        return any(p in lowered for p in self.patterns)


DEFAULT_BUDGETS = StageBudgets()
DEFAULT_TEMPS = StageTemperatures()
DEFAULT_CAPS = OutputCaps()
DEFAULT_DETECTOR = UncertaintyDetector()


@dataclass
class CandidateEntity:
    name: str
    rank: int
    uncertain_streak: int = 0
    production_order: int = 0


@dataclass
class TranscriptEntry:
    stage: str
    role: str  # executive | memory
    tag: str
    request: str
    response: str
    calls_used: dict
    event: str | None = None

    def to_json(self) -> str:
        obj = {
            "stage": self.stage,
            "role": self.role,
            "tag": self.tag,
            "request": self.request,
            "response": self.response,
            "calls_used": self.calls_used,
        }
        if self.event is not None:
            obj["event"] = self.event
        return json.dumps(obj, ensure_ascii=False, sort_keys=True)


def transcript_lines(transcript: Sequence[TranscriptEntry]) -> list[str]:
    return [entry.to_json() for entry in transcript]


def save_transcript_jsonl(transcript: Sequence[TranscriptEntry], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for line in transcript_lines(transcript):
            fh.write(line + "\n")


@dataclass
class ProtocolState:
    query: str
    tag_prefix: str = ""
    stage: str = STAGE_GROUNDING
    grounding_responses: list = field(default_factory=list)  # (sub_question, answer)
    candidates: list = field(default_factory=list)  # CandidateEntity, production order
    confirmed_entity: tuple | None = None  # (name, confirmed: bool)
    skip_answer_seeking: bool = False
    entity_queries: list = field(default_factory=list)  # (sub_query, answer)
    known_facts: list = field(default_factory=list)  # (entity, question, answer)
    calls_used: dict = field(default_factory=lambda: {
        STAGE_GROUNDING: 0, STAGE_ENTITY: 0, STAGE_SEEKING: 0})
    transcript: list = field(default_factory=list)
    events: list = field(default_factory=list)  # (stage, kind, detail)
    _production_counter: int = 0

    def next_production_order(self) -> int:
        self._production_counter += 1
        return self._production_counter

    def find_candidate(self, name: str) -> CandidateEntity | None:
        for candidate in self.candidates:
            if candidate.name == name:
                return candidate
        return None

    def log_event(self, kind: str, detail: str = ""):
        self.events.append((self.stage, kind, detail))
        if self.transcript:
            self.transcript[-1].event = kind


def _strip_fences(text: str) -> str:
    body = text.strip()
    if body.startswith("```"):
        first_newline = body.find("\n")
        if first_newline != -1 and body.endswith("```"):
            body = body[first_newline + 1:-3].strip()
    return body


def _parse_json_value(text: str):
    try:
        return json.loads(_strip_fences(text))
    except ValueError as exc:
        raise ParseError(f"not valid JSON: {exc}") from exc


def _exec_call(state: ProtocolState, backend, prompt: str, tag: str,
               temperature: float, max_tokens: int, stage: str):
    response = backend.complete(CompletionRequest(
        messages=(("user", prompt),), temperature=temperature,
        max_output_tokens=max_tokens, tag=tag))
    entry = TranscriptEntry(stage=stage, role="executive", tag=tag, request=prompt,
                            response=response.content, calls_used=dict(state.calls_used))
    if not response.ok:
        entry.event = "executive_error"
    state.transcript.append(entry)
    return response


def _memory_call(state: ProtocolState, backend, question: str, tag: str,
                 temperature: float, caps: OutputCaps, stage: str) -> str:
    response = backend.complete(CompletionRequest(
        messages=(("user", question),), temperature=temperature,
        max_output_tokens=caps.memory, tag=tag))
    entry = TranscriptEntry(stage=stage, role="memory", tag=tag, request=question,
                            response=response.content, calls_used=dict(state.calls_used))
    if not response.ok:
        # A memory-side fault degrades to an empty (uncertain) answer.
        entry.event = "memory_error"
        state.transcript.append(entry)
        return ""
    state.transcript.append(entry)
    return response.content


def _executive_parsed(state: ProtocolState, backend, prompt: str, tag: str,
                      temperature: float, max_tokens: int, stage: str, validate):
    """Decision call with parse retries; None when the round is unusable."""
    current = prompt
    for attempt in range(PARSE_RETRIES + 1):
        response = _exec_call(state, backend, current, tag, temperature, max_tokens, stage)
        if not response.ok:
            return None
        try:
            return validate(_parse_json_value(response.content))
        except ParseError as exc:
            if attempt < PARSE_RETRIES:
                current = (prompt + f"\n\nYour previous reply was not valid: {exc}\n"
                           "Reply again with only the JSON described above.")
    return None


def _validate_subquestions(value) -> list[str]:
    if not isinstance(value, list) or not value:
        raise ParseError("expected a non-empty JSON array of sub-questions")
    out = []
    for item in value:
        if not isinstance(item, str) or not item.strip():
            raise ParseError("sub-questions must be non-empty strings")
        out.append(item)
    return out


def _validate_candidates_field(value) -> list[dict]:
    if value is None:
        return []
    if not isinstance(value, list):
        raise ParseError("candidates must be an array")
    out = []
    for item in value:
        if not isinstance(item, dict):
            raise ParseError("candidates entries must be objects")
        name = item.get("name")
        rank = item.get("rank")
        if not isinstance(name, str) or not name.strip():
            raise ParseError("candidate name must be a non-empty string")
        if not isinstance(rank, int) or rank < 1:
            raise ParseError("candidate rank must be a positive integer")
        out.append({"name": name, "rank": rank})
    return out


def _validate_stage2_decision(value) -> dict:
    if not isinstance(value, dict):
        raise ParseError("expected a JSON object")
    action = value.get("action")
    if action not in ("confirm", "ask", "no_candidates"):
        raise ParseError("action must be confirm, ask, or no_candidates")
    payload = value.get("payload", "")
    if action in ("confirm", "ask"):
        if not isinstance(payload, str) or not payload.strip():
            raise ParseError(f"action {action!r} requires a non-empty payload")
    about = value.get("about")
    if about is not None and (not isinstance(about, str) or not about.strip()):
        raise ParseError("about must be a non-empty string when present")
    return {"action": action, "payload": payload if isinstance(payload, str) else "",
            "about": about, "candidates": _validate_candidates_field(value.get("candidates"))}


def _validate_stage3_decision(value) -> dict:
    if not isinstance(value, dict):
        raise ParseError("expected a JSON object")
    action = value.get("action")
    if action not in ("ask", "sufficient", "pivot"):
        raise ParseError("action must be ask, sufficient, or pivot")
    payload = value.get("payload", "")
    if action in ("ask", "pivot"):
        if not isinstance(payload, str) or not payload.strip():
            raise ParseError(f"action {action!r} requires a non-empty payload")
    return {"action": action, "payload": payload if isinstance(payload, str) else ""}


def _grounding_block(state: ProtocolState) -> str:
    if not state.grounding_responses:
        return "(none)"
    return "\n".join(f"- Q: {q}\n  A: {a}" for q, a in state.grounding_responses)


def _stage1_prompt(query: str) -> str:
    return (
        "Decompose the question below into atomic, clue-probing sub-questions "
        "that a memory assistant can answer independently, without shared "
        "context. Emit between 1 and 12 sub-questions.\n\n"
        f"Question: {query}\n\n"
        'Reply with only a JSON array of strings.'
    )


def _stage2_prompt(state: ProtocolState) -> str:
    if state.candidates:
        table = "\n".join(
            f"- {c.name} (rank {c.rank}, unanswerable streak {c.uncertain_streak})"
            for c in state.candidates)
    else:
        table = "(none yet)"
    history = "\n".join(f"- Q: {q}\n  A: {a}" for q, a in state.entity_queries) or "(none)"
    return (
        "You are identifying which entity a question is about by querying a "
        "memory assistant.\n\n"
        f"Question: {state.query}\n\n"
        f"Grounding answers:\n{_grounding_block(state)}\n\n"
        f"Candidate entities (rank 1 = best):\n{table}\n\n"
        f"Sub-queries issued this stage:\n{history}\n\n"
        "Decide your next move. Reply with only a JSON object:\n"
        '{"action": "confirm" | "ask" | "no_candidates", "payload": str, '
        '"about": str, "candidates": [{"name": str, "rank": int}, ...]}\n'
        '- "confirm": payload names the entity the question is about.\n'
        '- "ask": payload is one targeted sub-query; set "about" to the '
        "candidate it probes when applicable.\n"
        '- "no_candidates": no viable candidate exists.\n'
        'Always restate your full current ranking in "candidates".'
    )


def _stage3_prompt(state: ProtocolState) -> str:
    name, confirmed = state.confirmed_entity
    facts = "\n".join(f"- [{e}] Q: {q}\n  A: {a}" for e, q, a in state.known_facts) or "(none)"
    return (
        "You are gathering supporting facts to answer a question.\n\n"
        f"Question: {state.query}\n\n"
        f"Working entity: {name} ({'confirmed' if confirmed else 'unconfirmed'})\n\n"
        f"Grounding answers:\n{_grounding_block(state)}\n\n"
        f"Facts gathered:\n{facts}\n\n"
        "Decide your next move. Reply with only a JSON object:\n"
        '{"action": "ask" | "sufficient" | "pivot", "payload": str}\n'
        '- "ask": payload is one follow-up question about the working entity.\n'
        '- "sufficient": enough facts are gathered.\n'
        '- "pivot": payload names the entity the question is actually about.'
    )


def _synthesis_prompt(state: ProtocolState) -> str:
    sections = [f"Question: {state.query}",
                f"Grounding answers:\n{_grounding_block(state)}"]
    if state.confirmed_entity is not None:
        name, confirmed = state.confirmed_entity
        label = "Confirmed entity" if confirmed else "Best-guess entity (unconfirmed)"
        sections.append(f"{label}: {name}")
    if state.known_facts:
        facts = "\n".join(f"- [{e}] Q: {q}\n  A: {a}" for e, q, a in state.known_facts)
        sections.append(f"Facts gathered:\n{facts}")
    body = "\n\n".join(sections)
    return ("Answer the question using the information gathered below. "
            "Give the final answer directly.\n\n" + body)


def stage1_grounding(state: ProtocolState, executive, memory,
                     temps: StageTemperatures = DEFAULT_TEMPS,
                     caps: OutputCaps = DEFAULT_CAPS,
                     budgets: StageBudgets = DEFAULT_BUDGETS) -> ProtocolState:
    """One decomposition call, then one memory call per sub-question.

    The stage budget counts the decomposition interaction only; the J
    memory answers it fans out to are not budget-counted.
    """
    if state.stage != STAGE_GROUNDING:
        raise ProtocolError(f"stage1 called in stage {state.stage}", state.transcript)
    if state.calls_used[STAGE_GROUNDING] >= budgets.grounding:
        raise ProtocolError("grounding budget exhausted", state.transcript)
    tag = f"{state.tag_prefix}stage1:executive"
    sub_questions = _executive_parsed(
        state, executive, _stage1_prompt(state.query), tag,
        temps.grounding_executive, caps.executive, STAGE_GROUNDING,
        _validate_subquestions)
    state.calls_used[STAGE_GROUNDING] += 1
    if sub_questions is None:
        sub_questions = [state.query]
        state.log_event("fallback_decomposition", "using the query as the sole sub-question")
    if len(sub_questions) > DECOMPOSITION_CAP:
        sub_questions = sub_questions[:DECOMPOSITION_CAP]
        state.log_event("decomposition_truncated", f"capped at {DECOMPOSITION_CAP}")
    memory_tag = f"{state.tag_prefix}stage1:memory"
    for sub_question in sub_questions:
        answer = _memory_call(state, memory, sub_question, memory_tag,
                              temps.grounding_memory, caps, STAGE_GROUNDING)
        state.grounding_responses.append((sub_question, answer))
    state.stage = STAGE_ENTITY
    return state


def update_streaks(state: ProtocolState, memory_response: str, asked_about: str,
                   detector: UncertaintyDetector = DEFAULT_DETECTOR) -> ProtocolState:
    """Tally unanswerable responses per candidate; substantive answers reset."""
    candidate = state.find_candidate(asked_about)
    if candidate is None:
        rank = max((c.rank for c in state.candidates), default=0) + 1
        candidate = CandidateEntity(asked_about, rank,
                                    production_order=state.next_production_order())
        state.candidates.append(candidate)
    if detector.matches(memory_response):
        candidate.uncertain_streak += 1
    else:
        candidate.uncertain_streak = 0
    return state


def select_best_candidate(candidates: Sequence[CandidateEntity]) -> CandidateEntity:
    """Minimal rank wins; rank ties go to the earliest-produced candidate."""
    if not candidates:
        raise ValueError("select_best_candidate requires a non-empty candidate list")
    return min(candidates, key=lambda c: (c.rank, c.production_order))


def _merge_candidates(state: ProtocolState, listed: list[dict]):
    for item in listed:
        candidate = state.find_candidate(item["name"])
        if candidate is None:
            state.candidates.append(CandidateEntity(
                item["name"], item["rank"],
                production_order=state.next_production_order()))
        else:
            candidate.rank = item["rank"]


def stage2_entity_identification(state: ProtocolState, executive, memory,
                                 budgets: StageBudgets = DEFAULT_BUDGETS,
                                 temps: StageTemperatures = DEFAULT_TEMPS,
                                 caps: OutputCaps = DEFAULT_CAPS,
                                 detector: UncertaintyDetector = DEFAULT_DETECTOR) -> ProtocolState:
    """Iteratively narrow candidate entities within the stage budget.

    Each round consumes one budget unit whatever happens in it: confirm,
    ask, a no-candidates declaration, or a forfeited unparseable round.
    """
    if state.stage != STAGE_ENTITY:
        raise ProtocolError(f"stage2 called in stage {state.stage}", state.transcript)
    tag = f"{state.tag_prefix}stage2:executive"
    memory_tag = f"{state.tag_prefix}stage2:memory"
    declared_no_candidates = False
    while state.calls_used[STAGE_ENTITY] < budgets.entity_identification:
        decision = _executive_parsed(
            state, executive, _stage2_prompt(state), tag,
            temps.entity_executive, caps.executive, STAGE_ENTITY,
            _validate_stage2_decision)
        state.calls_used[STAGE_ENTITY] += 1
        state.transcript[-1].calls_used = dict(state.calls_used)
        if decision is None:
            state.log_event("parse_forfeit", "round forfeited")
            continue
        _merge_candidates(state, decision["candidates"])
        if decision["action"] == "confirm":
            state.confirmed_entity = (decision["payload"], True)
            break
        if decision["action"] == "no_candidates":
            declared_no_candidates = True
            break
        answer = _memory_call(state, memory, decision["payload"], memory_tag,
                              temps.entity_memory, caps, STAGE_ENTITY)
        state.entity_queries.append((decision["payload"], answer))
        if decision["about"]:
            update_streaks(state, answer, decision["about"], detector)
    if state.confirmed_entity is None:
        if state.candidates:
            best = select_best_candidate(state.candidates)
            state.confirmed_entity = (best.name, False)
            state.log_event("best_candidate_selected", best.name)
        else:
            state.skip_answer_seeking = True
            state.log_event("no_candidates" if declared_no_candidates else "no_candidates_exhausted",
                            "grounding-only synthesis")
    state.stage = STAGE_DONE if state.skip_answer_seeking else STAGE_SEEKING
    return state


def pivot_entity(state: ProtocolState, new_entity: str) -> ProtocolState:
    """Replace the working entity mid-stage-3, always marked unconfirmed."""
    if state.stage != STAGE_SEEKING:
        raise ProtocolError(f"pivot outside answer seeking (stage {state.stage})",
                            state.transcript)
    current = state.confirmed_entity[0] if state.confirmed_entity else None
    degenerate = new_entity == current
    state.confirmed_entity = (new_entity, False)
    if state.find_candidate(new_entity) is None:
        rank = max((c.rank for c in state.candidates), default=0) + 1
        state.candidates.append(CandidateEntity(
            new_entity, rank, production_order=state.next_production_order()))
    state.log_event("degenerate_pivot" if degenerate else "pivot",
                    f"{current} -> {new_entity}")
    return state


def stage3_answer_seeking(state: ProtocolState, executive, memory,
                          budgets: StageBudgets = DEFAULT_BUDGETS,
                          temps: StageTemperatures = DEFAULT_TEMPS,
                          caps: OutputCaps = DEFAULT_CAPS) -> ProtocolState:
    """Gather targeted facts about the working entity within the stage budget."""
    if state.skip_answer_seeking:
        return state
    if state.stage != STAGE_SEEKING:
        raise ProtocolError(f"stage3 called in stage {state.stage}", state.transcript)
    if state.confirmed_entity is None:
        raise ProtocolError("stage3 requires a working entity", state.transcript)
    tag = f"{state.tag_prefix}stage3:executive"
    memory_tag = f"{state.tag_prefix}stage3:memory"
    while state.calls_used[STAGE_SEEKING] < budgets.answer_seeking:
        decision = _executive_parsed(
            state, executive, _stage3_prompt(state), tag,
            temps.seeking_executive, caps.executive, STAGE_SEEKING,
            _validate_stage3_decision)
        state.calls_used[STAGE_SEEKING] += 1
        state.transcript[-1].calls_used = dict(state.calls_used)
        if decision is None:
            state.log_event("parse_forfeit", "round forfeited")
            continue
        if decision["action"] == "sufficient":
            state.log_event("sufficient", "")
            break
        if decision["action"] == "pivot":
            pivot_entity(state, decision["payload"])
            continue
        answer = _memory_call(state, memory, decision["payload"], memory_tag,
                              temps.seeking_memory, caps, STAGE_SEEKING)
        state.known_facts.append((state.confirmed_entity[0], decision["payload"], answer))
    state.stage = STAGE_DONE
    return state


def synthesize_final(state: ProtocolState, executive,
                     temps: StageTemperatures = DEFAULT_TEMPS,
                     caps: OutputCaps = DEFAULT_CAPS) -> tuple[str, list[TranscriptEntry]]:
    """One low-temperature synthesis call; always yields an answer or raises
    with the transcript attached so no gathered work is lost."""
    if state.stage != STAGE_DONE and not state.skip_answer_seeking:
        raise ProtocolError(f"synthesis called in stage {state.stage}", state.transcript)
    tag = f"{state.tag_prefix}synthesis:executive"
    response = _exec_call(state, executive, _synthesis_prompt(state), tag,
                          temps.synthesis_executive, caps.synthesis, STAGE_DONE)
    if not response.ok:
        raise ProtocolError(f"final synthesis failed: {response.error}", state.transcript)
    return response.content, state.transcript


def run_protocol(query: str, executive, memory,
                 budgets: StageBudgets = DEFAULT_BUDGETS,
                 temps: StageTemperatures = DEFAULT_TEMPS,
                 caps: OutputCaps = DEFAULT_CAPS,
                 detector: UncertaintyDetector = DEFAULT_DETECTOR,
                 tag_prefix: str = "") -> tuple[str, list[TranscriptEntry]]:
    """Compose stages 1-3 and final synthesis for one query."""
    state = ProtocolState(query=query, tag_prefix=tag_prefix)
    stage1_grounding(state, executive, memory, temps, caps, budgets)
    stage2_entity_identification(state, executive, memory, budgets, temps, caps, detector)
    stage3_answer_seeking(state, executive, memory, budgets, temps, caps)
    return synthesize_final(state, executive, temps, caps)


def _validate_single_decision(value) -> dict:
    if not isinstance(value, dict):
        raise ParseError("expected a JSON object")
    retrieve = value.get("retrieve")
    if not isinstance(retrieve, bool):
        raise ParseError("retrieve must be a boolean")
    sub_questions = value.get("sub_questions", [])
    if retrieve:
        sub_questions = _validate_subquestions(sub_questions)
    return {"retrieve": retrieve, "sub_questions": sub_questions}


def _single_turn_prompt(query: str) -> str:
    return (
        "Decide whether answering the question below requires consulting an "
        "external memory assistant. If it does, decompose it into every "
        "sub-question you will need, all at once; you will not get a second "
        "chance to ask.\n\n"
        f"Question: {query}\n\n"
        'Reply with only a JSON object: {"retrieve": bool, "sub_questions": [str, ...]}.'
    )


def _qa_block(pairs: Sequence[tuple[str, str]]) -> str:
    if not pairs:
        return "(none)"
    return "\n".join(f"- Q: {q}\n  A: {a}" for q, a in pairs)


def run_single_turn(query: str, executive, memory,
                    temps: StageTemperatures = DEFAULT_TEMPS,
                    caps: OutputCaps = DEFAULT_CAPS,
                    detector: UncertaintyDetector = DEFAULT_DETECTOR,
                    tag_prefix: str = "") -> tuple[str, list[TranscriptEntry]]:
    """One decomposition committed up front, uncertain answers discarded,
    one synthesis call."""
    state = ProtocolState(query=query, tag_prefix=tag_prefix, stage="single_turn")
    tag = f"{tag_prefix}single:executive"
    decision = _executive_parsed(
        state, executive, _single_turn_prompt(query), tag,
        temps.grounding_executive, caps.executive, "single_turn",
        _validate_single_decision)
    if decision is None:
        decision = {"retrieve": True, "sub_questions": [query]}
        state.log_event("fallback_decomposition", "using the query as the sole sub-question")
    kept: list[tuple[str, str]] = []
    if decision["retrieve"]:
        sub_questions = decision["sub_questions"][:DECOMPOSITION_CAP]
        memory_tag = f"{tag_prefix}single:memory"
        for sub_question in sub_questions:
            answer = _memory_call(state, memory, sub_question, memory_tag,
                                  temps.grounding_memory, caps, "single_turn")
            if detector.matches(answer):
                state.transcript[-1].event = "discarded_uncertain"
            else:
                kept.append((sub_question, answer))
    prompt = ("Answer the question using the memory answers below (already "
              "filtered for confidence). Give the final answer directly.\n\n"
              f"Question: {query}\n\n"
              f"Memory answers:\n{_qa_block(kept)}")
    response = _exec_call(state, executive, prompt, f"{tag_prefix}single:synthesis",
                          temps.synthesis_executive, caps.synthesis, "single_turn")
    if not response.ok:
        raise ProtocolError(f"final synthesis failed: {response.error}", state.transcript)
    return response.content, state.transcript


def _validate_multi_decision(value) -> dict:
    if not isinstance(value, dict):
        raise ParseError("expected a JSON object")
    action = value.get("action")
    if action not in ("ask", "synthesize"):
        raise ParseError("action must be ask or synthesize")
    sub_questions = value.get("sub_questions", [])
    if action == "ask":
        sub_questions = _validate_subquestions(sub_questions)
    return {"action": action, "sub_questions": sub_questions}


def _multi_turn_prompt(query: str, history: Sequence[tuple[str, str]],
                       round_index: int, turns: int) -> str:
    return (
        "You are answering a question by querying a memory assistant over "
        f"multiple rounds (round {round_index} of at most {turns}).\n\n"
        f"Question: {query}\n\n"
        f"Answers gathered so far:\n{_qa_block(history)}\n\n"
        "If sufficient information has been gathered, stop; otherwise ask a "
        "new batch of sub-questions.\n"
        'Reply with only a JSON object: {"action": "synthesize" | "ask", '
        '"sub_questions": [str, ...]}.'
    )


def run_unstructured(query: str, executive, memory, turns: int,
                     temps: StageTemperatures = DEFAULT_TEMPS,
                     caps: OutputCaps = DEFAULT_CAPS,
                     tag_prefix: str = "") -> tuple[str, list[TranscriptEntry]]:
    """Free-form multi-turn baseline: up to `turns` rounds, each either a new
    batch of sub-questions or a stop, then forced synthesis."""
    if turns < 1:
        raise ValueError("turns must be >= 1")
    state = ProtocolState(query=query, tag_prefix=tag_prefix, stage="unstructured")
    tag = f"{tag_prefix}multi:executive"
    memory_tag = f"{tag_prefix}multi:memory"
    history: list[tuple[str, str]] = []
    for round_index in range(1, turns + 1):
        decision = _executive_parsed(
            state, executive, _multi_turn_prompt(query, history, round_index, turns),
            tag, temps.seeking_executive, caps.executive, "unstructured",
            _validate_multi_decision)
        if decision is None:
            state.log_event("parse_forfeit", f"round {round_index} forfeited")
            continue
        if decision["action"] == "synthesize":
            break
        for sub_question in decision["sub_questions"][:DECOMPOSITION_CAP]:
            answer = _memory_call(state, memory, sub_question, memory_tag,
                                  temps.seeking_memory, caps, "unstructured")
            history.append((sub_question, answer))
    prompt = ("Answer the question using the answers gathered below. Give the "
              "final answer directly.\n\n"
              f"Question: {query}\n\n"
              f"Answers gathered:\n{_qa_block(history)}")
    response = _exec_call(state, executive, prompt, f"{tag_prefix}multi:synthesis",
                          temps.synthesis_executive, caps.synthesis, "unstructured")
    if not response.ok:
        raise ProtocolError(f"final synthesis failed: {response.error}", state.transcript)
    return response.content, state.transcript


def config_dict(budgets: StageBudgets = DEFAULT_BUDGETS,
                temps: StageTemperatures = DEFAULT_TEMPS,
                caps: OutputCaps = DEFAULT_CAPS,
                detector: UncertaintyDetector = DEFAULT_DETECTOR) -> dict:
    """Machine-readable protocol configuration for provenance records."""
    return {
        "budgets": {
            "grounding": budgets.grounding,
            "entity_identification": budgets.entity_identification,
            "answer_seeking": budgets.answer_seeking,
        },
        "temperatures": {
            "grounding": [temps.grounding_executive, temps.grounding_memory],
            "entity_identification": [temps.entity_executive, temps.entity_memory],
            "answer_seeking": [temps.seeking_executive, temps.seeking_memory],
            "synthesis": temps.synthesis_executive,
        },
        "uncertainty_patterns": list(detector.patterns),
        "caps": {
            "memory": caps.memory,
            "executive": caps.executive,
            "synthesis": caps.synthesis,
            "decomposition": DECOMPOSITION_CAP,
        },
    }
