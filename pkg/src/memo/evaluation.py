"""Judge-based evaluation: benchmark loading, answer runners, accuracy reports.

A runner takes one benchmark item and a tag prefix and returns (answer,
transcript). The judge grades each answer against the gold with a
strict-JSON rubric. Items whose judge call fails at the transport level
are excluded from both numerator and denominator; items whose judge
output stays unparseable are counted wrong and flagged. Multi-run
reports carry per-run accuracies with mean and sample standard
deviation.
"""

from __future__ import annotations

import json
import statistics
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

from .corpus import Corpus, CorpusError
from .gateway import CompletionRequest
from .protocol import (
    DEFAULT_BUDGETS,
    DEFAULT_CAPS,
    DEFAULT_DETECTOR,
    DEFAULT_TEMPS,
    OutputCaps,
    StageBudgets,
    StageTemperatures,
    TranscriptEntry,
    UncertaintyDetector,
    run_protocol,
    run_single_turn,
    run_unstructured,
    save_transcript_jsonl,
)

JUDGE_RETRIES = 2


class EvalError(RuntimeError):
    """Item-level or run-level evaluation failure."""


@dataclass(frozen=True)
class EvalItem:
    question_id: str
    question: str
    gold_answer: str
    evidence_doc_ids: frozenset = frozenset()

    def __post_init__(self):
        if not self.question_id:
            raise EvalError("question_id must be non-empty")
        if not self.gold_answer.strip():
            raise EvalError(f"item {self.question_id}: gold answer must be non-empty")
        object.__setattr__(self, "evidence_doc_ids", frozenset(self.evidence_doc_ids))


def load_benchmark_jsonl(path) -> list[EvalItem]:
    items = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            obj = json.loads(line)
            items.append(EvalItem(obj["question_id"], obj["question"],
                                  obj["gold_answer"],
                                  frozenset(obj.get("evidence_doc_ids", []))))
    return items


def _strip_fences(text: str) -> str:
    body = text.strip()
    if body.startswith("```"):
        first_newline = body.find("\n")
        if first_newline != -1 and body.endswith("```"):
            body = body[first_newline + 1:-3].strip()
    return body


_JUDGE_PROMPT = """\
You are grading a proposed answer against a gold reference.

Question: {question}
Gold answer: {gold}
Proposed answer: {predicted}

Grade the proposed answer as correct if it conveys the same factual content \
as the gold answer. Differences in wording, phrasing, or level of detail are \
acceptable; factual deviations, omissions of the asked-for fact, and \
contradictions are not.

Reply with only a JSON object: {{"correct": true}} or {{"correct": false}}."""


@dataclass(frozen=True)
class JudgeVerdict:
    correct: bool | None  # None = unjudged (transport failure)
    flagged: bool = False  # unparseable output defaulted to false, or transport note


def judge(question: str, gold: str, predicted: str, judge_backend,
          tag: str = "judge") -> JudgeVerdict:
    """One rubric call with strict JSON parsing and two parse retries."""
    prompt = _JUDGE_PROMPT.format(question=question, gold=gold, predicted=predicted)
    current = prompt
    for attempt in range(JUDGE_RETRIES + 1):
        response = judge_backend.complete(CompletionRequest(
            messages=(("user", current),), temperature=0.0,
            max_output_tokens=64, tag=tag))
        if not response.ok:
            return JudgeVerdict(correct=None, flagged=True)
        try:
            value = json.loads(_strip_fences(response.content))
            if not isinstance(value, dict) or not isinstance(value.get("correct"), bool):
                raise ValueError('expected {"correct": true|false}')
            return JudgeVerdict(correct=value["correct"], flagged=attempt > 0)
        except ValueError as exc:
            if attempt < JUDGE_RETRIES:
                current = (prompt + f"\n\nYour previous reply was not valid: {exc}\n"
                           "Reply again with only the JSON object.")
    return JudgeVerdict(correct=False, flagged=True)


def run_no_context(item: EvalItem, executive, caps: OutputCaps = DEFAULT_CAPS,
                   temps: StageTemperatures = DEFAULT_TEMPS,
                   tag_prefix: str = "") -> tuple[str, list[TranscriptEntry]]:
    """Parametric-knowledge floor: the bare question, nothing else."""
    tag = f"{tag_prefix}no_context"
    response = executive.complete(CompletionRequest(
        messages=(("user", item.question),), temperature=temps.synthesis_executive,
        max_output_tokens=caps.synthesis, tag=tag))
    entry = TranscriptEntry(stage="no_context", role="executive", tag=tag,
                            request=item.question, response=response.content,
                            calls_used={"executive": 1})
    if not response.ok:
        raise EvalError(f"no-context call failed: {response.error}")
    return response.content, [entry]


def run_perfect_retrieval(item: EvalItem, corpus: Corpus, executive,
                          caps: OutputCaps = DEFAULT_CAPS,
                          temps: StageTemperatures = DEFAULT_TEMPS,
                          max_context_chars: int | None = None,
                          tag_prefix: str = "") -> tuple[str, list[TranscriptEntry]]:
    """Upper bound: exactly the evidence documents in context, ordered by id.

    Context overflow drops whole documents from the end of the id
    ordering rather than cutting one mid-text.
    """
    doc_ids = sorted(item.evidence_doc_ids)
    texts = []
    for doc_id in doc_ids:
        try:
            doc = corpus.document(doc_id)
        except CorpusError as exc:
            raise EvalError(
                f"item {item.question_id}: evidence document {doc_id!r} not in corpus"
            ) from exc
        texts.append(doc.text)

    event = None
    if not doc_ids:
        event = "no_evidence"
        context = ""
    else:
        blocks = [f"Document:\n{text}" for text in texts]
        if max_context_chars is not None:
            kept = []
            used = 0
            for block in blocks:
                if used + len(block) > max_context_chars and kept:
                    break
                kept.append(block)
                used += len(block) + 2
            if len(kept) < len(blocks):
                event = f"context_truncated:{len(blocks) - len(kept)}"
            blocks = kept
        context = "\n\n".join(blocks)

    if context:
        prompt = (f"{context}\n\nAnswer the question using the documents above. "
                  f"Give the final answer directly.\n\nQuestion: {item.question}")
    else:
        prompt = item.question
    tag = f"{tag_prefix}perfect_retrieval"
    response = executive.complete(CompletionRequest(
        messages=(("user", prompt),), temperature=temps.synthesis_executive,
        max_output_tokens=caps.synthesis, tag=tag))
    entry = TranscriptEntry(stage="perfect_retrieval", role="executive", tag=tag,
                            request=prompt, response=response.content,
                            calls_used={"executive": 1}, event=event)
    if not response.ok:
        raise EvalError(f"perfect-retrieval call failed: {response.error}")
    return response.content, [entry]


Runner = Callable[[EvalItem, str], tuple[str, list]]


def make_protocol_runner(executive, memory, budgets: StageBudgets = DEFAULT_BUDGETS,
                         temps: StageTemperatures = DEFAULT_TEMPS,
                         caps: OutputCaps = DEFAULT_CAPS,
                         detector: UncertaintyDetector = DEFAULT_DETECTOR) -> Runner:
    def runner(item: EvalItem, tag_prefix: str):
        return run_protocol(item.question, executive, memory, budgets, temps,
                            caps, detector, tag_prefix=tag_prefix)
    return runner


def make_single_turn_runner(executive, memory, temps: StageTemperatures = DEFAULT_TEMPS,
                            caps: OutputCaps = DEFAULT_CAPS,
                            detector: UncertaintyDetector = DEFAULT_DETECTOR) -> Runner:
    def runner(item: EvalItem, tag_prefix: str):
        return run_single_turn(item.question, executive, memory, temps, caps,
                               detector, tag_prefix=tag_prefix)
    return runner


def make_unstructured_runner(executive, memory, turns: int,
                             temps: StageTemperatures = DEFAULT_TEMPS,
                             caps: OutputCaps = DEFAULT_CAPS) -> Runner:
    def runner(item: EvalItem, tag_prefix: str):
        return run_unstructured(item.question, executive, memory, turns, temps,
                                caps, tag_prefix=tag_prefix)
    return runner


def make_no_context_runner(executive, caps: OutputCaps = DEFAULT_CAPS,
                           temps: StageTemperatures = DEFAULT_TEMPS) -> Runner:
    def runner(item: EvalItem, tag_prefix: str):
        return run_no_context(item, executive, caps, temps, tag_prefix=tag_prefix)
    return runner


def make_perfect_retrieval_runner(executive, corpus: Corpus,
                                  caps: OutputCaps = DEFAULT_CAPS,
                                  temps: StageTemperatures = DEFAULT_TEMPS,
                                  max_context_chars: int | None = None) -> Runner:
    def runner(item: EvalItem, tag_prefix: str):
        return run_perfect_retrieval(item, corpus, executive, caps, temps,
                                     max_context_chars, tag_prefix=tag_prefix)
    return runner


@dataclass
class ItemResult:
    question_id: str
    predicted: str | None
    verdict: bool | None  # None = unjudged or errored
    flagged: bool = False
    error: str | None = None
    transcript_ref: str | None = None
    transcript: list = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        return {
            "question_id": self.question_id,
            "predicted": self.predicted,
            "verdict": self.verdict,
            "flagged": self.flagged,
            "error": self.error,
            "transcript_ref": self.transcript_ref,
        }


@dataclass
class RunResult:
    index: int
    accuracy: float
    correct: int
    judged: int
    unjudged: int
    errors: int
    items: list

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "accuracy": self.accuracy,
            "correct": self.correct,
            "judged": self.judged,
            "unjudged": self.unjudged,
            "errors": self.errors,
            "items": [item.to_dict() for item in self.items],
        }


@dataclass
class EvalReport:
    runs: list
    mean: float
    std: float
    accuracy: float
    config: dict = field(default_factory=dict)

    @property
    def per_item(self) -> list:
        return [item for run in self.runs for item in run.items]

    @property
    def run_accuracies(self) -> list[float]:
        return [run.accuracy for run in self.runs]

    def to_dict(self) -> dict:
        return {
            "mean": self.mean,
            "std": self.std,
            "accuracy": self.accuracy,
            "run_accuracies": self.run_accuracies,
            "runs": [run.to_dict() for run in self.runs],
            "config": self.config,
        }


def report_from_run_accuracies(accuracies: Sequence[float],
                               runs: list | None = None,
                               config: dict | None = None) -> EvalReport:
    """Assemble report statistics from per-run accuracies.

    Sample standard deviation uses the n-1 denominator and is 0 for a
    single run.
    """
    if not accuracies:
        raise EvalError("report requires at least one run")
    mean = statistics.fmean(accuracies)
    std = statistics.stdev(accuracies) if len(accuracies) > 1 else 0.0
    if runs is None:
        runs = [RunResult(i, acc, 0, 0, 0, 0, []) for i, acc in enumerate(accuracies)]
    total_correct = sum(run.correct for run in runs)
    total_judged = sum(run.judged for run in runs)
    overall = total_correct / total_judged if total_judged else mean
    return EvalReport(runs=runs, mean=mean, std=std, accuracy=overall,
                      config=config or {})


def evaluate(items: Sequence[EvalItem], runner: Runner, judge_backend,
             runs: int = 1, seed: int = 0,
             transcript_dir=None, config: dict | None = None) -> EvalReport:
    """Execute `runs` full passes over the items and judge every answer.

    The run index (and any nonzero seed) is folded into the tag prefix
    handed to the runner, so scripted backends can answer per run and
    stochastic backends draw distinct samples, while rerunning the whole
    evaluation stays reproducible. Items are processed in question_id
    order; a run fails only if every one of its items errored.
    """
    if not items:
        raise EvalError("no items to evaluate")
    if runs < 1:
        raise EvalError("runs must be >= 1")
    ordered = sorted(items, key=lambda item: item.question_id)
    if len({item.question_id for item in ordered}) != len(ordered):
        raise EvalError("duplicate question_id in items")
    out_dir = Path(transcript_dir) if transcript_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    run_results = []
    for run_index in range(runs):
        seed_part = f"s{seed}:" if seed else ""
        results = []
        errors = 0
        unjudged = 0
        correct = 0
        judged = 0
        for item in ordered:
            prefix = f"{seed_part}run{run_index}:{item.question_id}:"
            try:
                answer, transcript = runner(item, prefix)
            except (RuntimeError, ValueError, OSError) as exc:
                errors += 1
                results.append(ItemResult(item.question_id, None, None,
                                          flagged=True, error=str(exc)))
                continue
            verdict = judge(item.question, item.gold_answer, answer,
                            judge_backend, tag=f"{prefix}judge")
            ref = None
            if out_dir is not None:
                ref = str(out_dir / f"run{run_index}_{item.question_id}.jsonl")
                save_transcript_jsonl(transcript, ref)
            if verdict.correct is None:
                unjudged += 1
            else:
                judged += 1
                correct += verdict.correct
            results.append(ItemResult(item.question_id, answer, verdict.correct,
                                      flagged=verdict.flagged,
                                      transcript_ref=ref, transcript=transcript))
        if errors == len(ordered):
            raise EvalError(f"run {run_index}: every item errored")
        accuracy = correct / judged if judged else 0.0
        run_results.append(RunResult(run_index, accuracy, correct, judged,
                                     unjudged, errors, results))

    return report_from_run_accuracies([r.accuracy for r in run_results],
                                      run_results, config)


def save_report_json(report: EvalReport, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, ensure_ascii=False, indent=2, sort_keys=True)
        fh.write("\n")


def noise_ablation_report(reports: dict, baseline_label: str = "0N") -> dict:
    """Accuracy deltas of noise-ratio variants against the noise-free corpus."""
    if baseline_label not in reports:
        raise EvalError(f"missing baseline report {baseline_label!r}")
    base = reports[baseline_label]
    rows = {}
    for label in sorted(reports):
        rep = reports[label]
        rows[label] = {"mean": rep.mean, "std": rep.std,
                       "delta": rep.mean - base.mean}
    return {"baseline": baseline_label, "rows": rows}
