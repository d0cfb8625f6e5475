"""memo: one executable over the corpus, synthesis, merging, inference, and
evaluation modules.

Exit codes: 0 success, 1 usage error, 2 runtime error, 3 partial failure
(work completed with logged item errors). Every invocation writes a
machine-readable summary JSON. Configuration precedence is flags over
environment (MEMO_ENDPOINT, MEMO_API_KEY, MEMO_MODEL) over --config
file. Supplying --mock-script guarantees no network I/O.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import corpus as corpus_mod
from . import evaluation, merging, protocol
from .gateway import GatewayError, HttpBackend, MockBackend, MockScript
from .synthesis import pipeline as pipeline_mod

DEFAULT_SUMMARY = "memo-summary.json"

_STATUS = {0: "ok", 1: "usage_error", 2: "runtime_error", 3: "partial_failure"}


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _common_flags(parser: argparse.ArgumentParser):
    parser.add_argument("--summary", default=DEFAULT_SUMMARY,
                        help="summary JSON path (written on every exit)")
    parser.add_argument("--config", help="JSON config file (lowest precedence)")
    parser.add_argument("--print-config", action="store_true",
                        help="print the resolved configuration and exit")
    parser.add_argument("--mock-script", help="scripted-mock JSONL; disables all network I/O")
    parser.add_argument("--mock-fallthrough", action="store_true",
                        help="unmatched mock requests get an empty default instead of an error")
    parser.add_argument("--endpoint", help="chat-completions base URL")
    parser.add_argument("--api-key", help="bearer credential (or MEMO_API_KEY)")
    parser.add_argument("--model", help="model name sent on the wire")
    parser.add_argument("--max-inflight", type=int, help="bounded concurrency (default 8)")


def _build_parser() -> _Parser:
    parser = _Parser(prog="memo", description=__doc__.split("\n", 1)[0])
    sub = parser.add_subparsers(dest="command", metavar="command",
                                parser_class=_Parser)

    p = sub.add_parser("chunk", help="sliding-window chunking")
    _common_flags(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--window", type=int, required=True, help="window size in words")
    p.add_argument("--overlap", type=int, default=0, help="overlap in words")
    p.add_argument("--out", required=True, help="chunk JSONL output")

    p = sub.add_parser("synthesize", help="run the QA synthesis steps")
    _common_flags(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True, help="dataset JSONL output")
    p.add_argument("--window", type=int, help="chunking window in words (default: whole document)")
    p.add_argument("--overlap", type=int, default=0)
    p.add_argument("--group-by", choices=["per_document", "per_question"],
                   default="per_document")
    p.add_argument("--annotation", help="annotation JSONL (required for per_question)")
    p.add_argument("--steps", default=",".join(pipeline_mod.ALL_STEPS),
                   help="comma-separated subset of 1a,1b,2,3,4,5")
    p.add_argument("--parse-retries", type=int, default=3)
    p.add_argument("--temperature", type=float, default=0.7)

    p = sub.add_parser("export-sft", help="export chat-format SFT JSONL")
    _common_flags(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0, help="shuffle seed")

    p = sub.add_parser("merge", help="merge checkpoints via task vectors")
    _common_flags(p)
    p.add_argument("--method", required=True, choices=merging.MERGE_METHODS)
    p.add_argument("--base", required=True, help="base checkpoint (.mtn)")
    p.add_argument("--inputs", nargs="+", required=True,
                   help="fine-tuned checkpoints or extracted task vectors")
    p.add_argument("--out", required=True)
    p.add_argument("--rho", type=float, help="density (ties/dare)")
    p.add_argument("--t", type=float, help="slerp interpolation factor")
    p.add_argument("--seed", type=int, default=0, help="dare sparsification seed")
    p.add_argument("--lam", type=float, action="append",
                   help="linear weight, one per input (repeatable)")
    p.add_argument("--aggregation", choices=["mean", "sum"], default="mean")
    p.add_argument("--trim-scope", choices=["global", "per_tensor"], default="global")
    p.add_argument("--emit", choices=["checkpoint", "vector"], default="checkpoint",
                   help="write the merged checkpoint or the merged task vector")

    p = sub.add_parser("infer", help="answer one query")
    _common_flags(p)
    p.add_argument("--query", required=True)
    p.add_argument("--mode", choices=["protocol", "single_turn", "unstructured"],
                   default="protocol")
    p.add_argument("--turns", type=int, default=15, help="unstructured round cap")
    p.add_argument("--budget-grounding", type=int, default=1)
    p.add_argument("--budget-entity", type=int, default=7)
    p.add_argument("--budget-seeking", type=int, default=8)
    p.add_argument("--transcript", help="transcript JSONL output path")

    p = sub.add_parser("eval", help="judge-based accuracy over a benchmark")
    _common_flags(p)
    p.add_argument("--runner", required=True,
                   choices=["protocol", "single_turn", "unstructured",
                            "no_context", "perfect_retrieval"])
    p.add_argument("--items", required=True, help="benchmark JSONL")
    p.add_argument("--corpus", help="corpus JSONL (perfect_retrieval only)")
    p.add_argument("--runs", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--turns", type=int, default=15)
    p.add_argument("--report", required=True, help="report JSON output")
    p.add_argument("--transcript-dir", help="directory for per-item transcripts")

    p = sub.add_parser("stats",
                       help="corpus statistics and dataset compression ratio")
    _common_flags(p)
    p.add_argument("--corpus", help="corpus JSONL")
    p.add_argument("--window", type=int, help="chunking window for corpus stats")
    p.add_argument("--overlap", type=int, default=0)
    p.add_argument("--group-by", choices=["per_document", "per_question"])
    p.add_argument("--annotation")
    p.add_argument("--dataset", help="dataset JSONL for compression ratio")
    p.add_argument("--out", help="also write the stats JSON here")

    p = sub.add_parser("compute-model",
                       help="cumulative compute: merging vs full retraining")
    _common_flags(p)
    p.add_argument("--k", type=int, required=True, help="number of corpus arrivals")
    p.add_argument("--cost", type=float, required=True, help="per-corpus training cost")

    return parser


def _resolve_config(args) -> dict:
    file_cfg = {}
    if getattr(args, "config", None):
        with open(args.config, encoding="utf-8") as fh:
            file_cfg = json.load(fh)
        if not isinstance(file_cfg, dict):
            raise ValueError(f"{args.config}: config file must hold a JSON object")

    def pick(flag, env_name, file_key, default=None):
        if flag is not None:
            return flag
        if env_name and os.environ.get(env_name):
            return os.environ[env_name]
        return file_cfg.get(file_key, default)

    return {
        "endpoint": pick(getattr(args, "endpoint", None), "MEMO_ENDPOINT", "endpoint"),
        "api_key": pick(getattr(args, "api_key", None), "MEMO_API_KEY", "api_key", ""),
        "model": pick(getattr(args, "model", None), "MEMO_MODEL", "model", "default"),
        "max_inflight": int(pick(getattr(args, "max_inflight", None), None, "max_inflight", 8)),
        "mock_script": pick(getattr(args, "mock_script", None), None, "mock_script"),
        "mock_fallthrough": bool(getattr(args, "mock_fallthrough", False)
                                 or file_cfg.get("mock_fallthrough", False)),
    }


def _build_backend(cfg: dict):
    if cfg["mock_script"]:
        script = MockScript.load_jsonl(cfg["mock_script"],
                                       strict=not cfg["mock_fallthrough"])
        return MockBackend(script)
    if not cfg["endpoint"]:
        raise GatewayError("no endpoint configured: pass --endpoint, set MEMO_ENDPOINT, "
                           "or supply --mock-script")
    return HttpBackend(base_url=cfg["endpoint"], model=cfg["model"],
                       api_key=cfg["api_key"])


def _load_corpus(path, window, overlap, group_by=None, annotation_path=None):
    corpus = corpus_mod.load_corpus_jsonl(path)
    corpus.apply_chunking(window, overlap or 0)
    if group_by:
        annotation = None
        if group_by == "per_question":
            if not annotation_path:
                raise ValueError("per_question grouping requires --annotation")
            records = corpus_mod.load_annotation_jsonl(annotation_path)
            annotation = corpus_mod.annotation_to_groups_table(records)
        corpus.groups = corpus_mod.build_groups(corpus, group_by, annotation)
    return corpus


def _cmd_chunk(args, cfg):
    corpus = _load_corpus(args.corpus, args.window, args.overlap)
    with open(args.out, "w", encoding="utf-8") as fh:
        for chunk in corpus.chunks:
            fh.write(json.dumps({
                "doc_id": chunk.doc_id, "index": chunk.index,
                "text": chunk.text, "word_span": list(chunk.word_span),
            }, ensure_ascii=False) + "\n")
    return 0, {"documents": len(corpus.documents), "chunks": len(corpus.chunks),
               "out": args.out}


def _cmd_synthesize(args, cfg):
    steps = frozenset(s.strip() for s in args.steps.split(",") if s.strip())
    corpus = _load_corpus(args.corpus, args.window, args.overlap,
                          args.group_by, args.annotation)
    backend = _build_backend(cfg)
    pipe_cfg = pipeline_mod.PipelineConfig(
        enabled_steps=steps,
        sampling=pipeline_mod.StepSampling(temperature=args.temperature),
        parse_retry_limit=args.parse_retries,
        max_inflight=cfg["max_inflight"],
    )
    log = pipeline_mod.PipelineLog()
    dataset = pipeline_mod.run_pipeline(corpus, backend, pipe_cfg, log)
    pipeline_mod.save_dataset_jsonl(dataset, args.out)
    provenance_path = args.out + ".provenance.json"
    with open(provenance_path, "w", encoding="utf-8") as fh:
        json.dump(dataset.provenance, fh, ensure_ascii=False, indent=2, sort_keys=True)
        fh.write("\n")
    failures = dataset.provenance["chunks_failed"] + len(dataset.provenance["errors"])
    code = 3 if failures else 0
    return code, {"pairs": len(dataset), "per_stage": dataset.per_stage_counts,
                  "out": args.out, "provenance": provenance_path,
                  "failures": failures}


def _cmd_export_sft(args, cfg):
    dataset = pipeline_mod.load_dataset_jsonl(args.dataset)
    count = pipeline_mod.export_sft(dataset, args.out, args.seed)
    return 0, {"pairs": count, "out": args.out, "seed": args.seed}


def _cmd_merge(args, cfg):
    base = merging.load_checkpoint(args.base)
    taus = []
    for path in args.inputs:
        tensors, fingerprint = merging.tensorio.load(path)
        if fingerprint is None:
            taus.append(merging.task_vector(tensors, base))
        else:
            taus.append(merging.TaskVector(tensors, fingerprint))
    merge_cfg = merging.MergeConfig(
        method=args.method,
        lambdas=tuple(args.lam) if args.lam else None,
        t=args.t, rho=args.rho, seed=args.seed,
        disjoint_aggregation=args.aggregation, trim_scope=args.trim_scope,
    )
    merged = merging.run_merge(merge_cfg, taus)
    if args.emit == "vector":
        merging.save_task_vector(args.out, merged)
    else:
        merging.save_checkpoint(args.out, merging.apply_to_base(base, merged))
    return 0, {"method": merge_cfg.label(), "inputs": len(taus),
               "tensors": len(merged.tensors), "elements": merged.element_count(),
               "emit": args.emit, "out": args.out}


def _cmd_infer(args, cfg):
    backend = _build_backend(cfg)
    budgets = protocol.StageBudgets(args.budget_grounding, args.budget_entity,
                                    args.budget_seeking)
    if args.mode == "protocol":
        answer, transcript = protocol.run_protocol(args.query, backend, backend,
                                                   budgets=budgets)
    elif args.mode == "single_turn":
        answer, transcript = protocol.run_single_turn(args.query, backend, backend)
    else:
        answer, transcript = protocol.run_unstructured(args.query, backend, backend,
                                                       args.turns)
    if args.transcript:
        protocol.save_transcript_jsonl(transcript, args.transcript)
    print(answer)
    return 0, {"mode": args.mode, "answer": answer, "exchanges": len(transcript),
               "transcript": args.transcript}


def _cmd_eval(args, cfg):
    items = evaluation.load_benchmark_jsonl(args.items)
    backend = _build_backend(cfg)
    if args.runner == "protocol":
        runner = evaluation.make_protocol_runner(backend, backend)
    elif args.runner == "single_turn":
        runner = evaluation.make_single_turn_runner(backend, backend)
    elif args.runner == "unstructured":
        runner = evaluation.make_unstructured_runner(backend, backend, args.turns)
    elif args.runner == "no_context":
        runner = evaluation.make_no_context_runner(backend)
    else:
        if not args.corpus:
            raise ValueError("perfect_retrieval requires --corpus")
        corpus = _load_corpus(args.corpus, None, 0)
        runner = evaluation.make_perfect_retrieval_runner(backend, corpus)
    report = evaluation.evaluate(
        items, runner, backend, runs=args.runs, seed=args.seed,
        transcript_dir=args.transcript_dir,
        config={"runner": args.runner, "runs": args.runs, "seed": args.seed,
                **protocol.config_dict()})
    evaluation.save_report_json(report, args.report)
    partial = any(run.errors or run.unjudged for run in report.runs)
    return (3 if partial else 0), {
        "runner": args.runner, "runs": args.runs, "mean": report.mean,
        "std": report.std, "report": args.report,
        "errors": sum(run.errors for run in report.runs),
        "unjudged": sum(run.unjudged for run in report.runs),
    }


def _cmd_stats(args, cfg):
    if not args.corpus and not args.dataset:
        raise _UsageError("stats requires --corpus and/or --dataset")
    payload = {}
    if args.corpus:
        corpus = _load_corpus(args.corpus, args.window, args.overlap,
                              args.group_by, args.annotation)
        payload["corpus"] = corpus_mod.corpus_stats(corpus)
    if args.dataset:
        dataset = pipeline_mod.load_dataset_jsonl(args.dataset)
        ratio, raw, compressed = pipeline_mod.compression_ratio(dataset)
        payload["dataset"] = {
            "pairs": len(dataset), "per_stage": dataset.per_stage_counts,
            "compression": {"ratio": ratio, "raw_bytes": raw,
                            "compressed_bytes": compressed},
        }
    text = json.dumps(payload, ensure_ascii=False, indent=2, sort_keys=True)
    print(text)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    return 0, payload


def _cmd_compute_model(args, cfg):
    merge_cost, retrain_cost = merging.estimate_cumulative_compute(args.k, args.cost)
    payload = {"k": args.k, "per_corpus_cost": args.cost,
               "merge_cost": merge_cost, "retrain_cost": retrain_cost,
               "saving_factor": retrain_cost / merge_cost}
    print(json.dumps(payload, indent=2, sort_keys=True))
    return 0, payload


_HANDLERS = {
    "chunk": _cmd_chunk,
    "synthesize": _cmd_synthesize,
    "export-sft": _cmd_export_sft,
    "merge": _cmd_merge,
    "infer": _cmd_infer,
    "eval": _cmd_eval,
    "stats": _cmd_stats,
    "compute-model": _cmd_compute_model,
}


def _summary_path_from_argv(argv) -> str:
    for i, token in enumerate(argv):
        if token == "--summary" and i + 1 < len(argv):
            return argv[i + 1]
        if token.startswith("--summary="):
            return token.split("=", 1)[1]
    return DEFAULT_SUMMARY


def _write_summary(path, command, code, payload):
    summary = {"command": command, "exit_code": code, "status": _STATUS[code]}
    summary.update(payload)
    try:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(summary, fh, ensure_ascii=False, indent=2, sort_keys=True,
                      default=str)
            fh.write("\n")
    except OSError as exc:
        print(f"warning: cannot write summary to {path}: {exc}", file=sys.stderr)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        _write_summary(_summary_path_from_argv(argv), argv[0] if argv else None,
                       1, {"error": str(exc)})
        return 1

    if args.command is None:
        parser.print_usage(sys.stderr)
        _write_summary(args.summary if hasattr(args, "summary") else DEFAULT_SUMMARY,
                       None, 1, {"error": "no subcommand given"})
        return 1

    try:
        cfg = _resolve_config(args)
        if args.print_config:
            shown = dict(cfg)
            shown["api_key"] = "****" if cfg["api_key"] else ""
            print(json.dumps(shown, indent=2, sort_keys=True))
            code, payload = 0, {"printed_config": True}
        else:
            code, payload = _HANDLERS[args.command](args, cfg)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        code, payload = 1, {"error": str(exc)}
    except (OSError, ValueError, RuntimeError, KeyError, GatewayError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        code, payload = 2, {"error": str(exc)}

    _write_summary(args.summary, args.command, code, payload)
    return code


if __name__ == "__main__":
    sys.exit(main())
