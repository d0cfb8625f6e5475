"""Reflection QA synthesis: five generator-driven steps with ablation switches."""

from .pipeline import (
    ALL_STEPS,
    STAGES,
    ParseError,
    PipelineConfig,
    PipelineError,
    PipelineLog,
    QAPair,
    ReflectionDataset,
    StepSampling,
    compression_ratio,
    consolidate,
    export_sft,
    extract_direct,
    extract_indirect,
    load_dataset_jsonl,
    run_pipeline,
    save_dataset_jsonl,
    surface_entities,
    synthesize_cross_document,
    verify_self_containment,
)
from .prompts import PROMPT_VERSION

__all__ = [
    "ALL_STEPS",
    "STAGES",
    "PROMPT_VERSION",
    "ParseError",
    "PipelineConfig",
    "PipelineError",
    "PipelineLog",
    "QAPair",
    "ReflectionDataset",
    "StepSampling",
    "compression_ratio",
    "consolidate",
    "export_sft",
    "extract_direct",
    "extract_indirect",
    "load_dataset_jsonl",
    "run_pipeline",
    "save_dataset_jsonl",
    "surface_entities",
    "synthesize_cross_document",
    "verify_self_containment",
]
