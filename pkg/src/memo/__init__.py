"""Toolkit for building parametric memory models from document corpora.

Covers the full lifecycle: sliding-window chunking and noise-controlled
corpus assembly, generator-driven reflection QA synthesis, SFT-dataset
export, task-vector checkpoint merging, the structured multi-turn
protocol between an executive model and a memory model, and a
judge-based evaluation harness.
"""

__version__ = "0.1.0"
