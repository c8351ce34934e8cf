"""Adapter run configuration."""

from __future__ import annotations

from dataclasses import dataclass


class AdapterError(Exception):
    pass


@dataclass
class AdapterConfig:
    model: str  # "toy-span" | "toy-t5" | a transformers identifier
    dataset: str  # dataset file path
    dataset_kind: str  # "rc_json" | "squad_json" | "open_json"
    output: str
    task: str = "reading_comprehension"  # or open_extractive / open_generative
    k_dropout: int = 10
    pivot: str = "fr"  # backtranslation pivot language
    beam_size: int = 4
    max_context_tokens: int = 512
    top_passages: int = 100
    top_spans: int = 10
    top_candidates: int = 5  # RC / generative candidate count
    max_span_len: int = 8
    hidden_dim: int = 32  # toy model width
    seed: int = 0
    backtranslate: bool = False
    emit_pooled: bool = False  # store mean-pooled vectors instead of token matrices

    def __post_init__(self):
        if self.k_dropout < 1:
            raise AdapterError("k_dropout must be >= 1")
        if self.pivot not in ("fr", "de"):
            raise AdapterError("pivot must be 'fr' or 'de'")
        if self.beam_size < 1:
            raise AdapterError("beam_size must be >= 1")
        if self.task not in ("reading_comprehension", "open_extractive", "open_generative"):
            raise AdapterError(f"unknown task {self.task!r}")
        if self.dataset_kind not in ("rc_json", "squad_json", "open_json"):
            raise AdapterError(f"unknown dataset kind {self.dataset_kind!r}")
