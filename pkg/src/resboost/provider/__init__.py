"""Candidate generation: prompts, providers and candidate validation."""

from .base import (CandidateExpert, ErrorReport, IterationFailed, ProviderError, SpaceEntry,
                   ValidationError, ValidCandidate, validate)
from .llm import LlmConfig, LlmProvider, extract
from .mock import BrokenProvider, MockProvider
from .prompt import TAGS, PromptBundle, build_prompt, error_tag

PROVIDERS = ("mock", "broken", "llm")


def make_provider(kind: str, seed: int = 0, llm: LlmConfig | None = None, transcript=None):
    if kind == "mock":
        return MockProvider(seed)
    if kind == "broken":
        return BrokenProvider(seed)
    if kind == "llm":
        return LlmProvider(llm, transcript)
    raise ValueError(f"unknown provider {kind!r}; expected one of {PROVIDERS}")


__all__ = [
    "BrokenProvider", "CandidateExpert", "ErrorReport", "IterationFailed", "LlmConfig",
    "LlmProvider", "MockProvider", "PROVIDERS", "PromptBundle", "ProviderError", "SpaceEntry",
    "TAGS", "ValidCandidate", "ValidationError", "build_prompt", "error_tag", "extract",
    "make_provider", "validate",
]
