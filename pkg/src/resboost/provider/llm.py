"""Chat-completions provider for any OpenAI-compatible endpoint."""

from __future__ import annotations

import json
import logging
import os
import re
import time
from dataclasses import dataclass
from pathlib import Path

import httpx

from .base import CandidateExpert, ErrorReport, IterationFailed, ProviderError, SpaceEntry
from .prompt import PromptBundle, repair_text

log = logging.getLogger(__name__)

_FENCE = re.compile(r"```[^\n`]*\n(.*?)```", re.S)
_RETRY_STATUS = {408, 409, 429, 500, 502, 503, 504}


@dataclass(frozen=True)
class LlmConfig:
    base_url: str = "http://localhost:8000/v1"
    model: str = "default"
    temperature: float = 0.1
    api_key_env: str = "RESBOOST_API_KEY"
    timeout: float = 60.0
    max_retries: int = 3
    backoff: float = 1.0
    max_tokens: int = 1024


def extract(text: str) -> CandidateExpert:
    """Pull the expert, its search space and intent out of a chat reply.

    Extraction problems come back as a candidate with ``error`` set so the
    repair loop can report them like any other validation failure.
    """
    m = _FENCE.search(text)
    if not m:
        return CandidateExpert("", "", (), raw=text, error="no fenced code block with the expert")
    dsl = m.group(1).strip()
    intent = ""
    im = re.search(r"INTENT:\s*(.+)", text)
    if im:
        intent = im.group(1).strip()
    k = text.find("SEARCH_SPACE:")
    if k < 0:
        return CandidateExpert(dsl, intent, (), raw=text, error="missing SEARCH_SPACE: block")
    rest = text[k + len("SEARCH_SPACE:"):].lstrip()
    if rest.startswith("```"):
        rest = rest[rest.find("\n") + 1:]
    try:
        obj, _ = json.JSONDecoder().raw_decode(rest)
        if isinstance(obj, dict):
            obj = [dict(v, name=n) for n, v in obj.items()] if "name" not in obj else [obj]
        entries = tuple(SpaceEntry.from_json(d) for d in obj)
    except (ValueError, TypeError, KeyError, AttributeError) as err:
        return CandidateExpert(dsl, intent, (), raw=text,
                               error=f"SEARCH_SPACE is not a JSON list of ranges: {err}")
    return CandidateExpert(dsl, intent, entries, raw=text)


class LlmProvider:
    name = "llm"

    def __init__(self, config: LlmConfig | None = None, transcript: str | Path | None = None,
                 transport: httpx.BaseTransport | None = None):
        self.config = config or LlmConfig()
        self.transcript = Path(transcript) if transcript else None
        key = os.environ.get(self.config.api_key_env, "")
        headers = {"Content-Type": "application/json"}
        if key:
            headers["Authorization"] = f"Bearer {key}"
        self._client = httpx.Client(base_url=self.config.base_url.rstrip("/"), headers=headers,
                                    timeout=self.config.timeout, transport=transport)

    def close(self) -> None:
        self._client.close()

    def _log(self, record: dict) -> None:
        if self.transcript is None:
            return
        self.transcript.parent.mkdir(parents=True, exist_ok=True)
        with self.transcript.open("a", encoding="utf-8") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")

    def chat(self, messages: list[dict], seed: int | None = None) -> str:
        cfg = self.config
        payload = {"model": cfg.model, "messages": messages,
                   "temperature": cfg.temperature, "max_tokens": cfg.max_tokens}
        if seed is not None:
            payload["seed"] = seed
        last = None
        for attempt in range(cfg.max_retries + 1):
            try:
                resp = self._client.post("/chat/completions", json=payload)
                if resp.status_code in _RETRY_STATUS:
                    last = f"HTTP {resp.status_code}"
                else:
                    resp.raise_for_status()
                    content = resp.json()["choices"][0]["message"]["content"]
                    self._log({"messages": messages, "response": content})
                    return content or ""
            except httpx.HTTPStatusError as err:
                self._log({"messages": messages, "error": str(err)})
                raise ProviderError(f"chat endpoint rejected the request: {err}") from None
            except (httpx.TransportError, KeyError, IndexError, ValueError) as err:
                last = f"{type(err).__name__}: {err}"
            if attempt < cfg.max_retries:
                log.warning("chat request failed (%s), retrying", last)
                time.sleep(cfg.backoff * 2 ** attempt)
        self._log({"messages": messages, "error": last})
        raise ProviderError(f"chat endpoint unavailable after {cfg.max_retries + 1} tries: {last}")

    def propose(self, prompt: PromptBundle, seed: int) -> CandidateExpert:
        return extract(self.chat(prompt.messages(), seed))

    def repair(self, prompt: PromptBundle, candidate: CandidateExpert, report: ErrorReport,
               attempt: int, max_attempts: int = 3) -> CandidateExpert:
        if attempt > max_attempts:
            raise IterationFailed(f"repair attempts exhausted ({max_attempts})")
        messages = prompt.messages() + [
            {"role": "assistant", "content": candidate.raw or candidate.dsl_text},
            {"role": "user", "content": repair_text(report, attempt, max_attempts)},
        ]
        return extract(self.chat(messages))
