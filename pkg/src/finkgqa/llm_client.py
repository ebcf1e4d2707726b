"""Chat-completion client: OpenAI-style wire format, disk cache, retries.

One client serves extraction, reasoning, and the optional answer judge. A
deterministic in-process mock transport stands in for the server so the whole
pipeline can run offline and reproducibly.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import requests

logger = logging.getLogger(__name__)

Transport = Callable[[str, dict, dict, float], tuple[int, dict]]


class LlmUnavailable(RuntimeError):
    """Transport kept failing after the configured retries."""


class LlmTruncated(RuntimeError):
    """The model stopped at the token limit; the caller may re-chunk."""


@dataclass(frozen=True)
class LlmConfig:
    model_name: str = "llama-3.1-8b-instruct"
    temperature: float = 0.2
    max_tokens: int = 2048
    endpoint: str = ""
    api_key_env: str = "FINKGQA_API_KEY"
    max_retries: int = 3
    timeout: float = 60.0
    retry_backoff_s: float = 0.5

    def __post_init__(self):
        if not 0 <= self.temperature <= 2:
            raise ValueError(f"temperature {self.temperature} outside [0, 2]")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be >= 1")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")


@dataclass(frozen=True)
class ChatResult:
    text: str
    from_cache: bool = False
    finish_reason: str = "stop"


class ResponseCache:
    """One file per request hash, holding request, response, and timestamp."""

    def __init__(self, cache_dir: str | Path | None):
        self.dir = Path(cache_dir) if cache_dir else None
        self._lock = threading.Lock()
        if self.dir:
            self.dir.mkdir(parents=True, exist_ok=True)

    @staticmethod
    def key_for(payload: dict) -> str:
        blob = json.dumps(payload, sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()

    def get(self, key: str) -> dict | None:
        if not self.dir:
            return None
        path = self.dir / f"{key}.json"
        if not path.exists():
            return None
        with open(path, encoding="utf-8") as f:
            return json.load(f)["response"]

    def put(self, key: str, request: dict, response: dict) -> None:
        if not self.dir:
            return
        path = self.dir / f"{key}.json"
        entry = {"request": request, "response": response, "timestamp": time.time()}
        with self._lock:
            tmp = path.with_suffix(".tmp")
            tmp.write_text(json.dumps(entry, indent=2), encoding="utf-8")
            tmp.replace(path)


def http_transport(url: str, payload: dict, headers: dict, timeout: float) -> tuple[int, dict]:
    resp = requests.post(url, json=payload, headers=headers, timeout=timeout)
    try:
        body = resp.json()
    except ValueError:
        body = {"error": resp.text}
    return resp.status_code, body


class ChatClient:
    """Caching chat client with exponential backoff on transport/5xx errors."""

    def __init__(self, cfg: LlmConfig, cache: ResponseCache | None = None,
                 transport: Transport | None = None):
        self.cfg = cfg
        self.cache = cache or ResponseCache(None)
        self.transport = transport or http_transport

    def _headers(self) -> dict:
        headers = {"Content-Type": "application/json"}
        api_key = os.environ.get(self.cfg.api_key_env, "")
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        return headers

    def complete(self, prompt: str, temperature: float | None = None) -> ChatResult:
        """Send one user message; identical (prompt, model, temperature) hits the cache."""
        temp = self.cfg.temperature if temperature is None else temperature
        cache_key = ResponseCache.key_for(
            {"prompt": prompt, "model": self.cfg.model_name, "temperature": temp})
        cached = self.cache.get(cache_key)
        if cached is not None:
            return self._to_result(cached, from_cache=True)

        payload = {
            "model": self.cfg.model_name,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": temp,
            "max_tokens": self.cfg.max_tokens,
        }
        url = self.cfg.endpoint.rstrip("/") + "/chat/completions"
        last_error: str | None = None
        for attempt in range(self.cfg.max_retries + 1):
            if attempt:
                time.sleep(self.cfg.retry_backoff_s * 2 ** (attempt - 1))
            try:
                status, body = self.transport(url, payload, self._headers(), self.cfg.timeout)
            except Exception as exc:
                last_error = repr(exc)
                logger.warning("chat attempt %d failed: %s", attempt + 1, last_error)
                continue
            if status >= 500:
                last_error = f"server status {status}"
                logger.warning("chat attempt %d failed: %s", attempt + 1, last_error)
                continue
            if status != 200:
                raise LlmUnavailable(f"chat endpoint returned {status}: {body}")
            self.cache.put(cache_key, payload, body)
            return self._to_result(body, from_cache=False)
        raise LlmUnavailable(f"chat endpoint unreachable after "
                             f"{self.cfg.max_retries + 1} attempts: {last_error}")

    @staticmethod
    def _to_result(body: dict, from_cache: bool) -> ChatResult:
        try:
            choice = body["choices"][0]
            text = choice["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise LlmUnavailable(f"malformed chat response: {body}") from exc
        finish = choice.get("finish_reason", "stop")
        if finish == "length":
            raise LlmTruncated("response hit the max_tokens limit")
        return ChatResult(text=text, from_cache=from_cache, finish_reason=finish)


def call_llm(prompt: str, cfg: LlmConfig, cache: ResponseCache | None = None,
             transport: Transport | None = None) -> str:
    """Convenience wrapper returning just the assistant text."""
    return ChatClient(cfg, cache=cache, transport=transport).complete(prompt).text


def chat_response(text: str, finish_reason: str = "stop") -> dict:
    """Shape a plain string like a chat-completions response body."""
    return {"choices": [{"message": {"role": "assistant", "content": text},
                         "finish_reason": finish_reason}]}


class MockChatTransport:
    """Deterministic stand-in for a chat server, keyed off prompt markers.

    Extraction prompts are answered by re-reading the linearized table
    sentences out of the document section; reasoning prompts are answered from
    a question -> gold-answer key (optionally scrambled to force mismatches);
    judge prompts get a fixed verdict. Counts calls so tests can assert that
    the cache kept the network cold.
    """

    def __init__(self, answer_key: dict[str, str] | None = None, scramble: bool = False):
        self.answer_key = dict(answer_key or {})
        self.scramble = scramble
        self.calls = 0
        self._lock = threading.Lock()

    def __call__(self, url: str, payload: dict, headers: dict, timeout: float) -> tuple[int, dict]:
        with self._lock:
            self.calls += 1
        prompt = payload["messages"][-1]["content"]
        if "ATTRIBUTE REQUIREMENTS" in prompt:
            return 200, chat_response(self._extract(prompt))
        if "ANSWER:" in prompt:
            return 200, chat_response(self._answer(prompt))
        return 200, chat_response("YES")

    # Matches the table-linearization template with a numeric-shaped value.
    _FACT_RE = re.compile(
        r"For ([^,]+), (.+?) is "
        r"([$€£]?\(?-?[\d,]+(?:\.\d+)?[KMBkmb]?\)?%?"
        r"(?: (?:million|billion|thousand))?(?: (?:USD|EUR|GBP))?)\."
    )

    def _extract(self, prompt: str) -> str:
        from . import kg_schema

        doc_text = prompt.rsplit("DOCUMENT:", 1)[-1]
        facts = []
        for m in self._FACT_RE.finditer(doc_text):
            row_key, header, cell = m.group(1), m.group(2), m.group(3)
            try:
                metric = kg_schema.canonical_metric(header)
                value = kg_schema.parse_numeric(cell)
            except (kg_schema.NotNumeric, kg_schema.EmptyAfterNormalization):
                continue
            period = kg_schema.normalize_period(row_key)
            facts.append({
                "subject": metric,
                "relation": kg_schema.relation_for_period(period),
                "object": kg_schema.NormalizedValue(value.magnitude, value.unit).render(),
                "financial_metric_entity_type": metric,
                "company": None,
                "period": period.canonical(),
                "value": kg_schema.render_decimal(value.magnitude),
                "unit": value.unit,
            })
        return json.dumps(facts)

    def _answer(self, prompt: str) -> str:
        m = re.search(r"^Question: (.+)$", prompt, flags=re.MULTILINE)
        question = m.group(1).strip() if m else ""
        gold = self.answer_key.get(question)
        if gold is None:
            for known, ans in self.answer_key.items():
                if known in prompt:
                    gold = ans
                    break
        if gold is None:
            return "ANSWER: unknown"
        answer = self._scrambled(gold) if self.scramble else gold
        return f"Using the provided context.\nANSWER: {answer}"

    @staticmethod
    def _scrambled(gold: str) -> str:
        from . import kg_schema

        low = gold.strip().lower()
        if low == "yes":
            return "no"
        if low == "no":
            return "yes"
        try:
            value = kg_schema.parse_numeric(gold)
        except kg_schema.NotNumeric:
            return f"not {gold}"
        wrong = value.magnitude * 10 + 13
        return kg_schema.NormalizedValue(wrong, value.unit).render()
