"""Text embeddings for questions and triplets, plus cosine similarity.

A deterministic feature-hashing embedder keeps the pipeline fully offline; a
remote provider speaking the common /embeddings wire format can be swapped in
without changing anything downstream.
"""

from __future__ import annotations

import hashlib
import os
import re
import threading
from dataclasses import dataclass

import numpy as np
import requests

from .llm_client import ResponseCache


class EmptyText(ValueError):
    """Nothing to embed: empty or token-free input."""


class DimensionMismatch(ValueError):
    """Vectors of different dimensions were combined."""


class ProviderUnavailable(RuntimeError):
    """Remote embedding endpoint failed after retries."""


DEFAULT_DIM = 256


@dataclass(frozen=True, eq=False)
class Embedding:
    """Unit-norm vector tagged with the provider that produced it."""

    values: np.ndarray
    provider_tag: str

    @property
    def dim(self) -> int:
        return int(self.values.shape[0])


def _normalized(vec: np.ndarray) -> np.ndarray:
    norm = float(np.linalg.norm(vec))
    if norm == 0.0:
        # Signed hashing can cancel exactly; pin a fixed direction instead.
        vec = vec.copy()
        vec[0] = 1.0
        norm = 1.0
    return vec / norm


_TOKEN_RE = re.compile(r"[a-z0-9]+")


def fallback_embed(text: str, dim: int = DEFAULT_DIM) -> Embedding:
    """Hash word tokens and in-word character trigrams into a signed bag vector.

    Pure function of (text, dim): word order never matters, token counts do.
    """
    if dim < 16:
        raise ValueError(f"dim {dim} too small (min 16)")
    tokens = _TOKEN_RE.findall(text.lower())
    if not tokens:
        raise EmptyText(f"no tokens in {text!r}")

    features = list(tokens)
    for tok in tokens:
        features.extend(tok[i:i + 3] for i in range(len(tok) - 2))

    vec = np.zeros(dim, dtype=np.float64)
    for feat in features:
        digest = hashlib.blake2b(feat.encode("utf-8"), digest_size=8).digest()
        bucket = int.from_bytes(digest[:4], "little") % dim
        sign = 1.0 if digest[4] & 1 else -1.0
        vec[bucket] += sign
    return Embedding(values=_normalized(vec), provider_tag=f"local-hash-{dim}")


class LocalHashEmbedder:
    """Offline provider wrapping fallback_embed at a fixed dimension."""

    def __init__(self, dim: int = DEFAULT_DIM):
        self.dim = dim
        self.tag = f"local-hash-{dim}"

    def embed(self, text: str) -> Embedding:
        return fallback_embed(text, self.dim)


@dataclass(frozen=True)
class EmbeddingConfig:
    endpoint: str = ""
    model_name: str = ""
    api_key_env: str = "FINKGQA_EMBED_API_KEY"
    timeout: float = 60.0
    max_retries: int = 3


class RemoteEmbedder:
    """Provider for a POST {endpoint}/embeddings server, with response caching."""

    def __init__(self, cfg: EmbeddingConfig, cache: ResponseCache | None = None,
                 transport=None):
        self.cfg = cfg
        self.cache = cache or ResponseCache(None)
        self.transport = transport or self._http_post
        self.tag = f"remote:{cfg.model_name}"
        self._lock = threading.Lock()

    @staticmethod
    def _http_post(url: str, payload: dict, headers: dict, timeout: float):
        resp = requests.post(url, json=payload, headers=headers, timeout=timeout)
        return resp.status_code, resp.json()

    def embed(self, text: str) -> Embedding:
        if not text.strip():
            raise EmptyText("empty text")
        payload = {"model": self.cfg.model_name, "input": text}
        key = ResponseCache.key_for(payload)
        with self._lock:
            body = self.cache.get(key)
        if body is None:
            body = self._request(payload)
            with self._lock:
                self.cache.put(key, payload, body)
        try:
            raw = body["data"][0]["embedding"]
        except (KeyError, IndexError, TypeError) as exc:
            raise ProviderUnavailable(f"malformed embeddings response: {body}") from exc
        vec = np.asarray(raw, dtype=np.float64)
        return Embedding(values=_normalized(vec), provider_tag=self.tag)

    def _request(self, payload: dict) -> dict:
        url = self.cfg.endpoint.rstrip("/") + "/embeddings"
        headers = {"Content-Type": "application/json"}
        api_key = os.environ.get(self.cfg.api_key_env, "")
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        last_error = None
        for _ in range(self.cfg.max_retries + 1):
            try:
                status, body = self.transport(url, payload, headers, self.cfg.timeout)
            except Exception as exc:
                last_error = repr(exc)
                continue
            if status >= 500:
                last_error = f"server status {status}"
                continue
            if status != 200:
                raise ProviderUnavailable(f"embeddings endpoint returned {status}")
            return body
        raise ProviderUnavailable(f"embeddings endpoint unreachable: {last_error}")


def embed(text: str, provider) -> Embedding:
    """Embed text with whatever provider is configured."""
    return provider.embed(text)


def cosine(a: Embedding, b: Embedding) -> float:
    """Dot product of unit vectors, clamped to [-1, 1]."""
    if a.dim != b.dim:
        raise DimensionMismatch(f"{a.dim} vs {b.dim}")
    return float(np.clip(np.dot(a.values, b.values), -1.0, 1.0))
