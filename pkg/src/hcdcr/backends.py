"""JSON-over-HTTP clients for embedding, reranking, generation and scoring.

Auth tokens are read from environment variables whose *names* come from the
configuration; token values never live in config files.
"""
from __future__ import annotations

import logging
import os
import time
from typing import Callable, Sequence, TypeVar

import numpy as np
import requests

logger = logging.getLogger(__name__)

T = TypeVar("T")


class BackendError(RuntimeError):
    pass


def call_with_retries(fn: Callable[[], T], attempts: int = 3, backoff: float = 1.0,
                      what: str = "backend call") -> T:
    """Run ``fn`` up to ``attempts`` times, doubling the delay after each failure."""
    delay = backoff
    for attempt in range(1, attempts + 1):
        try:
            return fn()
        except Exception as exc:
            if attempt == attempts:
                raise BackendError(f"{what} failed after {attempts} attempts: {exc}") from exc
            logger.warning("%s failed (attempt %d/%d): %s; retrying in %.1fs",
                           what, attempt, attempts, exc, delay)
            time.sleep(delay)
            delay *= 2
    raise AssertionError("unreachable")


class HttpClient:
    def __init__(self, url: str, token_env: str | None = None, timeout: float = 60.0,
                 session: requests.Session | None = None):
        self.url = url
        self.token_env = token_env
        self.timeout = timeout
        self.session = session or requests.Session()

    def post(self, payload: dict) -> dict:
        headers = {"Content-Type": "application/json"}
        if self.token_env:
            token = os.environ.get(self.token_env)
            if token:
                headers["Authorization"] = f"Bearer {token}"
        resp = self.session.post(self.url, json=payload, headers=headers, timeout=self.timeout)
        resp.raise_for_status()
        return resp.json()


class HttpEmbedder:
    def __init__(self, client: HttpClient, model: str, dim: int, attempts: int = 3, backoff: float = 1.0):
        self.client = client
        self.model = model
        self.dim = dim
        self.attempts = attempts
        self.backoff = backoff

    def embed_many(self, texts: Sequence[str]) -> np.ndarray:
        data = call_with_retries(lambda: self.client.post({"input": list(texts), "model": self.model}),
                                 self.attempts, self.backoff, what="embedding request")
        vectors = np.asarray(data["vectors"], dtype=np.float64)
        if vectors.shape != (len(texts), self.dim):
            raise BackendError(f"embedding backend returned shape {vectors.shape}")
        return vectors

    def embed(self, text: str) -> np.ndarray:
        return self.embed_many([text])[0]


class HttpReranker:
    def __init__(self, client: HttpClient, attempts: int = 3, backoff: float = 1.0):
        self.client = client
        self.attempts = attempts
        self.backoff = backoff

    def score(self, query, passages):
        data = call_with_retries(
            lambda: self.client.post({"query": query, "passages": [p.text for p in passages]}),
            self.attempts, self.backoff, what="rerank request")
        return [float(s) for s in data["scores"]]


class HttpChatGenerator:
    """Chat-completion style text generation."""

    def __init__(self, client: HttpClient, model: str, temperature: float = 0.0,
                 system: str | None = None, attempts: int = 3, backoff: float = 1.0):
        self.client = client
        self.model = model
        self.temperature = temperature
        self.system = system
        self.attempts = attempts
        self.backoff = backoff

    @property
    def backend_id(self) -> str:
        return f"chat:{self.model}"

    def generate(self, prompt: str) -> str:
        messages = []
        if self.system:
            messages.append({"role": "system", "content": self.system})
        messages.append({"role": "user", "content": prompt})
        payload = {"model": self.model, "messages": messages, "temperature": self.temperature}
        data = call_with_retries(lambda: self.client.post(payload), self.attempts, self.backoff,
                                 what="generation request")
        return extract_completion_text(data)


def extract_completion_text(data: dict) -> str:
    """Pull generated text out of the common chat-completion response shapes."""
    if "choices" in data:
        choice = data["choices"][0]
        if "message" in choice:
            return choice["message"]["content"] or ""
        return choice.get("text", "")
    for key in ("text", "content", "output"):
        if key in data:
            return data[key]
    raise BackendError(f"no generated text in response keys {sorted(data)}")


class HttpPairScorer:
    """Served 4-way classifier: {"input": text} -> {"logits": [l0, l1, l2, l3]}."""

    def __init__(self, client: HttpClient, attempts: int = 3, backoff: float = 1.0):
        self.client = client
        self.attempts = attempts
        self.backoff = backoff

    def score(self, item, text: str) -> list[float]:
        data = call_with_retries(lambda: self.client.post({"input": text}), self.attempts, self.backoff,
                                 what="scoring request")
        logits = [float(x) for x in data["logits"]]
        if len(logits) != 4:
            raise BackendError(f"scorer returned {len(logits)} logits, expected 4")
        return logits
