"""Clients for external text generation and text embedding.

Two implementations share one interface:

  * :class:`HttpLLMClient` speaks the OpenAI-compatible chat-completions and
    embeddings JSON protocol over HTTP, with bounded retries, exponential
    backoff, and a semaphore capping concurrent in-flight requests.
  * :class:`MockLLMClient` is a pure function of (request, seed): generation
    fills a fixed description template from fields it parses out of the
    prompt, and embeddings are hashed bags of tokens mapped to unit-norm
    vectors.  Identical requests give byte-identical outputs across processes.

Endpoint and API key fall back to the ``RAGREC_LLM_ENDPOINT`` /
``RAGREC_LLM_API_KEY`` environment variables.  All traffic can be appended to
a JSON-lines audit file.
"""
from __future__ import annotations

import hashlib
import json
import os
import re
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import httpx
import numpy as np

from .errors import ContentError, ContractError, StatusError, TransportError


@dataclass(frozen=True)
class GenRequest:
    system_prompt: str
    user_prompt: str
    max_tokens: int = 256
    temperature: float = 0.0

    def __post_init__(self):
        if not self.system_prompt or not self.user_prompt:
            raise ContractError("prompts must be nonempty")
        if self.max_tokens < 1:
            raise ContractError(f"max_tokens must be >= 1, got {self.max_tokens}")
        if self.temperature < 0:
            raise ContractError(f"temperature must be >= 0, got {self.temperature}")


@dataclass(frozen=True)
class EmbedRequest:
    text: str
    model_tag: str = "default"

    def __post_init__(self):
        if not self.text:
            raise ContractError("embed text must be nonempty")


@dataclass(frozen=True)
class GenResult:
    text: str
    # top log-probabilities of the first generated token, when the endpoint
    # reports them; None otherwise
    first_token_top_logprobs: dict[str, float] | None = None


@dataclass(frozen=True)
class RetryPolicy:
    max_attempts: int = 3
    backoff_base: float = 0.5

    def __post_init__(self):
        if self.max_attempts < 1:
            raise ContractError(f"max_attempts must be >= 1, got {self.max_attempts}")


def backoff_schedule(policy: RetryPolicy) -> list[float]:
    """Sleep durations between attempts; nondecreasing by construction."""
    return [policy.backoff_base * (2.0**i) for i in range(policy.max_attempts - 1)]


@dataclass
class ClientConfig:
    endpoint: str = ""
    api_key: str = ""
    gen_model: str = "default-gen"
    embed_model: str = "default-embed"
    embed_dim: int = 32
    timeout: float = 30.0
    retry: RetryPolicy = field(default_factory=RetryPolicy)
    max_in_flight: int = 4
    audit_path: str = ""
    seed: int = 0

    def __post_init__(self):
        if self.timeout <= 0:
            raise ContractError(f"timeout must be > 0, got {self.timeout}")
        if not self.endpoint:
            self.endpoint = os.environ.get("RAGREC_LLM_ENDPOINT", "")
        if not self.api_key:
            self.api_key = os.environ.get("RAGREC_LLM_API_KEY", "")


class _AuditLog:
    def __init__(self, path: str):
        self._path = Path(path) if path else None
        self._lock = threading.Lock()

    def record(self, kind: str, request: dict, response: dict | None, error: str | None = None):
        if self._path is None:
            return
        entry = {"kind": kind, "request": request, "response": response}
        if error is not None:
            entry["error"] = error
        line = json.dumps(entry, sort_keys=True)
        with self._lock:
            with open(self._path, "a", encoding="utf-8") as fh:
                fh.write(line + "\n")


class LLMClient:
    """Interface shared by the HTTP and mock implementations."""

    config: ClientConfig

    def generate(self, req: GenRequest) -> str:
        return self.generate_detailed(req).text

    def generate_detailed(self, req: GenRequest) -> GenResult:
        raise NotImplementedError

    def embed_text(self, req: EmbedRequest) -> np.ndarray:
        raise NotImplementedError


class HttpLLMClient(LLMClient):
    """OpenAI-compatible JSON-over-HTTP client.

    A transport can be injected for tests; by default httpx's network
    transport is used.  Retries cover network failures, 429, and 5xx; other
    non-2xx statuses fail immediately.
    """

    def __init__(self, config: ClientConfig, transport: httpx.BaseTransport | None = None):
        self.config = config
        if not config.endpoint:
            raise ContractError("HTTP client requires an endpoint (config or RAGREC_LLM_ENDPOINT)")
        headers = {"Content-Type": "application/json"}
        if config.api_key:
            headers["Authorization"] = f"Bearer {config.api_key}"
        self._http = httpx.Client(
            base_url=config.endpoint.rstrip("/"),
            headers=headers,
            timeout=config.timeout,
            transport=transport,
        )
        self._gate = threading.BoundedSemaphore(config.max_in_flight)
        self._audit = _AuditLog(config.audit_path)

    def _post(self, path: str, payload: dict) -> dict:
        schedule = backoff_schedule(self.config.retry)
        attempts = self.config.retry.max_attempts
        last_error: Exception | None = None
        for attempt in range(attempts):
            try:
                with self._gate:
                    resp = self._http.post(path, json=payload)
            except httpx.TransportError as exc:
                last_error = exc
                if attempt < attempts - 1:
                    time.sleep(schedule[attempt])
                continue
            if resp.status_code // 100 == 2:
                return resp.json()
            excerpt = resp.text[:200]
            if resp.status_code == 429 or resp.status_code >= 500:
                last_error = StatusError(resp.status_code, excerpt)
                if attempt < attempts - 1:
                    time.sleep(schedule[attempt])
                continue
            raise StatusError(resp.status_code, excerpt)
        if isinstance(last_error, StatusError):
            raise last_error
        raise TransportError(f"{path}: transport failure after {attempts} attempts: {last_error}")

    def generate_detailed(self, req: GenRequest) -> GenResult:
        payload = {
            "model": self.config.gen_model,
            "messages": [
                {"role": "system", "content": req.system_prompt},
                {"role": "user", "content": req.user_prompt},
            ],
            "max_tokens": req.max_tokens,
            "temperature": req.temperature,
            "logprobs": True,
            "top_logprobs": 5,
        }
        try:
            data = self._post("/chat/completions", payload)
        except (StatusError, TransportError) as exc:
            self._audit.record("generate", payload, None, error=str(exc))
            raise
        self._audit.record("generate", payload, data)
        try:
            choice = data["choices"][0]
            text = choice["message"]["content"]
        except (KeyError, IndexError, TypeError):
            raise ContentError(f"malformed completion payload: {str(data)[:200]}") from None
        if not text:
            raise ContentError("empty completion")
        top = None
        logprobs = choice.get("logprobs") or {}
        content = logprobs.get("content") or []
        if content:
            entries = content[0].get("top_logprobs") or []
            if entries:
                top = {e["token"]: float(e["logprob"]) for e in entries}
        return GenResult(text=text, first_token_top_logprobs=top)

    def embed_text(self, req: EmbedRequest) -> np.ndarray:
        payload = {"model": self.config.embed_model, "input": req.text}
        try:
            data = self._post("/embeddings", payload)
        except (StatusError, TransportError) as exc:
            self._audit.record("embed", payload, None, error=str(exc))
            raise
        self._audit.record("embed", payload, {"data": "<omitted>"})
        try:
            vector = np.asarray(data["data"][0]["embedding"], dtype=np.float64)
        except (KeyError, IndexError, TypeError):
            raise ContentError(f"malformed embedding payload: {str(data)[:200]}") from None
        if vector.shape != (self.config.embed_dim,):
            raise ContractError(
                f"embedding dimension {vector.shape} does not match declared ({self.config.embed_dim},)"
            )
        return vector

    def close(self):
        self._http.close()


_TITLE_RE = re.compile(r"^Title:\s*(.+)$", re.MULTILINE)
_ATTR_RE = re.compile(r"^([A-Za-z_][A-Za-z0-9_]*):\s*(.+)$", re.MULTILINE)
_TOKEN_RE = re.compile(r"[a-z0-9]+")


def _hash_seed(*parts: str) -> int:
    digest = hashlib.blake2b("\x1f".join(parts).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


class MockLLMClient(LLMClient):
    """Deterministic offline stand-in for the HTTP client.

    Generation: a describe-style prompt (one containing a ``Title:`` line)
    yields "Description of {title}: a {genre} item about {keywords}."; a
    yes/no question yields "Yes" or "No" by prompt hash.  Embeddings: each
    lowercase token maps to a fixed pseudo-random unit vector; the text
    embedding is the normalized token sum plus a small whole-text component,
    so texts sharing vocabulary are close while distinct texts never collide.
    """

    def __init__(self, config: ClientConfig | None = None):
        self.config = config or ClientConfig(endpoint="mock://local")
        self.n_generate_calls = 0
        self.n_embed_calls = 0
        self._audit = _AuditLog(self.config.audit_path)

    def generate_detailed(self, req: GenRequest) -> GenResult:
        self.n_generate_calls += 1
        title_match = _TITLE_RE.search(req.user_prompt)
        if title_match:
            title = title_match.group(1).strip()
            attrs = {
                key.lower(): value.strip()
                for key, value in _ATTR_RE.findall(req.user_prompt)
                if key.lower() not in ("title",)
            }
            genre = attrs.get("genre", "general")
            keywords = ", ".join(v for k, v in sorted(attrs.items()) if k != "genre") or title
            text = f"Description of {title}: a {genre} item about {keywords}."
        elif '"Yes"' in req.user_prompt or "Yes or No" in req.user_prompt:
            bit = _hash_seed(str(self.config.seed), "yesno", req.user_prompt) & 1
            text = "Yes" if bit else "No"
        else:
            text = f"Echo: {req.user_prompt[:120]}"
        self._audit.record("generate", {"user_prompt": req.user_prompt}, {"text": text})
        return GenResult(text=text, first_token_top_logprobs=None)

    def embed_text(self, req: EmbedRequest) -> np.ndarray:
        self.n_embed_calls += 1
        dim = self.config.embed_dim
        tokens = _TOKEN_RE.findall(req.text.lower())
        acc = np.zeros(dim, dtype=np.float64)
        for token in tokens:
            acc += _unit_vector(dim, str(self.config.seed), req.model_tag, "tok", token)
        acc += 0.5 * _unit_vector(dim, str(self.config.seed), req.model_tag, "txt", req.text)
        norm = float(np.linalg.norm(acc))
        if norm == 0.0:
            raise ContentError(f"mock embedding degenerate for text {req.text!r}")
        vector = acc / norm
        self._audit.record("embed", {"text": req.text}, {"dim": dim})
        return vector


def _unit_vector(dim: int, *parts: str) -> np.ndarray:
    rng = np.random.default_rng(_hash_seed(*parts))
    v = rng.standard_normal(dim)
    return v / np.linalg.norm(v)


def make_client(config: ClientConfig, mode: str = "mock",
                transport: httpx.BaseTransport | None = None) -> LLMClient:
    if mode == "mock":
        return MockLLMClient(config)
    if mode == "http":
        return HttpLLMClient(config, transport=transport)
    raise ContractError(f"unknown client mode {mode!r}")
