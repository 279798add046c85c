"""Backend contract for every model call in the pipeline.

One interface serves all five roles (reasoner, generator, judge, checker,
answerer): a scripted mock for deterministic tests, a callable shim for
programmatic stubs, and an OpenAI-compatible HTTP client with retries and
bounded concurrency for real endpoints.
"""

from __future__ import annotations

import math
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import requests as _requests
import yaml

from .corpus import whitespace_token_counter

Message = tuple[str, str]  # (role, text)

API_KEY_ENV = "LLM_API_KEY"


class BackendError(Exception):
    """Transport failure, bad status, or response schema mismatch."""


@dataclass
class GenerationRequest:
    messages: list[Message]
    temperature: float = 0.4
    max_new_tokens: int = 1024
    seed: int | None = None
    assistant_prefix: str | None = None

    def validate(self) -> None:
        if not self.messages:
            raise BackendError("request has no messages")
        if not math.isfinite(self.temperature) or not 0.0 <= self.temperature <= 2.0:
            raise BackendError(f"temperature out of range: {self.temperature}")
        if self.max_new_tokens < 1:
            raise BackendError(f"max_new_tokens must be positive: {self.max_new_tokens}")

    def prompt_text(self) -> str:
        parts = [text for _, text in self.messages]
        if self.assistant_prefix:
            parts.append(self.assistant_prefix)
        return "\n".join(parts)


@dataclass
class GenerationResult:
    text: str
    prompt_tokens: int = 0
    output_tokens: int = 0
    backend_id: str = ""
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None


@dataclass
class RetryPolicy:
    max_attempts: int = 3
    base_backoff_ms: int = 200


@dataclass
class BackendConfig:
    kind: str  # "mock" | "http"
    model_name: str = ""
    base_url: str | None = None
    max_concurrency: int = 4
    retry: RetryPolicy = field(default_factory=RetryPolicy)
    timeout_ms: int = 30000
    script_path: str | None = None
    supports_prefill: bool = True

    def validate(self) -> None:
        if self.kind not in ("mock", "http"):
            raise BackendError(f"unknown backend kind: {self.kind!r}")
        if self.kind == "http" and not self.base_url:
            raise BackendError("http backend requires base_url")
        if self.max_concurrency < 1:
            raise BackendError("max_concurrency must be >= 1")


class Backend:
    """Minimal surface shared by all backends."""

    backend_id: str = "backend"
    max_concurrency: int = 1

    def generate(self, request: GenerationRequest) -> GenerationResult:
        raise NotImplementedError


class MockBackend(Backend):
    """Scripted backend: ordered (pattern, response) rules, first match wins.

    A pattern matches when it is the wildcard ``*`` or a substring of the
    request's concatenated message text (assistant prefix included). Output
    depends only on the script and the request, so runs are bit-identical.
    Records every request for call-graph assertions; ``delay_s`` holds each
    call open to make concurrency observable.
    """

    def __init__(
        self,
        script: Sequence[tuple[str, str]] | dict[str, str],
        model_name: str = "mock",
        max_concurrency: int = 4,
        delay_s: float = 0.0,
    ):
        if isinstance(script, dict):
            script = list(script.items())
        self.script = list(script)
        self.backend_id = f"mock:{model_name}"
        self.max_concurrency = max_concurrency
        self.delay_s = delay_s
        self.calls: list[GenerationRequest] = []
        self.peak_in_flight = 0
        self._in_flight = 0
        self._lock = threading.Lock()

    @classmethod
    def from_file(cls, path: str | Path, **kwargs) -> "MockBackend":
        """Load a script file: a YAML list of {pattern, response} entries."""
        data = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
        if isinstance(data, dict):
            rules = list(data.items())
        else:
            rules = [(entry["pattern"], entry["response"]) for entry in data or []]
        return cls(rules, **kwargs)

    def generate(self, request: GenerationRequest) -> GenerationResult:
        request.validate()
        with self._lock:
            self.calls.append(request)
            self._in_flight += 1
            self.peak_in_flight = max(self.peak_in_flight, self._in_flight)
        try:
            if self.delay_s:
                time.sleep(self.delay_s)
            haystack = request.prompt_text()
            for pattern, response in self.script:
                if pattern == "*" or pattern in haystack:
                    return GenerationResult(
                        text=response,
                        prompt_tokens=whitespace_token_counter(haystack),
                        output_tokens=whitespace_token_counter(response),
                        backend_id=self.backend_id,
                    )
            raise BackendError(f"no scripted response matches request ({self.backend_id})")
        finally:
            with self._lock:
                self._in_flight -= 1


class CallableBackend(Backend):
    """Backend backed by a plain function, for rule-based stubs in tests."""

    def __init__(self, fn: Callable[[GenerationRequest], str], backend_id: str = "callable"):
        self.fn = fn
        self.backend_id = backend_id
        self.max_concurrency = 4
        self.calls: list[GenerationRequest] = []
        self._lock = threading.Lock()

    def generate(self, request: GenerationRequest) -> GenerationResult:
        request.validate()
        with self._lock:
            self.calls.append(request)
        text = self.fn(request)
        return GenerationResult(
            text=text,
            prompt_tokens=whitespace_token_counter(request.prompt_text()),
            output_tokens=whitespace_token_counter(text),
            backend_id=self.backend_id,
        )


class HttpBackend(Backend):
    """OpenAI-compatible chat-completions client.

    Retries transport errors, timeouts, and 5xx responses with exponential
    backoff; other statuses fail immediately. A semaphore caps in-flight
    requests at the configured concurrency no matter how many threads share
    the backend. Auth is a bearer token from the LLM_API_KEY environment
    variable, never from config files.

    When the endpoint supports assistant prefill, the prefix is sent as a
    trailing assistant turn and the model continues it; otherwise the prefix
    is folded into the final user message and the backend id is flagged with
    ``+prefix-in-prompt`` so downstream reports can tell the two apart.
    """

    def __init__(self, config: BackendConfig, session: _requests.Session | None = None, sleep=time.sleep):
        config.validate()
        if config.kind != "http":
            raise BackendError("HttpBackend requires kind='http'")
        self.config = config
        self.backend_id = f"http:{config.model_name}"
        if not config.supports_prefill:
            self.backend_id += "+prefix-in-prompt"
        self.max_concurrency = config.max_concurrency
        self._session = session or _requests.Session()
        self._sleep = sleep
        self._semaphore = threading.BoundedSemaphore(config.max_concurrency)

    def _build_payload(self, request: GenerationRequest) -> dict:
        messages = [{"role": role, "content": text} for role, text in request.messages]
        if request.assistant_prefix is not None:
            if self.config.supports_prefill:
                messages.append({"role": "assistant", "content": request.assistant_prefix})
            else:
                messages[-1]["content"] += (
                    "\n\nTreat the following as reasoning you have already done:\n"
                    + request.assistant_prefix
                )
        payload = {
            "model": self.config.model_name,
            "messages": messages,
            "temperature": request.temperature,
            "max_tokens": request.max_new_tokens,
        }
        if request.seed is not None:
            payload["seed"] = request.seed
        return payload

    def generate(self, request: GenerationRequest) -> GenerationResult:
        request.validate()
        url = self.config.base_url.rstrip("/") + "/chat/completions"
        headers = {"Content-Type": "application/json"}
        api_key = os.environ.get(API_KEY_ENV)
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        payload = self._build_payload(request)
        timeout = self.config.timeout_ms / 1000.0
        attempts = max(1, self.config.retry.max_attempts)
        last_error = ""
        with self._semaphore:
            for attempt in range(1, attempts + 1):
                try:
                    response = self._session.post(url, json=payload, headers=headers, timeout=timeout)
                except _requests.RequestException as exc:
                    last_error = f"transport error: {exc}"
                else:
                    if response.status_code == 200:
                        return self._parse_response(response)
                    last_error = f"status {response.status_code}: {response.text[:200]}"
                    if response.status_code < 500:
                        raise BackendError(last_error)
                if attempt < attempts:
                    self._sleep(self.config.retry.base_backoff_ms * (2 ** (attempt - 1)) / 1000.0)
        raise BackendError(f"request failed after {attempts} attempts: {last_error}")

    def _parse_response(self, response: _requests.Response) -> GenerationResult:
        try:
            body = response.json()
            text = body["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise BackendError(f"response schema mismatch: {exc}") from exc
        usage = body.get("usage") or {}
        return GenerationResult(
            text=text,
            prompt_tokens=int(usage.get("prompt_tokens", 0)),
            output_tokens=int(usage.get("completion_tokens", 0)),
            backend_id=self.backend_id,
        )


def make_backend(config: BackendConfig) -> Backend:
    config.validate()
    if config.kind == "mock":
        if not config.script_path:
            raise BackendError("mock backend requires script_path")
        return MockBackend.from_file(
            config.script_path,
            model_name=config.model_name or "mock",
            max_concurrency=config.max_concurrency,
        )
    return HttpBackend(config)


def generate(request: GenerationRequest, backend: Backend) -> GenerationResult:
    """Single call; raises BackendError on failure."""
    return backend.generate(request)


def generate_batch(requests: Sequence[GenerationRequest], backend: Backend) -> list[GenerationResult]:
    """Run requests through the backend, order-preserving.

    Failures never abort the batch: a failed slot carries its error in the
    result so the caller can decide. In-flight work is bounded by the
    backend's max_concurrency.
    """
    if not requests:
        return []

    def run_one(request: GenerationRequest) -> GenerationResult:
        try:
            return backend.generate(request)
        except Exception as exc:
            return GenerationResult(text="", backend_id=backend.backend_id, error=str(exc))

    workers = min(len(requests), max(1, backend.max_concurrency))
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run_one, requests))
