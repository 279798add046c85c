"""HTTP scoring service for the trace reward.

Exposes `POST /score` and `GET /healthz` so an external RL trainer can score
trace samples without importing this package. Built on the stdlib threading
HTTP server; scoring is stateless per request, so concurrency is bounded only
by the judge backend.
"""

from __future__ import annotations

import json
import logging
import threading
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

from .llm import Backend, BackendError
from .prompts import PromptLibrary
from .reward import QaReference, RewardError, extract_reference_qa, reward_score
from .trace import ReasoningTrace, TraceFormat, parse_trace

log = logging.getLogger(__name__)


class StoreError(Exception):
    pass


@dataclass
class _GoldEntry:
    description: str
    character: str = ""
    book: str = ""


@dataclass
class ReferenceStore:
    """task_id -> reference QA pairs, either given directly or extracted from a
    gold description on first use."""

    references: dict[str, QaReference] = field(default_factory=dict)
    golds: dict[str, _GoldEntry] = field(default_factory=dict)

    @classmethod
    def from_file(cls, path: str | Path) -> "ReferenceStore":
        """One record per line: {task_id, qa: [{q, a}, ...]} or
        {task_id, gold_description, character?, book?}."""
        store = cls()
        path = Path(path)
        with path.open(encoding="utf-8") as handle:
            for lineno, line in enumerate(handle, start=1):
                if not line.strip():
                    continue
                try:
                    record = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise StoreError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
                task_id = record.get("task_id")
                if not isinstance(task_id, str) or not task_id:
                    raise StoreError(f"{path}:{lineno}: missing task_id")
                if task_id in store.references or task_id in store.golds:
                    raise StoreError(f"{path}:{lineno}: duplicate task_id {task_id!r}")
                if "qa" in record:
                    pairs = [(item["q"], item["a"]) for item in record["qa"]]
                    store.references[task_id] = QaReference(items=pairs, source_task_id=task_id)
                elif "gold_description" in record:
                    store.golds[task_id] = _GoldEntry(
                        description=record["gold_description"],
                        character=record.get("character", ""),
                        book=record.get("book", ""),
                    )
                else:
                    raise StoreError(f"{path}:{lineno}: record needs 'qa' or 'gold_description'")
        return store

    def known(self, task_id: str) -> bool:
        return task_id in self.references or task_id in self.golds

    def resolve(self, task_id: str, judge: Backend, prompts: PromptLibrary) -> QaReference:
        if task_id in self.references:
            return self.references[task_id]
        if task_id not in self.golds:
            raise KeyError(task_id)
        gold = self.golds[task_id]
        reference = extract_reference_qa(
            gold.description, judge,
            character=gold.character, book_title=gold.book, task_id=task_id, prompts=prompts,
        )
        self.references[task_id] = reference
        return reference


def _parse_format(flags: object) -> TraceFormat:
    if flags is None:
        return TraceFormat()
    if not isinstance(flags, dict):
        raise ValueError("'format' must be an object of boolean flags")
    known = {"include_explanation", "include_type", "include_answer"}
    unknown = set(flags) - known
    if unknown:
        raise ValueError(f"unknown format flags: {sorted(unknown)}")
    for key, value in flags.items():
        if not isinstance(value, bool):
            raise ValueError(f"format flag {key!r} must be a boolean")
    return TraceFormat(**flags)


class RewardService:
    """Request handling separated from HTTP plumbing so it can be unit-tested
    as plain dict-in, (status, dict)-out calls."""

    def __init__(self, store: ReferenceStore, judge: Backend, prompts: PromptLibrary | None = None):
        self.store = store
        self.judge = judge
        self.prompts = prompts or PromptLibrary()
        self._lock = threading.Lock()

    def _resolve_reference(self, body: dict) -> tuple[int, dict] | QaReference:
        task_id = body.get("task_id")
        gold = body.get("gold_description")
        if task_id is not None:
            if not isinstance(task_id, str):
                return 400, {"error": "task_id must be a string"}
            if not self.store.known(task_id):
                return 400, {"error": f"unknown task_id {task_id!r}"}
            try:
                # Lock only the lazy-extraction path; plain lookups are benign.
                with self._lock:
                    return self.store.resolve(task_id, self.judge, self.prompts)
            except RewardError as exc:
                return 422, {"error": str(exc)}
            except BackendError as exc:
                return 502, {"error": f"judge backend failure: {exc}"}
        if gold is not None:
            if not isinstance(gold, str):
                return 400, {"error": "gold_description must be a string"}
            try:
                return extract_reference_qa(
                    gold, self.judge,
                    character=body.get("character", ""),
                    book_title=body.get("book", ""),
                    prompts=self.prompts,
                )
            except RewardError as exc:
                return 422, {"error": str(exc)}
            except BackendError as exc:
                return 502, {"error": f"judge backend failure: {exc}"}
        return 400, {"error": "request needs task_id or gold_description"}

    def score(self, body: object) -> tuple[int, dict]:
        if not isinstance(body, dict):
            return 400, {"error": "request body must be a JSON object"}
        trace_text = body.get("trace_text")
        if not isinstance(trace_text, str):
            return 400, {"error": "trace_text must be a string"}
        try:
            fmt = _parse_format(body.get("format"))
        except ValueError as exc:
            return 400, {"error": str(exc)}
        if not fmt.include_answer:
            return 400, {"error": "a trace format without answers cannot be reward-scored"}

        resolved = self._resolve_reference(body)
        if isinstance(resolved, tuple):
            return resolved
        reference = resolved

        fragment = parse_trace(trace_text, fmt)
        trace = ReasoningTrace(items=fragment.items, warnings=list(fragment.warnings))
        try:
            score = reward_score(trace, reference, self.judge, prompts=self.prompts)
        except RewardError as exc:
            message = str(exc)
            if "backend failure" in message:
                return 502, {"error": message}
            return 422, {"error": message}
        except BackendError as exc:
            return 502, {"error": f"judge backend failure: {exc}"}
        return 200, {
            "precision": score.precision,
            "recall": score.recall,
            "f1": score.f1,
            "verified_generated": score.verified_generated,
            "verified_reference": score.verified_reference,
            "num_trace_items": len(trace),
            "num_reference_items": len(reference),
            "parse_warnings": list(fragment.warnings),
        }

    def health(self) -> tuple[int, dict]:
        return 200, {"status": "ok"}


def _make_handler(service: RewardService) -> type[BaseHTTPRequestHandler]:
    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"

        def _send(self, status: int, payload: dict) -> None:
            body = json.dumps(payload).encode("utf-8")
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

        def do_GET(self) -> None:  # noqa: N802 (stdlib handler API)
            if self.path == "/healthz":
                self._send(*service.health())
            else:
                self._send(404, {"error": f"no such path {self.path}"})

        def do_POST(self) -> None:  # noqa: N802
            if self.path != "/score":
                self._send(404, {"error": f"no such path {self.path}"})
                return
            length = int(self.headers.get("Content-Length") or 0)
            raw = self.rfile.read(length)
            try:
                body = json.loads(raw.decode("utf-8"))
            except (UnicodeDecodeError, json.JSONDecodeError):
                self._send(400, {"error": "request body must be valid JSON"})
                return
            try:
                self._send(*service.score(body))
            except Exception as exc:  # pragma: no cover - last-resort guard
                log.exception("unhandled error while scoring")
                self._send(500, {"error": f"internal error: {exc}"})

        def log_message(self, fmt: str, *args) -> None:
            log.debug("%s - %s", self.address_string(), fmt % args)

    return Handler


def make_server(host: str, port: int, service: RewardService) -> ThreadingHTTPServer:
    """Bind and return the server without starting it; port 0 picks a free port."""
    return ThreadingHTTPServer((host, port), _make_handler(service))


def serve_reward(
    bind_address: str,
    judge: Backend,
    store: ReferenceStore,
    prompts: PromptLibrary | None = None,
) -> None:
    """Serve until interrupted. bind_address is host:port."""
    host, _, port_text = bind_address.rpartition(":")
    if not host or not port_text.isdigit():
        raise ValueError(f"bind address must be host:port, got {bind_address!r}")
    service = RewardService(store, judge, prompts)
    server = make_server(host, int(port_text), service)
    actual_host, actual_port = server.server_address[:2]
    log.info("reward service listening on %s:%d", actual_host, actual_port)
    try:
        server.serve_forever()
    except KeyboardInterrupt:  # pragma: no cover - interactive shutdown
        pass
    finally:
        server.server_close()
