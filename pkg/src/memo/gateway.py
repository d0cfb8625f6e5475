"""Chat-completion gateway: one interface over HTTP endpoints and scripted mocks.

Every call is tagged by the pipeline step or protocol stage issuing it
and lands in the backend's audit log. Mock backends resolve requests
from a script (by exact prompt hash or by tag + per-tag ordinal), which
makes every downstream pipeline testable without live models.
"""

from __future__ import annotations

import hashlib
import json
import os
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import requests

RETRYABLE_STATUSES = frozenset({429, 500, 502, 503, 504})

API_KEY_ENV = "MEMO_API_KEY"
ENDPOINT_ENV = "MEMO_ENDPOINT"


class GatewayError(Exception):
    """Backend configuration or scripted-mock resolution failure."""


@dataclass(frozen=True)
class CompletionRequest:
    """One chat exchange with sampling parameters.

    ``tag`` identifies the pipeline step or protocol stage issuing the
    call; mock scripts and audit logs key on it.
    """

    messages: tuple[tuple[str, str], ...]
    temperature: float = 0.0
    max_output_tokens: int = 1024
    tag: str = ""

    def __post_init__(self):
        if not self.messages:
            raise GatewayError("request has no messages")
        object.__setattr__(self, "messages", tuple((r, c) for r, c in self.messages))
        for role, _ in self.messages:
            if role not in ("system", "user", "assistant"):
                raise GatewayError(f"unknown message role {role!r}")
        if self.messages[-1][0] != "user":
            raise GatewayError("last message must have role 'user'")
        if not 0.0 <= self.temperature <= 2.0:
            raise GatewayError(f"temperature {self.temperature} outside [0, 2]")
        if self.max_output_tokens <= 0:
            raise GatewayError("max_output_tokens must be positive")

    def prompt_hash(self) -> str:
        """SHA-256 over the role/content sequence; the exact-prompt matcher key."""
        digest = hashlib.sha256()
        for role, content in self.messages:
            digest.update(role.encode("utf-8"))
            digest.update(b"\x00")
            digest.update(content.encode("utf-8"))
            digest.update(b"\x00")
        return digest.hexdigest()

    @property
    def user_content(self) -> str:
        return self.messages[-1][1]


@dataclass(frozen=True)
class CompletionResponse:
    content: str
    finish_reason: str = "stop"  # stop | length | error
    usage: tuple[int, int] = (0, 0)  # (prompt_tokens, output_tokens)
    error: str | None = None
    attempts: int = 1

    @property
    def ok(self) -> bool:
        return self.finish_reason != "error"


@dataclass(frozen=True)
class AuditRecord:
    tag: str
    ordinal: int
    request: CompletionRequest
    response: CompletionResponse


class AuditLog:
    """Thread-safe append-only log of every completion call, in issue order."""

    def __init__(self):
        self._lock = threading.Lock()
        self._records: list[AuditRecord] = []
        self._per_tag: dict[str, int] = {}

    def append(self, request: CompletionRequest, response: CompletionResponse) -> AuditRecord:
        with self._lock:
            ordinal = self._per_tag.get(request.tag, 0)
            self._per_tag[request.tag] = ordinal + 1
            record = AuditRecord(request.tag, ordinal, request, response)
            self._records.append(record)
            return record

    def records(self, tag: str | None = None) -> list[AuditRecord]:
        with self._lock:
            if tag is None:
                return list(self._records)
            return [r for r in self._records if r.tag == tag]

    def __len__(self) -> int:
        with self._lock:
            return len(self._records)


@dataclass(frozen=True)
class RetryPolicy:
    max_attempts: int = 3
    base_delay: float = 0.5
    multiplier: float = 2.0

    def __post_init__(self):
        if self.max_attempts < 1:
            raise GatewayError("max_attempts must be >= 1")

    def delay(self, attempt: int) -> float:
        """Sleep before retry number ``attempt`` (0-based failure count)."""
        return self.base_delay * self.multiplier ** attempt


def with_retry(policy: RetryPolicy, call: Callable[[], CompletionResponse],
               sleep: Callable[[float], None] = time.sleep) -> CompletionResponse:
    """Run ``call`` under the retry policy.

    Retries only transport errors and retryable HTTP statuses (429, 5xx);
    the delay schedule is base_delay * multiplier**k. Exhaustion returns
    the last error response annotated with the attempt count.
    """
    last: CompletionResponse | None = None
    for attempt in range(policy.max_attempts):
        result = call()
        if result.finish_reason != "error" or not getattr(result, "retryable", False):
            return CompletionResponse(
                content=result.content, finish_reason=result.finish_reason,
                usage=result.usage, error=result.error, attempts=attempt + 1,
            )
        last = result
        if attempt + 1 < policy.max_attempts:
            sleep(policy.delay(attempt))
    assert last is not None
    return CompletionResponse(
        content=last.content, finish_reason="error", usage=last.usage,
        error=f"{last.error} (after {policy.max_attempts} attempts)",
        attempts=policy.max_attempts,
    )


@dataclass(frozen=True)
class _Attempt(CompletionResponse):
    """Single-attempt result carrying whether a retry may help."""

    retryable: bool = False


class MockScriptError(GatewayError):
    """Strict mock received a request with no matching entry."""


@dataclass
class MockScript:
    """Scripted responses keyed by tag + per-tag ordinal or exact prompt hash.

    In strict mode every issued request must match exactly one entry;
    fallthrough mode answers misses with the default response.
    """

    by_tag_ordinal: dict[tuple[str, int], str] = field(default_factory=dict)
    by_prompt_hash: dict[str, str] = field(default_factory=dict)
    strict: bool = True
    default_response: str = ""

    @classmethod
    def from_entries(cls, entries: Sequence[dict], strict: bool = True,
                     default_response: str = "") -> "MockScript":
        script = cls(strict=strict, default_response=default_response)
        for entry in entries:
            if "prompt_sha256" in entry:
                script.by_prompt_hash[entry["prompt_sha256"]] = entry["response"]
            else:
                key = (entry["tag"], int(entry.get("ordinal", 0)))
                if key in script.by_tag_ordinal:
                    raise MockScriptError(f"duplicate script entry for tag {key[0]!r} ordinal {key[1]}")
                script.by_tag_ordinal[key] = entry["response"]
        return script

    @classmethod
    def load_jsonl(cls, path: str, strict: bool = True, default_response: str = "") -> "MockScript":
        entries = []
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    entries.append(json.loads(line))
        return cls.from_entries(entries, strict=strict, default_response=default_response)


class MockBackend:
    """Deterministic scripted backend with one atomic ordinal counter per tag."""

    name = "mock"

    def __init__(self, script: MockScript):
        self.script = script
        self.audit = AuditLog()
        self._lock = threading.Lock()
        self._counters: dict[str, int] = {}

    def _next_ordinal(self, tag: str) -> int:
        with self._lock:
            ordinal = self._counters.get(tag, 0)
            self._counters[tag] = ordinal + 1
            return ordinal

    def complete(self, request: CompletionRequest) -> CompletionResponse:
        ordinal = self._next_ordinal(request.tag)
        text = self.script.by_prompt_hash.get(request.prompt_hash())
        if text is None:
            text = self.script.by_tag_ordinal.get((request.tag, ordinal))
        if text is None:
            if self.script.strict:
                response = CompletionResponse(
                    content="", finish_reason="error",
                    error=f"unmatched mock request: tag {request.tag!r} ordinal {ordinal}",
                )
                self.audit.append(request, response)
                return response
            text = self.script.default_response
        response = CompletionResponse(
            content=text,
            finish_reason="stop",
            usage=(sum(len(c.split()) for _, c in request.messages), len(text.split())),
        )
        self.audit.append(request, response)
        return response


class HttpBackend:
    """Chat-completions client: POST <base>/v1/chat/completions.

    Credentials come from ``api_key`` or the MEMO_API_KEY environment
    variable; the base URL from ``base_url`` or MEMO_ENDPOINT. ``sleep``
    is injectable so retry schedules are testable without waiting.
    """

    name = "http"

    def __init__(self, base_url: str | None = None, model: str = "default",
                 api_key: str | None = None, retry: RetryPolicy | None = None,
                 timeout: float = 120.0, sleep: Callable[[float], None] = time.sleep,
                 session: requests.Session | None = None):
        base_url = base_url or os.environ.get(ENDPOINT_ENV)
        if not base_url:
            raise GatewayError("no endpoint configured (pass base_url or set MEMO_ENDPOINT)")
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV, "")
        self.retry = retry or RetryPolicy()
        self.timeout = timeout
        self.sleep = sleep
        self.session = session or requests.Session()
        self.audit = AuditLog()

    def _attempt(self, request: CompletionRequest) -> _Attempt:
        body = {
            "model": self.model,
            "messages": [{"role": r, "content": c} for r, c in request.messages],
            "temperature": request.temperature,
            "max_tokens": request.max_output_tokens,
        }
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        try:
            resp = self.session.post(
                f"{self.base_url}/v1/chat/completions",
                json=body, headers=headers, timeout=self.timeout,
            )
        except requests.RequestException as exc:
            return _Attempt(content="", finish_reason="error",
                            error=f"transport failure: {exc}", retryable=True)
        if resp.status_code != 200:
            return _Attempt(content="", finish_reason="error",
                            error=f"status {resp.status_code}",
                            retryable=resp.status_code in RETRYABLE_STATUSES)
        try:
            payload = resp.json()
            choice = payload["choices"][0]
            content = choice["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            return _Attempt(content="", finish_reason="error",
                            error=f"malformed response body: {exc}", retryable=False)
        finish = choice.get("finish_reason", "stop")
        usage = payload.get("usage", {})
        return _Attempt(
            content=content,
            finish_reason="length" if finish == "length" else "stop",
            usage=(int(usage.get("prompt_tokens", 0)), int(usage.get("completion_tokens", 0))),
        )

    def complete(self, request: CompletionRequest) -> CompletionResponse:
        response = with_retry(self.retry, lambda: self._attempt(request), sleep=self.sleep)
        self.audit.append(request, response)
        return response


def complete(backend, request: CompletionRequest) -> CompletionResponse:
    """Issue one chat-completion call against any configured backend."""
    return backend.complete(request)
