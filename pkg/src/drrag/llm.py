"""Single-shot LLM completion backends and answer-line parsing."""

from __future__ import annotations

import hashlib
import json
import re
import threading
from dataclasses import dataclass
from pathlib import Path

import httpx

UNKNOWN_COMPLETION = "Answer: <UNKNOWN>"

_ANSWER_RE = re.compile(r"^\s*answer\s*:(.*)$", re.IGNORECASE)
_TRAILING_PUNCT = ";.,:!?"


class LLMTransportError(RuntimeError):
    """The completion backend failed, timed out or returned a non-2xx status."""


@dataclass(frozen=True)
class CompletionRequest:
    prompt: str
    max_tokens: int = 512
    temperature: float = 0.0

    def __post_init__(self):
        if not self.prompt:
            raise ValueError("prompt must be non-empty")


@dataclass(frozen=True)
class ParsedAnswer:
    raw_completion: str
    extracted: str
    parse_ok: bool


def parse_answer(completion: str) -> ParsedAnswer:
    """Pull the answer out of the last line starting with ``Answer:``.

    Angle-bracket wrapping and trailing punctuation are removed. Without a
    marker the whole trimmed completion is returned and ``parse_ok`` is False.
    """
    marker = None
    for line in completion.splitlines():
        m = _ANSWER_RE.match(line)
        if m:
            marker = m.group(1)
    if marker is None:
        return ParsedAnswer(completion, completion.strip(), False)
    value = marker.strip().rstrip(_TRAILING_PUNCT).strip()
    if value.startswith("<") and value.endswith(">"):
        value = value[1:-1].strip()
    value = value.rstrip(_TRAILING_PUNCT).strip()
    return ParsedAnswer(completion, value, True)


def prompt_sha256(prompt: str) -> str:
    return hashlib.sha256(prompt.encode("utf-8")).hexdigest()


class _CallCounter:
    def __init__(self):
        self._lock = threading.Lock()
        self.call_count = 0

    def _count(self) -> None:
        with self._lock:
            self.call_count += 1


class MockLLM(_CallCounter):
    """Deterministic fixture-backed completion.

    ``fixtures`` maps the SHA-256 of a prompt to its completion; any other
    prompt gets ``fallback``. ``responder``, when given, is consulted before
    the fallback and must itself be deterministic.
    """

    def __init__(self, fixtures: dict[str, str] | None = None,
                 fallback: str = UNKNOWN_COMPLETION, responder=None):
        super().__init__()
        self.fixtures = dict(fixtures or {})
        self.fallback = fallback
        self.responder = responder

    @classmethod
    def from_file(cls, path: str | Path) -> "MockLLM":
        fixtures = {}
        fallback = UNKNOWN_COMPLETION
        with Path(path).open(encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    record = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise ValueError(f"{path}:{lineno}: malformed fixture ({exc.msg})") from None
                if "fallback" in record:
                    fallback = record["fallback"]
                elif "prompt_sha256" in record and "completion" in record:
                    fixtures[record["prompt_sha256"]] = record["completion"]
                else:
                    raise ValueError(f"{path}:{lineno}: expected prompt_sha256/completion or fallback")
        return cls(fixtures, fallback)

    def complete(self, request: CompletionRequest) -> str:
        self._count()
        hit = self.fixtures.get(prompt_sha256(request.prompt))
        if hit is not None:
            return hit
        if self.responder is not None:
            out = self.responder(request.prompt)
            if out is not None:
                return out
        return self.fallback


class HTTPChatLLM(_CallCounter):
    """Chat-completion client: POST ``{"model", "messages", "temperature", "max_tokens"}``
    and read ``choices[0].message.content``.

    ``retries`` is 0 by default; attempts made for the most recent call on the
    current thread are exposed as ``last_attempts``.
    """

    def __init__(self, url: str, model: str = "default", timeout: float = 60.0,
                 max_in_flight: int = 4, retries: int = 0, api_key: str | None = None):
        super().__init__()
        self.url = url
        self.model = model
        self.timeout = timeout
        self.retries = retries
        self.api_key = api_key
        self._gate = threading.BoundedSemaphore(max_in_flight)
        self._local = threading.local()
        self._http = httpx.Client(timeout=timeout)

    @property
    def last_attempts(self) -> int:
        return getattr(self._local, "attempts", 0)

    def _post(self, request: CompletionRequest) -> str:
        body = {
            "model": self.model,
            "messages": [{"role": "user", "content": request.prompt}],
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        }
        headers = {"Authorization": f"Bearer {self.api_key}"} if self.api_key else {}
        with self._gate:
            try:
                resp = self._http.post(self.url, json=body, headers=headers)
            except httpx.TimeoutException as exc:
                raise LLMTransportError(f"LLM request timed out: {exc}") from exc
            except httpx.HTTPError as exc:
                raise LLMTransportError(f"LLM request failed: {exc}") from exc
        if not 200 <= resp.status_code < 300:
            raise LLMTransportError(f"LLM returned HTTP {resp.status_code}")
        try:
            return resp.json()["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise LLMTransportError(f"malformed LLM response: {resp.text[:200]!r}") from exc

    def complete(self, request: CompletionRequest) -> str:
        self._count()
        self._local.attempts = 0
        while True:
            self._local.attempts += 1
            try:
                return self._post(request)
            except LLMTransportError:
                if self._local.attempts > self.retries:
                    raise

    def close(self) -> None:
        self._http.close()


def complete(request: CompletionRequest, backend) -> str:
    return backend.complete(request)
