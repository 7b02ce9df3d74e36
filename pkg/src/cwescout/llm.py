"""Chat-completion providers, cassette record/replay and structured output extraction."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import random
import re
import threading
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import requests

from .serialize import atomic_write, dumps

log = logging.getLogger(__name__)

__all__ = [
    "CASSETTE_VERSION",
    "Cassette",
    "CassetteError",
    "CassetteExhausted",
    "CassetteMismatch",
    "ChatMessage",
    "ChatProvider",
    "GenerationParams",
    "HttpChatProvider",
    "LLMError",
    "MalformedBlock",
    "NoStructuredBlock",
    "ProviderError",
    "ProviderRefusal",
    "RateLimited",
    "RecordingProvider",
    "ReplayProvider",
    "ScriptedProvider",
    "StructuredBlockError",
    "Transcript",
    "TransportError",
    "extract_structured_block",
    "request_hash",
]

CASSETTE_VERSION = 1
ROLES = ("system", "user", "assistant")


class LLMError(Exception):
    pass


class ProviderError(LLMError):
    """A provider could not produce a completion. Agents fall back on these."""


class TransportError(ProviderError):
    pass


class RateLimited(ProviderError):
    pass


class ProviderRefusal(ProviderError):
    pass


class CassetteError(LLMError):
    """Replay contract broken; never swallowed by agent fallbacks."""


class CassetteMismatch(CassetteError):
    pass


class CassetteExhausted(CassetteError):
    pass


class StructuredBlockError(ValueError):
    pass


class NoStructuredBlock(StructuredBlockError):
    pass


class MalformedBlock(StructuredBlockError):
    pass


@dataclass(frozen=True)
class ChatMessage:
    role: str
    content: str

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")
        if not self.content:
            raise ValueError("message content must be non-empty")


@dataclass(frozen=True)
class GenerationParams:
    model: str = "gpt-4o"
    temperature: float = 0.0
    max_tokens: int | None = None
    seed: int | None = None

    def __post_init__(self):
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_tokens is not None and self.max_tokens < 1:
            raise ValueError("max_tokens must be positive")


def _request_payload(messages: Sequence[ChatMessage], params: GenerationParams) -> dict:
    return {
        "messages": [{"role": m.role, "content": m.content} for m in messages],
        "params": asdict(params),
    }


def request_hash(messages: Sequence[ChatMessage], params: GenerationParams) -> str:
    """Canonical hash of a request; equal requests hash equal across runs."""
    canon = json.dumps(
        _request_payload(messages, params), sort_keys=True, separators=(",", ":"), ensure_ascii=False
    )
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


_SECRET_KEYS = {"authorization", "api_key", "api-key", "x-api-key", "headers", "key"}


def _redact(obj):
    if isinstance(obj, dict):
        return {k: _redact(v) for k, v in obj.items() if k.lower() not in _SECRET_KEYS}
    if isinstance(obj, list):
        return [_redact(v) for v in obj]
    return obj


# -- providers ---------------------------------------------------------------


class ChatProvider:
    """Base class; subclasses implement ``_complete``."""

    fingerprint: str = "abstract"

    def complete(self, messages: Sequence[ChatMessage], params: GenerationParams) -> str:
        if not messages:
            raise ValueError("complete() needs at least one message")
        return self._complete(list(messages), params)

    def _complete(self, messages: list[ChatMessage], params: GenerationParams) -> str:
        raise NotImplementedError


class ScriptedProvider(ChatProvider):
    """Deterministic offline provider.

    ``script`` maps a request hash to canned text; requests not in the map go
    to ``fallback`` (a callable receiving the messages), or raise
    :class:`TransportError` when there is none.
    """

    def __init__(
        self,
        script: Mapping[str, str] | None = None,
        fallback: Callable[[list[ChatMessage]], str] | None = None,
        fingerprint: str = "scripted",
    ):
        self.script = dict(script or {})
        self.fallback = fallback
        self.fingerprint = fingerprint
        self.calls: list[list[ChatMessage]] = []
        self._lock = threading.Lock()

    def add(self, messages: Sequence[ChatMessage], params: GenerationParams, response: str) -> None:
        self.script[request_hash(messages, params)] = response

    def _complete(self, messages, params):
        with self._lock:
            self.calls.append(messages)
        key = request_hash(messages, params)
        if key in self.script:
            return self.script[key]
        if self.fallback is not None:
            return self.fallback(messages)
        raise TransportError(f"scripted provider has no response for request {key[:12]}")


class HttpChatProvider(ChatProvider):
    """Chat-completions endpoint (OpenAI-compatible request/response shape).

    URL and key come from ``CWESCOUT_LLM_URL`` / ``CWESCOUT_LLM_KEY`` unless
    passed explicitly. Rate limits and transport errors are retried with
    jittered exponential backoff; refusals are not.
    """

    def __init__(
        self,
        url: str | None = None,
        api_key: str | None = None,
        timeout: float = 120.0,
        max_attempts: int = 3,
        backoff: float = 1.0,
        sleep: Callable[[float], None] = time.sleep,
        session: requests.Session | None = None,
    ):
        self.url = url or os.environ.get("CWESCOUT_LLM_URL")
        if not self.url:
            raise TransportError("no LLM endpoint: set CWESCOUT_LLM_URL")
        self._api_key = api_key if api_key is not None else os.environ.get("CWESCOUT_LLM_KEY")
        self.timeout = timeout
        self.max_attempts = max_attempts
        self.backoff = backoff
        self._sleep = sleep
        self._session = session or requests.Session()
        self.fingerprint = f"http-chat/{self.url}"

    def _post(self, payload: dict) -> str:
        headers = {"Content-Type": "application/json"}
        if self._api_key:
            headers["Authorization"] = f"Bearer {self._api_key}"
        try:
            resp = self._session.post(self.url, json=payload, headers=headers, timeout=self.timeout)
        except requests.RequestException as exc:
            raise TransportError(str(exc)) from exc
        if resp.status_code == 429:
            raise RateLimited(f"rate limited: {resp.text[:200]}")
        if resp.status_code >= 500:
            raise TransportError(f"server error {resp.status_code}: {resp.text[:200]}")
        if resp.status_code >= 400:
            raise ProviderRefusal(f"request rejected {resp.status_code}: {resp.text[:200]}")
        try:
            body = resp.json()
            choice = body["choices"][0]
            content = choice["message"].get("content")
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise TransportError(f"unexpected response shape: {exc}") from exc
        if choice.get("finish_reason") == "content_filter" or choice["message"].get("refusal"):
            raise ProviderRefusal(choice["message"].get("refusal") or "content filtered")
        if not content:
            raise ProviderRefusal("empty completion")
        return content

    def _complete(self, messages, params):
        payload = {
            "model": params.model,
            "messages": [{"role": m.role, "content": m.content} for m in messages],
            "temperature": params.temperature,
        }
        if params.max_tokens is not None:
            payload["max_tokens"] = params.max_tokens
        if params.seed is not None:
            payload["seed"] = params.seed
        for attempt in range(1, self.max_attempts + 1):
            try:
                return self._post(payload)
            except (RateLimited, TransportError) as exc:
                if attempt == self.max_attempts:
                    raise
                delay = self.backoff * 2 ** (attempt - 1) * (1 + random.random())
                log.warning("LLM call failed (%s); retry %d in %.1fs", exc, attempt, delay)
                self._sleep(delay)
        raise AssertionError("unreachable")


# -- transcripts and cassettes -----------------------------------------------


@dataclass
class TranscriptEntry:
    call_id: int
    request_hash: str
    request: dict
    response_text: str

    def to_dict(self) -> dict:
        return {
            "call_id": self.call_id,
            "request_hash": self.request_hash,
            "request": self.request,
            "response_text": self.response_text,
        }


class Transcript:
    """Append-only, thread-safe log of provider calls."""

    def __init__(self):
        self._entries: list[TranscriptEntry] = []
        self._lock = threading.Lock()

    def append(self, messages: Sequence[ChatMessage], params: GenerationParams, response: str) -> int:
        with self._lock:
            call_id = len(self._entries)
            self._entries.append(
                TranscriptEntry(
                    call_id,
                    request_hash(messages, params),
                    _redact(_request_payload(messages, params)),
                    response,
                )
            )
            return call_id

    @property
    def entries(self) -> tuple[TranscriptEntry, ...]:
        return tuple(self._entries)

    def __len__(self) -> int:
        return len(self._entries)


@dataclass
class Cassette:
    """On-disk recording of a transcript plus free-form metadata."""

    entries: list[TranscriptEntry]
    provider_fingerprint: str = "unknown"
    meta: dict = field(default_factory=dict)

    def dumps(self) -> str:
        return dumps(
            {
                "version": CASSETTE_VERSION,
                "provider_fingerprint": self.provider_fingerprint,
                "meta": self.meta,
                "records": [e.to_dict() for e in self.entries],
            },
            fixed_floats=False,
        )

    def save(self, path: str | os.PathLike) -> None:
        atomic_write(path, self.dumps())

    @classmethod
    def load(cls, path: str | os.PathLike) -> "Cassette":
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise CassetteError(f"cassette not found: {path}") from None
        except ValueError as exc:
            raise CassetteError(f"cassette is not valid: {path}: {exc}") from exc
        if doc.get("version") != CASSETTE_VERSION:
            raise CassetteError(f"unsupported cassette version {doc.get('version')!r}")
        entries = [
            TranscriptEntry(r["call_id"], r["request_hash"], r["request"], r["response_text"])
            for r in doc["records"]
        ]
        for i, e in enumerate(entries):
            if e.call_id != i:
                raise CassetteError(f"cassette call ids are not dense at position {i}")
        return cls(entries, doc.get("provider_fingerprint", "unknown"), doc.get("meta", {}))


class RecordingProvider(ChatProvider):
    """Wraps a live provider and records every call into a transcript."""

    def __init__(self, inner: ChatProvider, transcript: Transcript | None = None):
        self.inner = inner
        self.transcript = transcript if transcript is not None else Transcript()
        self.fingerprint = inner.fingerprint

    def _complete(self, messages, params):
        text = self.inner.complete(messages, params)
        self.transcript.append(messages, params, text)
        return text

    def cassette(self, meta: dict | None = None) -> Cassette:
        return Cassette(list(self.transcript.entries), self.fingerprint, dict(meta or {}))

    def save(self, path: str | os.PathLike, meta: dict | None = None) -> None:
        self.cassette(meta).save(path)


class ReplayProvider(ChatProvider):
    """Serves a cassette strictly in order.

    Each request must hash equal to the next recorded request, otherwise
    :class:`CassetteMismatch` is raised. Not safe for concurrent callers.
    """

    def __init__(self, cassette: Cassette | str | os.PathLike):
        if not isinstance(cassette, Cassette):
            cassette = Cassette.load(cassette)
        self.cassette = cassette
        self.fingerprint = cassette.provider_fingerprint
        self.position = 0

    @property
    def exhausted(self) -> bool:
        return self.position >= len(self.cassette.entries)

    def _complete(self, messages, params):
        if self.exhausted:
            raise CassetteExhausted(
                f"cassette has {len(self.cassette.entries)} records; call {self.position} not recorded"
            )
        entry = self.cassette.entries[self.position]
        got = request_hash(messages, params)
        if got != entry.request_hash:
            raise CassetteMismatch(
                f"request {self.position} does not match cassette "
                f"(expected {entry.request_hash[:12]}, got {got[:12]})"
            )
        self.position += 1
        return entry.response_text


# -- structured output -------------------------------------------------------

_FENCE_RE = re.compile(r"```[ \t]*([A-Za-z0-9_+-]*)[ \t]*\r?\n(.*?)```", re.S)
_TRAILING_COMMA_RE = re.compile(r",(\s*[}\]])")


def _iter_objects(text: str):
    decoder = json.JSONDecoder()
    for m in re.finditer(r"[{\[]", text):
        try:
            value, _ = decoder.raw_decode(text, m.start())
        except ValueError:
            continue
        if isinstance(value, (dict, list)):
            yield value


def _first_object(text: str):
    for value in _iter_objects(text):
        if isinstance(value, dict):
            return value
    return None


def _strip_line_comments(text: str) -> str:
    """Drop ``//`` comments that start outside string literals."""
    out: list[str] = []
    i, n = 0, len(text)
    in_string = False
    while i < n:
        ch = text[i]
        if in_string:
            out.append(ch)
            if ch == "\\" and i + 1 < n:
                out.append(text[i + 1])
                i += 1
            elif ch == '"':
                in_string = False
        elif ch == '"':
            in_string = True
            out.append(ch)
        elif text.startswith("//", i):
            while i < n and text[i] != "\n":
                i += 1
            continue
        else:
            out.append(ch)
        i += 1
    return "".join(out)


def _cleanup(text: str) -> str:
    return _TRAILING_COMMA_RE.sub(r"\1", _strip_line_comments(text))


def extract_structured_block(text: str):
    """Parse the first well-formed JSON object in ``text``.

    Fenced blocks are tried before the surrounding prose. ``//`` line
    comments and trailing commas, both common in model output, are removed
    on a second pass.
    """
    if not isinstance(text, str):
        raise NoStructuredBlock("model output is not text")
    if "{" not in text:
        raise NoStructuredBlock("no structured block in model output")
    regions = [m.group(2) for m in _FENCE_RE.finditer(text)] + [text]
    for region in regions:
        value = _first_object(region)
        if value is not None:
            return value
    for region in regions:
        value = _first_object(_cleanup(region))
        if value is not None:
            return value
    raise MalformedBlock("model output contains braces but no valid JSON object")
