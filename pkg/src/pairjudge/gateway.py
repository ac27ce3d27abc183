"""Chat-completion gateway: one call surface over HTTP and mock backends.

Every call goes through :meth:`Gateway.complete`, which consults the run
cache, retries transient failures with exponential backoff, and appends a
transcript entry. :meth:`Gateway.complete_structured` layers JSON extraction,
schema validation and bounded repair rounds on top.
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import mimetypes
import os
import re
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Protocol, Sequence, Union

import httpx
import jsonschema

from .core import PairJudgeError
from .schemas import SCHEMAS

logger = logging.getLogger(__name__)


class GatewayError(PairJudgeError):
    pass


class ConfigurationError(GatewayError):
    pass


class TransportError(GatewayError):
    """Network or server failure that survived the retry budget."""


class RateLimited(TransportError):
    pass


class BackendRefused(GatewayError):
    """The backend rejected the request (4xx other than rate limiting)."""


class Truncated(GatewayError):
    """The backend stopped because it hit the token limit."""


class RepairNeeded(GatewayError):
    """Model output could not be used as-is; carries where parsing stopped."""

    def __init__(self, message: str, position: int | None = None) -> None:
        super().__init__(message)
        self.position = position


class Unparseable(RepairNeeded):
    pass


class SchemaViolation(RepairNeeded):
    pass


class StructuredOutputFailed(GatewayError):
    def __init__(self, message: str, attempts: int, last_error: str) -> None:
        super().__init__(message)
        self.attempts = attempts
        self.last_error = last_error


# ---------------------------------------------------------------------------
# requests and responses

_IMAGE_MARKER_RE = re.compile(r"<\|image:(.+?)\|>")


def image_marker(ref: str) -> str:
    return f"<|image:{ref}|>"


@dataclass(frozen=True)
class TextPart:
    text: str


@dataclass(frozen=True)
class ImagePart:
    ref: str


Part = Union[TextPart, ImagePart]


@dataclass(frozen=True)
class Message:
    role: str
    parts: tuple[Part, ...]

    def __post_init__(self) -> None:
        if self.role not in ("system", "user"):
            raise ValueError(f"unsupported role {self.role!r}")

    @property
    def text(self) -> str:
        return "".join(p.text for p in self.parts if isinstance(p, TextPart))


def split_image_markers(text: str) -> tuple[Part, ...]:
    """Turn a rendered prompt into text parts with image parts at each marker."""
    parts: list[Part] = []
    pos = 0
    for m in _IMAGE_MARKER_RE.finditer(text):
        if m.start() > pos:
            parts.append(TextPart(text[pos : m.start()]))
        parts.append(ImagePart(m.group(1)))
        pos = m.end()
    if pos < len(text) or not parts:
        parts.append(TextPart(text[pos:]))
    return tuple(parts)


@dataclass(frozen=True)
class ChatRequest:
    model_id: str
    messages: tuple[Message, ...]
    temperature: float = 0.0
    max_tokens: int = 4096
    request_tag: str = ""

    def __post_init__(self) -> None:
        if not self.messages:
            raise ValueError("a chat request needs at least one message")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_tokens <= 0:
            raise ValueError("max_tokens must be positive")

    @classmethod
    def from_prompt(
        cls,
        model_id: str,
        prompt: str,
        tag: str,
        *,
        temperature: float = 0.0,
        max_tokens: int = 4096,
        system: str | None = None,
    ) -> "ChatRequest":
        messages = []
        if system:
            messages.append(Message("system", (TextPart(system),)))
        messages.append(Message("user", split_image_markers(prompt)))
        return cls(model_id, tuple(messages), temperature, max_tokens, tag)

    @property
    def prompt_text(self) -> str:
        return "\n".join(m.text for m in self.messages)

    @property
    def has_images(self) -> bool:
        return any(isinstance(p, ImagePart) for m in self.messages for p in m.parts)

    def with_appended_text(self, extra: str) -> "ChatRequest":
        last = self.messages[-1]
        msg = Message(last.role, last.parts + (TextPart(extra),))
        return ChatRequest(
            self.model_id,
            self.messages[:-1] + (msg,),
            self.temperature,
            self.max_tokens,
            self.request_tag,
        )


@dataclass(frozen=True)
class ChatResponse:
    text: str
    prompt_tokens: int
    completion_tokens: int
    backend_id: str
    latency_ms: int
    cached: bool = False
    retries: int = 0


@dataclass(frozen=True)
class BackendReply:
    text: str
    prompt_tokens: int = 0
    completion_tokens: int = 0
    finish_reason: str = "stop"


def _file_digest(ref: str) -> str | None:
    path = Path(ref)
    if path.is_file():
        return hashlib.sha256(path.read_bytes()).hexdigest()
    return None


def cache_key(req: ChatRequest, schema_id: str | None = None) -> str:
    messages = []
    for m in req.messages:
        parts = []
        for p in m.parts:
            if isinstance(p, TextPart):
                parts.append({"text": p.text})
            else:
                parts.append({"image": p.ref, "sha256": _file_digest(p.ref)})
        messages.append({"role": m.role, "parts": parts})
    blob = json.dumps(
        {
            "model": req.model_id,
            "temperature": req.temperature,
            "messages": messages,
            "schema_id": schema_id,
        },
        sort_keys=True,
        ensure_ascii=False,
    )
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


# ---------------------------------------------------------------------------
# backends


class Backend(Protocol):
    backend_id: str
    supports_images: bool

    def send(self, req: ChatRequest) -> BackendReply: ...


def _image_url(ref: str) -> str:
    if ref.startswith(("http://", "https://", "data:")):
        return ref
    path = Path(ref)
    mime = mimetypes.guess_type(path.name)[0] or "image/png"
    data = base64.b64encode(path.read_bytes()).decode("ascii")
    return f"data:{mime};base64,{data}"


def wire_body(req: ChatRequest) -> dict:
    """The JSON body for an OpenAI-compatible ``/chat/completions`` call."""
    messages = []
    for m in req.messages:
        if len(m.parts) == 1 and isinstance(m.parts[0], TextPart):
            content: Any = m.parts[0].text
        else:
            content = []
            for p in m.parts:
                if isinstance(p, TextPart):
                    content.append({"type": "text", "text": p.text})
                else:
                    content.append({"type": "image_url", "image_url": {"url": _image_url(p.ref)}})
        messages.append({"role": m.role, "content": content})
    return {
        "model": req.model_id,
        "messages": messages,
        "temperature": req.temperature,
        "max_tokens": req.max_tokens,
    }


class HTTPBackend:
    """OpenAI-compatible chat-completion endpoint (vLLM, hosted APIs, ...)."""

    def __init__(
        self,
        base_url: str,
        *,
        api_key_env: str = "OPENAI_API_KEY",
        timeout: float = 120.0,
        supports_images: bool = True,
        client: httpx.Client | None = None,
    ) -> None:
        self.base_url = base_url.rstrip("/")
        self.backend_id = f"http:{self.base_url}"
        self.supports_images = supports_images
        headers = {"Content-Type": "application/json"}
        api_key = os.environ.get(api_key_env, "").strip()
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        self._client = client or httpx.Client(timeout=timeout)
        self._headers = headers

    def send(self, req: ChatRequest) -> BackendReply:
        try:
            resp = self._client.post(
                f"{self.base_url}/chat/completions", json=wire_body(req), headers=self._headers
            )
        except httpx.HTTPError as exc:
            raise TransportError(f"{type(exc).__name__}: {exc}") from exc
        if resp.status_code == 429:
            raise RateLimited(f"rate limited: {resp.text[:200]}")
        if resp.status_code >= 500:
            raise TransportError(f"HTTP {resp.status_code}: {resp.text[:200]}")
        if resp.status_code >= 400:
            raise BackendRefused(f"HTTP {resp.status_code}: {resp.text[:200]}")
        try:
            data = resp.json()
            choice = data["choices"][0]
            text = choice["message"]["content"] or ""
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise TransportError(f"malformed completion body: {exc}") from exc
        usage = data.get("usage") or {}
        return BackendReply(
            text=text,
            prompt_tokens=int(usage.get("prompt_tokens", 0)),
            completion_tokens=int(usage.get("completion_tokens", 0)),
            finish_reason=choice.get("finish_reason") or "stop",
        )


Responder = Union[str, Exception, Callable[[ChatRequest], str], Sequence[Union[str, Exception]]]


@dataclass
class MockRule:
    """Matches on request tag and/or a prompt substring; first match wins.

    ``response`` may be a string, an exception to raise, a callable of the
    request, or a sequence consumed one item per matching call (the last item
    repeats once the sequence is exhausted).
    """

    response: Responder
    tag: str | None = None
    contains: str | None = None
    _calls: int = field(default=0, repr=False)

    def matches(self, req: ChatRequest) -> bool:
        if self.tag is not None and req.request_tag != self.tag:
            return False
        if self.contains is not None and self.contains not in req.prompt_text:
            return False
        return True

    def produce(self, req: ChatRequest) -> str:
        r = self.response
        if isinstance(r, (list, tuple)):
            r = r[min(self._calls, len(r) - 1)]
        self._calls += 1
        if isinstance(r, Exception):
            raise r
        if callable(r):
            return r(req)
        return r


@dataclass
class MockScript:
    rules: list[MockRule] = field(default_factory=list)
    default: Responder = "{}"

    @classmethod
    def from_dict(cls, data: dict) -> "MockScript":
        rules = [
            MockRule(response=r["response"], tag=r.get("tag"), contains=r.get("contains"))
            for r in data.get("rules", [])
        ]
        return cls(rules=rules, default=data.get("default", "{}"))


class MockBackend:
    """Deterministic scripted backend for tests and offline runs."""

    def __init__(
        self,
        script: MockScript | Callable[[ChatRequest], str],
        *,
        supports_images: bool = True,
        backend_id: str = "mock",
    ) -> None:
        self.script = script
        self.supports_images = supports_images
        self.backend_id = backend_id
        self.requests: list[ChatRequest] = []
        self._lock = threading.Lock()
        self._default_rule = None
        if isinstance(script, MockScript):
            self._default_rule = MockRule(response=script.default)

    def send(self, req: ChatRequest) -> BackendReply:
        with self._lock:
            self.requests.append(req)
            if not isinstance(self.script, MockScript):
                text = self.script(req)
            else:
                rule = next((r for r in self.script.rules if r.matches(req)), self._default_rule)
                text = rule.produce(req)
        return BackendReply(
            text=text,
            prompt_tokens=len(req.prompt_text) // 4,
            completion_tokens=len(text) // 4,
        )


# ---------------------------------------------------------------------------
# run store


class RunStore:
    """Content-addressed cache of model replies, on disk or in memory."""

    def __init__(self, root: str | Path | None = None) -> None:
        self.root = Path(root) if root is not None else None
        self._mem: dict[str, dict] = {}
        self._lock = threading.Lock()
        if self.root is not None:
            (self.root / "cache").mkdir(parents=True, exist_ok=True)

    def _path(self, key: str) -> Path:
        assert self.root is not None
        return self.root / "cache" / key[:2] / f"{key}.json"

    def get(self, key: str) -> dict | None:
        if self.root is None:
            return self._mem.get(key)
        path = self._path(key)
        if not path.exists():
            return None
        return json.loads(path.read_text(encoding="utf-8"))

    def put(self, key: str, value: dict) -> None:
        with self._lock:
            if self.root is None:
                self._mem.setdefault(key, value)
                return
            path = self._path(key)
            if path.exists():
                return
            path.parent.mkdir(parents=True, exist_ok=True)
            tmp = path.with_suffix(f".tmp{threading.get_ident()}")
            tmp.write_text(json.dumps(value, ensure_ascii=False, sort_keys=True), encoding="utf-8")
            os.replace(tmp, path)

    def __contains__(self, key: str) -> bool:
        return self.get(key) is not None


# ---------------------------------------------------------------------------
# JSON extraction

_FENCE_RE = re.compile(r"```(?:json|JSON)?\s*\n(.*?)\n?\s*```", re.DOTALL)


def validate(value: Any, schema_id: str) -> None:
    validator = jsonschema.Draft202012Validator(SCHEMAS[schema_id])
    error = jsonschema.exceptions.best_match(validator.iter_errors(value))
    if error is not None:
        where = "/".join(str(p) for p in error.absolute_path) or "<root>"
        raise SchemaViolation(f"schema {schema_id!r} violated at {where}: {error.message}")


def extract_json(raw: str, schema_id: str) -> Any:
    """Parse a model reply into JSON and validate it against ``schema_id``.

    Markdown fences are stripped; if the remainder still does not parse, the
    outermost ``{...}`` region is tried once before giving up.
    """
    if schema_id not in SCHEMAS:
        raise KeyError(f"unregistered schema id {schema_id!r}")
    text = raw.strip()
    fence = _FENCE_RE.search(text)
    if fence:
        text = fence.group(1).strip()
    try:
        value = json.loads(text)
    except json.JSONDecodeError as first:
        start, end = text.find("{"), text.rfind("}")
        if start == -1 or end <= start:
            raise Unparseable(f"no JSON object found: {first.msg}", first.pos) from None
        try:
            value = json.loads(text[start : end + 1])
        except json.JSONDecodeError as exc:
            raise Unparseable(
                f"invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}",
                start + exc.pos,
            ) from None
    validate(value, schema_id)
    return value


# ---------------------------------------------------------------------------
# gateway

REPAIR_SUFFIX = (
    "\n\nRepair attempt {round}. Your previous reply could not be used: {error}\n"
    "Reply again with ONLY valid JSON matching the schema above."
)


@dataclass
class CallStats:
    network_calls: int = 0
    cache_hits: int = 0
    retries: int = 0


class Gateway:
    def __init__(
        self,
        backend: Backend,
        store: RunStore | None = None,
        *,
        max_attempts: int = 3,
        backoff_s: float = 0.5,
        sleep: Callable[[float], None] = time.sleep,
        transcript_path: str | Path | None = None,
    ) -> None:
        self.backend = backend
        self.store = store if store is not None else RunStore()
        self.max_attempts = max_attempts
        self.backoff_s = backoff_s
        self.sleep = sleep
        self.transcript: list[dict] = []
        self.stats = CallStats()
        self.transcript_path = Path(transcript_path) if transcript_path else None
        self._lock = threading.Lock()

    def _record(self, entry: dict, log: list | None) -> None:
        with self._lock:
            self.transcript.append(entry)
            if entry["cache_hit"]:
                self.stats.cache_hits += 1
            else:
                self.stats.network_calls += 1
            self.stats.retries += entry["retries"]
            if self.transcript_path is not None:
                with self.transcript_path.open("a", encoding="utf-8") as fh:
                    fh.write(json.dumps(entry, sort_keys=True) + "\n")
        if log is not None:
            log.append({"tag": entry["tag"], "key": entry["key"]})

    def complete(
        self, req: ChatRequest, *, schema_id: str | None = None, log: list | None = None
    ) -> ChatResponse:
        if req.has_images and not self.backend.supports_images:
            raise ConfigurationError(
                f"backend {self.backend.backend_id} does not accept image attachments"
            )
        key = cache_key(req, schema_id)
        hit = self.store.get(key)
        if hit is not None:
            self._record(
                {"tag": req.request_tag, "key": key, "model": req.model_id,
                 "cache_hit": True, "retries": 0, "latency_ms": 0},
                log,
            )
            return ChatResponse(
                text=hit["text"],
                prompt_tokens=hit["prompt_tokens"],
                completion_tokens=hit["completion_tokens"],
                backend_id=hit["backend_id"],
                latency_ms=hit["latency_ms"],
                cached=True,
            )

        retries = 0
        while True:
            t0 = time.perf_counter()
            try:
                reply = self.backend.send(req)
                break
            except TransportError as exc:
                if retries + 1 >= self.max_attempts:
                    self._record(
                        {"tag": req.request_tag, "key": key, "model": req.model_id,
                         "cache_hit": False, "retries": retries, "latency_ms": 0,
                         "error": str(exc)},
                        log,
                    )
                    raise
                delay = self.backoff_s * (2**retries)
                logger.warning("%s: %s; retrying in %.2fs", req.request_tag, exc, delay)
                retries += 1
                self.sleep(delay)
        latency_ms = int((time.perf_counter() - t0) * 1000)

        entry = {"tag": req.request_tag, "key": key, "model": req.model_id,
                 "cache_hit": False, "retries": retries, "latency_ms": latency_ms}
        if reply.finish_reason == "length":
            entry["error"] = "truncated"
            self._record(entry, log)
            raise Truncated(f"{req.request_tag}: completion hit max_tokens={req.max_tokens}")
        self.store.put(
            key,
            {
                "text": reply.text,
                "prompt_tokens": reply.prompt_tokens,
                "completion_tokens": reply.completion_tokens,
                "backend_id": self.backend.backend_id,
                "latency_ms": latency_ms,
                "request_tag": req.request_tag,
            },
        )
        self._record(entry, log)
        return ChatResponse(
            text=reply.text,
            prompt_tokens=reply.prompt_tokens,
            completion_tokens=reply.completion_tokens,
            backend_id=self.backend.backend_id,
            latency_ms=latency_ms,
            retries=retries,
        )

    def complete_structured(
        self,
        req: ChatRequest,
        schema_id: str,
        max_repair_rounds: int = 2,
        *,
        log: list | None = None,
    ) -> Any:
        if max_repair_rounds < 0:
            raise ValueError("max_repair_rounds must be >= 0")
        attempt_req = req
        last_error = ""
        for attempt in range(max_repair_rounds + 1):
            try:
                resp = self.complete(attempt_req, schema_id=schema_id, log=log)
                return extract_json(resp.text, schema_id)
            except (RepairNeeded, Truncated) as exc:
                last_error = str(exc)
            except GatewayError as exc:
                raise StructuredOutputFailed(
                    f"{req.request_tag}: {exc}", attempt + 1, str(exc)
                ) from exc
            logger.info("%s: repair round %d (%s)", req.request_tag, attempt + 1, last_error)
            # the round number keeps each repair request distinct in the cache
            attempt_req = req.with_appended_text(
                REPAIR_SUFFIX.format(round=attempt + 1, error=last_error)
            )
        raise StructuredOutputFailed(
            f"{req.request_tag}: no valid {schema_id!r} output after "
            f"{max_repair_rounds + 1} attempts: {last_error}",
            max_repair_rounds + 1,
            last_error,
        )
