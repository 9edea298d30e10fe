"""Provider-agnostic multimodal chat client with a content-addressed response cache."""
from __future__ import annotations

import base64
import hashlib
import io
import json
import logging
import os
import tempfile
import threading
import time
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Iterable, Optional, Sequence, Union

from PIL import Image

from .exceptions import AuthError, BudgetExceeded, ProviderError, TransientProviderError

log = logging.getLogger(__name__)

API_KEY_ENV = "SCAFFOLD_API_KEY"
CACHE_DIR_ENV = "SCAFFOLD_CACHE_DIR"
DEFAULT_MAX_TOKENS = 1024
DEFAULT_RETRIES = 3


@dataclass(frozen=True)
class ImagePart:
    """PNG-encoded image attachment, identified by the SHA-256 of its bytes."""

    data: bytes
    mime: str = "image/png"

    @classmethod
    def from_image(cls, image: Image.Image) -> "ImagePart":
        buf = io.BytesIO()
        image.save(buf, format="PNG")
        return cls(buf.getvalue())

    @property
    def sha256(self) -> str:
        return hashlib.sha256(self.data).hexdigest()

    def data_url(self) -> str:
        return f"data:{self.mime};base64,{base64.b64encode(self.data).decode('ascii')}"


Part = Union[str, ImagePart]


@dataclass(frozen=True)
class Message:
    role: str
    parts: tuple

    @classmethod
    def user(cls, text: str = "", images: Iterable = ()) -> "Message":
        parts: list = [ImagePart.from_image(im) if isinstance(im, Image.Image) else im for im in images]
        if text:
            parts.append(text)
        return cls("user", tuple(parts))

    @classmethod
    def assistant(cls, text: str) -> "Message":
        return cls("assistant", (text,))

    @property
    def text(self) -> str:
        return "\n".join(p for p in self.parts if isinstance(p, str))

    @property
    def images(self) -> list[ImagePart]:
        return [p for p in self.parts if isinstance(p, ImagePart)]


@dataclass(frozen=True)
class ChatRequest:
    messages: tuple
    model_id: str = "mock"
    temperature: float = 0.0
    max_tokens: int = DEFAULT_MAX_TOKENS
    cache_salt: str = ""

    def canonical(self) -> dict:
        msgs = []
        for m in self.messages:
            parts = [{"text": p.replace("\r\n", "\n")} if isinstance(p, str) else {"image": p.sha256}
                     for p in m.parts]
            msgs.append({"role": m.role, "parts": parts})
        out = {"model": self.model_id, "temperature": float(self.temperature), "messages": msgs}
        if self.cache_salt:
            out["salt"] = self.cache_salt
        return out

    @property
    def digest(self) -> str:
        blob = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":"), ensure_ascii=False)
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    @property
    def last_user_text(self) -> str:
        for m in reversed(self.messages):
            if m.role == "user":
                return m.text
        return ""


@dataclass
class ChatResponse:
    text: str
    usage: Optional[dict] = None
    provider_meta: Any = None
    from_cache: bool = False

    def to_record(self) -> dict:
        return {"text": self.text, "usage": self.usage, "provider_meta": self.provider_meta}


# ---------------------------------------------------------------------------
# cache


class ResponseCache:
    """``<root>/<first2>/<digest>.json`` files, written via temp file + rename."""

    def __init__(self, root: Union[str, Path]):
        self.root = Path(root)

    def path(self, digest: str) -> Path:
        return self.root / digest[:2] / f"{digest}.json"

    def get(self, digest: str) -> Optional[ChatResponse]:
        path = self.path(digest)
        try:
            record = json.loads(path.read_text(encoding="utf-8"))
        except (FileNotFoundError, json.JSONDecodeError):
            return None
        resp = record["response"]
        return ChatResponse(resp["text"], resp.get("usage"), resp.get("provider_meta"), from_cache=True)

    def put(self, request: ChatRequest, response: ChatResponse) -> None:
        path = self.path(request.digest)
        path.parent.mkdir(parents=True, exist_ok=True)
        record = {"digest": request.digest, "request": request.canonical(), "response": response.to_record()}
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=".json")
        try:
            with os.fdopen(fd, "w", encoding="utf-8") as fh:
                json.dump(record, fh, ensure_ascii=False, indent=1)
            os.replace(tmp, path)
        except BaseException:
            Path(tmp).unlink(missing_ok=True)
            raise


class MemoryCache:
    def __init__(self):
        self._store: dict[str, dict] = {}

    def get(self, digest):
        record = self._store.get(digest)
        if record is None:
            return None
        return ChatResponse(record["text"], record.get("usage"), record.get("provider_meta"), from_cache=True)

    def put(self, request, response):
        self._store[request.digest] = json.loads(json.dumps(response.to_record()))


class RateLimiter:
    """Token bucket shared by all workers of a client."""

    def __init__(self, rate_per_s: Optional[float] = 1.0, burst: int = 1,
                 clock: Callable[[], float] = time.monotonic, sleep: Callable[[float], None] = time.sleep):
        self.rate = rate_per_s
        self.capacity = max(1, burst)
        self._tokens = float(self.capacity)
        self._clock = clock
        self._sleep = sleep
        self._last = clock()
        self._lock = threading.Lock()

    def acquire(self) -> None:
        if not self.rate:
            return
        while True:
            with self._lock:
                now = self._clock()
                self._tokens = min(self.capacity, self._tokens + (now - self._last) * self.rate)
                self._last = now
                if self._tokens >= 1:
                    self._tokens -= 1
                    return
                wait = (1 - self._tokens) / self.rate
            self._sleep(wait)


# ---------------------------------------------------------------------------
# providers


class Provider:
    """Performs one uncached round-trip. Subclasses raise TransientProviderError to request a retry."""

    name = "base"

    def complete(self, request: ChatRequest) -> ChatResponse:  # pragma: no cover - interface
        raise NotImplementedError


class OpenAIChatProvider(Provider):
    """Adapter for OpenAI-style ``/chat/completions`` endpoints with image_url parts."""

    name = "openai"

    def __init__(self, endpoint: str, api_key: Optional[str] = None, timeout: float = 120.0,
                 transport=None):
        import httpx

        self.endpoint = endpoint
        self.api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV)
        if not self.api_key:
            raise AuthError(f"no API key; set {API_KEY_ENV}")
        self._http = httpx.Client(timeout=timeout, transport=transport)

    @staticmethod
    def payload(request: ChatRequest) -> dict:
        messages = []
        for m in request.messages:
            if m.role == "assistant" or all(isinstance(p, str) for p in m.parts):
                messages.append({"role": m.role, "content": m.text})
                continue
            content = []
            for p in m.parts:
                if isinstance(p, str):
                    content.append({"type": "text", "text": p})
                else:
                    content.append({"type": "image_url", "image_url": {"url": p.data_url()}})
            messages.append({"role": m.role, "content": content})
        return {
            "model": request.model_id,
            "messages": messages,
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        }

    def complete(self, request: ChatRequest) -> ChatResponse:
        import httpx

        try:
            r = self._http.post(self.endpoint, json=self.payload(request),
                                headers={"Authorization": f"Bearer {self.api_key}"})
        except httpx.TransportError as exc:
            raise TransientProviderError(str(exc)) from exc
        if r.status_code in (401, 403):
            raise AuthError(f"provider rejected credentials ({r.status_code})")
        if r.status_code == 429 or r.status_code >= 500:
            raise TransientProviderError(f"HTTP {r.status_code}")
        if r.status_code >= 400:
            raise ProviderError(f"HTTP {r.status_code}: {r.text[:200]}")
        data = r.json()
        try:
            text = data["choices"][0]["message"]["content"] or ""
        except (KeyError, IndexError, TypeError) as exc:
            raise ProviderError(f"malformed provider response: {data!r:.200}") from exc
        return ChatResponse(text, data.get("usage"), {"id": data.get("id"), "model": data.get("model")})


class MockProvider(Provider):
    """Offline provider driven by fixtures.

    Resolution order: exact request digest, then substring ``rules`` matched
    against the latest user text (longest pattern first), then the ordered
    ``script``, then ``default``.
    """

    name = "mock"

    def __init__(self, by_digest: Optional[dict] = None, rules: Sequence = (),
                 script: Sequence[str] = (), default: Optional[str] = None):
        self.by_digest = dict(by_digest or {})
        self.rules = sorted(((r["contains"], r["reply"]) if isinstance(r, dict) else tuple(r) for r in rules),
                            key=lambda r: -len(r[0]))
        self.script = list(script)
        self.default = default
        self.calls: list[ChatRequest] = []
        self._lock = threading.Lock()

    @classmethod
    def from_fixture(cls, path: Union[str, Path]) -> "MockProvider":
        path = Path(path)
        if path.is_dir():
            path = path / "fixtures.json"
        data = json.loads(path.read_text(encoding="utf-8"))
        return cls(data.get("by_digest"), data.get("rules", ()), data.get("script", ()), data.get("default"))

    def complete(self, request: ChatRequest) -> ChatResponse:
        with self._lock:
            self.calls.append(request)
            text = self.by_digest.get(request.digest)
            if text is None:
                hay = request.last_user_text
                text = next((reply for pattern, reply in self.rules if pattern in hay), None)
            if text is None and self.script:
                text = self.script.pop(0)
            if text is None:
                text = self.default
        if text is None:
            raise ProviderError(f"mock has no reply for request {request.digest[:12]}")
        return ChatResponse(text, None, {"provider": "mock"})


class CallableProvider(Provider):
    """Wrap ``fn(request) -> str``; handy for echo or counting fakes."""

    name = "callable"

    def __init__(self, fn: Callable[[ChatRequest], str]):
        self.fn = fn

    def complete(self, request):
        return ChatResponse(self.fn(request))


# ---------------------------------------------------------------------------
# client


class ChatClient:
    """Caching, rate-limited, concurrency-bounded front end to a provider.

    Thread-safe: a per-digest lock guarantees one network call per distinct
    request even when identical requests race.
    """

    def __init__(self, provider: Provider, model_id: str = "gpt-4-vision-preview", *,
                 cache_dir: Union[str, Path, None] = None, max_in_flight: int = 4,
                 rate_per_s: Optional[float] = 1.0, max_retries: int = DEFAULT_RETRIES,
                 backoff_s: float = 1.0, budget: Optional[int] = None,
                 temperature: float = 0.0, max_tokens: int = DEFAULT_MAX_TOKENS,
                 sleep: Callable[[float], None] = time.sleep):
        if cache_dir is None:
            cache_dir = os.environ.get(CACHE_DIR_ENV)
        self.provider = provider
        self.model_id = model_id
        self.cache = ResponseCache(cache_dir) if cache_dir else MemoryCache()
        self.max_in_flight = max_in_flight
        self.limiter = RateLimiter(rate_per_s)
        self.max_retries = max_retries
        self.backoff_s = backoff_s
        self.budget = budget
        self.temperature = temperature
        self.max_tokens = max_tokens
        self._sleep = sleep
        self._gate = threading.BoundedSemaphore(max_in_flight)
        self._key_locks: dict[str, threading.Lock] = defaultdict(threading.Lock)
        self._meta_lock = threading.Lock()
        self.network_calls = 0

    def request(self, messages: Sequence[Message], cache_salt: str = "") -> ChatRequest:
        return ChatRequest(tuple(messages), self.model_id, self.temperature, self.max_tokens, cache_salt)

    def _key_lock(self, digest: str) -> threading.Lock:
        with self._meta_lock:
            return self._key_locks[digest]

    def _reserve_budget(self) -> None:
        with self._meta_lock:
            if self.budget is not None and self.network_calls >= self.budget:
                raise BudgetExceeded(f"request budget of {self.budget} exhausted")
            self.network_calls += 1

    def _call(self, request: ChatRequest) -> ChatResponse:
        delay = self.backoff_s
        for attempt in range(self.max_retries + 1):
            self.limiter.acquire()
            try:
                with self._gate:
                    return self.provider.complete(request)
            except TransientProviderError as exc:
                if attempt == self.max_retries:
                    raise ProviderError(f"giving up after {attempt + 1} attempts: {exc}") from exc
                log.warning("transient provider error (%s); retrying in %.1fs", exc, delay)
                self._sleep(delay)
                delay *= 2
        raise AssertionError("unreachable")

    def send(self, request: ChatRequest) -> ChatResponse:
        digest = request.digest
        with self._key_lock(digest):
            cached = self.cache.get(digest)
            if cached is not None:
                return cached
            self._reserve_budget()
            response = self._call(request)
            response.from_cache = False
            self.cache.put(request, response)
            return response

    def send_conversation(self, turns: Sequence[Message], cache_salt: str = "") -> ChatResponse:
        turns = list(turns)
        if not turns or turns[-1].role != "user":
            raise ValueError("a conversation must end with a user turn")
        for prev, cur in zip(turns, turns[1:]):
            if prev.role == cur.role:
                raise ValueError("conversation turns must alternate roles")
        return self.send(self.request(turns, cache_salt))

    def ask(self, text: str, images: Iterable = (), cache_salt: str = "") -> ChatResponse:
        return self.send(self.request([Message.user(text, images)], cache_salt))


def provider_from_config(cfg: dict) -> Provider:
    kind = cfg.get("provider", "openai")
    if kind == "openai":
        return OpenAIChatProvider(cfg["endpoint"], cfg.get("api_key"))
    if kind == "mock":
        return MockProvider.from_fixture(cfg["fixtures"])
    raise ValueError(f"unknown provider {kind!r}")
