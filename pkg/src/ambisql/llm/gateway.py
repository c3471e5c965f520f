"""Text-generation backends behind one cached, retrying gateway.

Three backend kinds are supported:

* ``http_chat`` -- a chat-completions style JSON endpoint;
* ``scripted_mock`` -- a rule table mapping prompt patterns to canned replies;
* ``replay_only`` -- answers only from the response cache.

Every response is stored in an append-only JSONL cache keyed by a stable hash
of the request, so a recorded session can be replayed offline.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import re
import threading
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable

import requests

logger = logging.getLogger(__name__)

HTTP_CHAT = "http_chat"
SCRIPTED_MOCK = "scripted_mock"
REPLAY_ONLY = "replay_only"
BACKEND_KINDS = (HTTP_CHAT, SCRIPTED_MOCK, REPLAY_ONLY)

DEFAULT_TEMPERATURE = 0.0
DEFAULT_MAX_TOKENS = 1024


class GenerationError(Exception):
    """A backend could not produce text for a request."""


class TransportError(GenerationError):
    """Transient failure; the gateway retries these."""


class ReplayMissError(GenerationError):
    pass


class ScriptMissError(GenerationError):
    pass


class BackendConfigError(ValueError):
    pass


@dataclass(frozen=True)
class GenerationRequest:
    backend_id: str
    model: str
    prompt: str
    temperature: float = DEFAULT_TEMPERATURE
    max_tokens: int = DEFAULT_MAX_TOKENS
    seed: int | None = None

    def __post_init__(self):
        if not self.prompt:
            raise ValueError("prompt must be non-empty")
        if not math.isfinite(self.temperature) or self.temperature < 0:
            raise ValueError(f"temperature must be finite and >= 0, got {self.temperature}")

    def cache_key(self) -> str:
        payload = json.dumps(
            [self.backend_id, self.model, self.prompt, self.temperature, self.seed, self.max_tokens],
            ensure_ascii=False,
            separators=(",", ":"),
        )
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# Cache


class ResponseCache:
    """Append-only JSONL cache of ``{key, request, response, timestamp}`` lines."""

    def __init__(self, path: str | os.PathLike | None = None):
        self.path = Path(path) if path else None
        self._entries: dict[str, str] = {}
        self._lock = threading.Lock()
        if self.path is not None and self.path.exists():
            with self.path.open(encoding="utf-8") as fh:
                for line in fh:
                    if line.strip():
                        entry = json.loads(line)
                        self._entries[entry["key"]] = entry["response"]

    def get(self, key: str) -> str | None:
        return self._entries.get(key)

    def __contains__(self, key: str) -> bool:
        return key in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def put(self, request: GenerationRequest, response: str) -> None:
        key = request.cache_key()
        with self._lock:
            if key in self._entries:
                return
            self._entries[key] = response
            if self.path is not None:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                line = json.dumps(
                    {"key": key, "request": request.to_dict(), "response": response, "timestamp": time.time()},
                    ensure_ascii=False,
                )
                with self.path.open("a", encoding="utf-8") as fh:
                    fh.write(line + "\n")


_shared_caches: dict[str, ResponseCache] = {}
_shared_lock = threading.Lock()


def open_cache(path: str | os.PathLike | None) -> ResponseCache:
    """Return the process-wide cache object for ``path`` (one writer per file)."""
    if path is None:
        return ResponseCache()
    resolved = str(Path(path).resolve())
    with _shared_lock:
        cache = _shared_caches.get(resolved)
        if cache is None:
            cache = _shared_caches[resolved] = ResponseCache(resolved)
        return cache


def forget_cache(path: str | os.PathLike) -> None:
    with _shared_lock:
        _shared_caches.pop(str(Path(path).resolve()), None)


# ---------------------------------------------------------------------------
# Backends


class Backend:
    kind = ""

    def complete(self, request: GenerationRequest) -> str:
        raise NotImplementedError


class HttpChatBackend(Backend):
    kind = HTTP_CHAT

    def __init__(
        self,
        endpoint: str,
        path: str = "/v1/chat/completions",
        api_key_env: str | None = "OPENAI_API_KEY",
        timeout_s: float = 120.0,
        session: requests.Session | None = None,
    ):
        self.url = endpoint.rstrip("/") + "/" + path.lstrip("/")
        self.api_key_env = api_key_env
        self.timeout_s = timeout_s
        self.session = session or requests.Session()

    def complete(self, request: GenerationRequest) -> str:
        headers = {"Content-Type": "application/json"}
        token = os.environ.get(self.api_key_env) if self.api_key_env else None
        if token:
            headers["Authorization"] = f"Bearer {token}"
        payload: dict[str, Any] = {
            "model": request.model,
            "messages": [{"role": "user", "content": request.prompt}],
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        }
        if request.seed is not None:
            payload["seed"] = request.seed
        try:
            response = self.session.post(self.url, json=payload, headers=headers, timeout=self.timeout_s)
        except requests.RequestException as exc:
            raise TransportError(f"POST {self.url} failed: {exc}") from exc
        if response.status_code == 429 or response.status_code >= 500:
            raise TransportError(f"HTTP {response.status_code}: {response.text[:300]}")
        if response.status_code >= 400:
            raise GenerationError(f"HTTP {response.status_code}: {response.text[:300]}")
        try:
            return response.json()["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise GenerationError(f"malformed chat completion response: {response.text[:300]}") from exc


@dataclass
class ScriptRule:
    """One scripted reply.

    A rule matches when every ``contains`` substring occurs in the prompt, the
    optional ``regex`` matches, and the optional ``seed`` / ``prompt_sha256``
    agree.  ``responses`` are served in order and the last one repeats; a
    response given as ``{"error": message}`` raises instead.
    """

    responses: list[Any]
    contains: list[str] = field(default_factory=list)
    regex: str | None = None
    seed: int | None = None
    prompt_sha256: str | None = None
    served: int = 0

    @classmethod
    def from_dict(cls, data: dict) -> "ScriptRule":
        if "responses" in data:
            responses = list(data["responses"])
        elif "response" in data:
            responses = [data["response"]]
        else:
            raise BackendConfigError("script rule needs 'response' or 'responses'")
        contains = data.get("contains", [])
        if isinstance(contains, str):
            contains = [contains]
        return cls(
            responses=responses,
            contains=list(contains),
            regex=data.get("regex"),
            seed=data.get("seed"),
            prompt_sha256=data.get("prompt_sha256"),
        )

    def matches(self, request: GenerationRequest) -> bool:
        if any(c not in request.prompt for c in self.contains):
            return False
        if self.regex is not None and not re.search(self.regex, request.prompt, re.S):
            return False
        if self.seed is not None and request.seed != self.seed:
            return False
        if self.prompt_sha256 is not None:
            if hashlib.sha256(request.prompt.encode("utf-8")).hexdigest() != self.prompt_sha256:
                return False
        return True

    def next_response(self) -> Any:
        response = self.responses[min(self.served, len(self.responses) - 1)]
        self.served += 1
        return response


class ScriptedBackend(Backend):
    """Deterministic stand-in for a model, driven by :class:`ScriptRule` s.

    ``responder`` may be any callable ``(request) -> str | None``; it is tried
    before the rule table.
    """

    kind = SCRIPTED_MOCK

    def __init__(
        self,
        rules: list[ScriptRule | dict] | None = None,
        default_response: str | None = None,
        on_miss: str = "error",
        responder: Callable[[GenerationRequest], str | None] | None = None,
    ):
        if on_miss not in ("error", "default"):
            raise BackendConfigError(f"on_miss must be 'error' or 'default', got {on_miss!r}")
        if on_miss == "default" and default_response is None:
            raise BackendConfigError("on_miss='default' requires a default_response")
        self.rules = [r if isinstance(r, ScriptRule) else ScriptRule.from_dict(r) for r in rules or []]
        self.default_response = default_response
        self.on_miss = on_miss
        self.responder = responder
        self.calls: list[GenerationRequest] = []
        self._lock = threading.Lock()

    def complete(self, request: GenerationRequest) -> str:
        with self._lock:
            self.calls.append(request)
            response = self.responder(request) if self.responder else None
            if response is None:
                for rule in self.rules:
                    if rule.matches(request):
                        response = rule.next_response()
                        break
        if response is None:
            if self.on_miss == "default":
                return self.default_response
            raise ScriptMissError(f"no scripted response for prompt ending {request.prompt[-80:]!r}")
        if isinstance(response, dict) and "error" in response:
            raise GenerationError(str(response["error"]))
        return response


class ReplayOnlyBackend(Backend):
    kind = REPLAY_ONLY

    def complete(self, request: GenerationRequest) -> str:
        raise ReplayMissError(f"replay cache has no entry for {request.backend_id}/{request.model} key {request.cache_key()[:12]}")


# ---------------------------------------------------------------------------
# Configuration and gateway


@dataclass
class BackendConfig:
    kind: str
    model: str = "default"
    endpoint: str | None = None
    path: str = "/v1/chat/completions"
    api_key_env: str | None = "OPENAI_API_KEY"
    timeout_s: float = 120.0
    rules: list[dict] = field(default_factory=list)
    default_response: str | None = None
    on_miss: str = "error"
    cache_path: str | None = None
    max_retries: int = 3
    backoff_s: float = 1.0
    max_in_flight: int = 4
    temperature: float = DEFAULT_TEMPERATURE
    max_tokens: int = DEFAULT_MAX_TOKENS

    def __post_init__(self):
        if self.kind not in BACKEND_KINDS:
            raise BackendConfigError(f"unknown backend kind {self.kind!r}")
        if self.kind == HTTP_CHAT and not self.endpoint:
            raise BackendConfigError("http_chat backend requires an endpoint")
        if self.kind == SCRIPTED_MOCK:
            if self.on_miss not in ("error", "default"):
                raise BackendConfigError(f"on_miss must be 'error' or 'default', got {self.on_miss!r}")
            if self.on_miss == "default" and self.default_response is None:
                raise BackendConfigError("scripted_mock with on_miss='default' requires default_response")

    @classmethod
    def from_dict(cls, data: dict) -> "BackendConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise BackendConfigError(f"unknown backend config keys: {sorted(unknown)}")
        return cls(**data)

    def make_backend(self) -> Backend:
        if self.kind == HTTP_CHAT:
            return HttpChatBackend(self.endpoint, self.path, self.api_key_env, self.timeout_s)
        if self.kind == SCRIPTED_MOCK:
            return ScriptedBackend(self.rules, self.default_response, self.on_miss)
        return ReplayOnlyBackend()


class Gateway:
    """Cached, retrying access to one backend under a fixed ``backend_id``."""

    def __init__(
        self,
        backend_id: str,
        backend: Backend,
        *,
        model: str = "default",
        cache: ResponseCache | None = None,
        temperature: float = DEFAULT_TEMPERATURE,
        max_tokens: int = DEFAULT_MAX_TOKENS,
        max_retries: int = 3,
        backoff_s: float = 1.0,
        max_in_flight: int = 4,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.backend_id = backend_id
        self.backend = backend
        self.model = model
        self.cache = cache if cache is not None else ResponseCache()
        self.temperature = temperature
        self.max_tokens = max_tokens
        self.max_retries = max_retries
        self.backoff_s = backoff_s
        self._slots = threading.BoundedSemaphore(max(1, max_in_flight))
        self._sleep = sleep
        self.backend_calls = 0

    @classmethod
    def from_config(cls, backend_id: str, config: BackendConfig, cache: ResponseCache | None = None) -> "Gateway":
        if cache is None:
            cache = open_cache(config.cache_path)
        return cls(
            backend_id,
            config.make_backend(),
            model=config.model,
            cache=cache,
            temperature=config.temperature,
            max_tokens=config.max_tokens,
            max_retries=config.max_retries,
            backoff_s=config.backoff_s,
            max_in_flight=config.max_in_flight,
        )

    def request(self, prompt: str, *, seed: int | None = None, temperature: float | None = None) -> GenerationRequest:
        return GenerationRequest(
            backend_id=self.backend_id,
            model=self.model,
            prompt=prompt,
            temperature=self.temperature if temperature is None else temperature,
            max_tokens=self.max_tokens,
            seed=seed,
        )

    def generate(self, request: GenerationRequest) -> str:
        key = request.cache_key()
        cached = self.cache.get(key)
        if cached is not None:
            return cached
        attempt = 0
        while True:
            try:
                with self._slots:
                    self.backend_calls += 1
                    text = self.backend.complete(request)
                break
            except TransportError as exc:
                if attempt >= self.max_retries:
                    raise TransportError(f"{self.backend_id}: giving up after {attempt + 1} attempts: {exc}") from exc
                delay = self.backoff_s * (2**attempt)
                logger.warning("%s: transient failure (%s); retrying in %.1fs", self.backend_id, exc, delay)
                self._sleep(delay)
                attempt += 1
        self.cache.put(request, text)
        return text

    def complete(self, prompt: str, *, seed: int | None = None, temperature: float | None = None) -> str:
        return self.generate(self.request(prompt, seed=seed, temperature=temperature))


def generate(gateway: Gateway, request: GenerationRequest) -> str:
    return gateway.generate(request)
