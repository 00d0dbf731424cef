"""Chat-completion boundary: HTTP client, scripted replay, callable stub.

Search code only ever sees `backend.complete(request) -> ChatResponse`,
so any vision-language model reachable over the common chat-completions
JSON shape plugs in, and tests replay canned scripts instead.
"""

from __future__ import annotations

import base64
import io
import json
import mimetypes
import os
import threading
import time
from dataclasses import dataclass

import requests

from .geometry import crop_window
from .graph import BoundingBox


class BackendError(Exception):
    pass


class Timeout(BackendError):
    pass


class TransportFailure(BackendError):
    pass


class RateLimited(BackendError):
    pass


class AuthFailure(BackendError):
    pass


class NonRetriableServerError(BackendError):
    pass


class ScriptExhausted(BackendError):
    pass


class ScriptMismatch(BackendError):
    pass


@dataclass(frozen=True)
class ChatRequest:
    user_text: str
    system_text: str = ""
    image_ref: str | None = None  # file path, data URI, or raw base64
    temperature: float = 0.0
    max_tokens: int = 2048
    seed: int | None = None

    def __post_init__(self):
        if not self.user_text:
            raise ValueError("user_text must be non-empty")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be >= 1")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")


@dataclass(frozen=True)
class ChatResponse:
    text: str
    latency_ms: float = 0.0
    prompt_tokens: int = 0
    completion_tokens: int = 0


class ScriptedBackend:
    """Replays an ordered script of (matcher, response) records.

    A record's matcher, when present, must occur in the request's user
    text; this catches fixtures drifting out of sync with the prompts.
    """

    def __init__(self, records):
        self._records = list(records)
        self._cursor = 0
        self._lock = threading.Lock()

    @classmethod
    def from_jsonl(cls, path) -> "ScriptedBackend":
        records = []
        with open(path, encoding="utf-8") as handle:
            for line in handle:
                line = line.strip()
                if not line:
                    continue
                record = json.loads(line)
                records.append((record.get("matcher"), record["response"]))
        return cls(records)

    @property
    def remaining(self) -> int:
        return len(self._records) - self._cursor

    def complete(self, request: ChatRequest) -> ChatResponse:
        with self._lock:
            if self._cursor >= len(self._records):
                raise ScriptExhausted(
                    f"script exhausted after {self._cursor} calls")
            matcher, response = self._records[self._cursor]
            self._cursor += 1
        if matcher is not None and matcher not in request.user_text:
            raise ScriptMismatch(
                f"script record {self._cursor - 1} expected {matcher!r} "
                "in the prompt")
        return ChatResponse(text=response)


class CallableBackend:
    """Adapts `handler(request, repeat_index) -> str` into a backend.

    repeat_index counts prior calls with the same prompt fingerprint,
    but only at positive temperature: sampling repeats may differ,
    greedy decoding must not. This makes a deterministic handler behave
    like a model with an enumerable response distribution.
    """

    def __init__(self, handler):
        self._handler = handler
        self._counts: dict = {}
        self._lock = threading.Lock()

    def complete(self, request: ChatRequest) -> ChatResponse:
        if request.temperature > 0:
            key = (request.system_text, request.user_text, request.image_ref)
            with self._lock:
                index = self._counts.get(key, 0)
                self._counts[key] = index + 1
        else:
            index = 0
        return ChatResponse(text=self._handler(request, index))


@dataclass
class BackendConfig:
    endpoint: str
    model: str
    api_key_env: str = "MODEL_API_KEY"
    timeout_s: float = 60.0
    retry_cap: int = 3
    concurrency: int = 4
    min_interval_s: float = 0.0

    @classmethod
    def from_dict(cls, data: dict) -> "BackendConfig":
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in data.items() if k in known})


def _image_payload(image_ref: str) -> str:
    if image_ref.startswith("data:"):
        return image_ref
    if os.path.exists(image_ref):
        mime = mimetypes.guess_type(image_ref)[0] or "image/jpeg"
        with open(image_ref, "rb") as handle:
            encoded = base64.b64encode(handle.read()).decode("ascii")
        return f"data:{mime};base64,{encoded}"
    # Anything else is assumed to be raw base64 image bytes.
    return f"data:image/jpeg;base64,{image_ref}"


class HttpChatBackend:
    """Chat-completions HTTP client with retries and rate limiting.

    Retries timeouts, connection failures, 429s, and 5xx with
    exponential backoff up to the configured cap. Auth failures and
    other 4xx are surfaced immediately.
    """

    def __init__(self, config: BackendConfig, session=None, sleeper=time.sleep):
        self._config = config
        self._session = session or requests.Session()
        self._sleep = sleeper
        self._gate = threading.Semaphore(config.concurrency)
        self._pace_lock = threading.Lock()
        self._last_call = 0.0

    def _throttle(self):
        if self._config.min_interval_s <= 0:
            return
        with self._pace_lock:
            wait = self._last_call + self._config.min_interval_s - time.monotonic()
            if wait > 0:
                self._sleep(wait)
            self._last_call = time.monotonic()

    def _payload(self, request: ChatRequest) -> dict:
        messages = []
        if request.system_text:
            messages.append({"role": "system", "content": request.system_text})
        if request.image_ref is None:
            content = request.user_text
        else:
            content = [
                {"type": "text", "text": request.user_text},
                {"type": "image_url",
                 "image_url": {"url": _image_payload(request.image_ref)}},
            ]
        messages.append({"role": "user", "content": content})
        payload = {
            "model": self._config.model,
            "messages": messages,
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        }
        if request.seed is not None:
            payload["seed"] = request.seed
        return payload

    def complete(self, request: ChatRequest) -> ChatResponse:
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self._config.api_key_env, "")
        if key:
            headers["Authorization"] = f"Bearer {key}"
        payload = self._payload(request)

        last_error: BackendError | None = None
        with self._gate:
            for attempt in range(self._config.retry_cap + 1):
                if attempt:
                    self._sleep(0.5 * 2 ** (attempt - 1))
                self._throttle()
                started = time.monotonic()
                try:
                    reply = self._session.post(
                        self._config.endpoint, json=payload,
                        headers=headers, timeout=self._config.timeout_s)
                except requests.exceptions.Timeout:
                    last_error = Timeout(f"request timed out (attempt {attempt + 1})")
                    continue
                except requests.exceptions.RequestException as exc:
                    last_error = TransportFailure(str(exc))
                    continue

                if reply.status_code in (401, 403):
                    raise AuthFailure(f"HTTP {reply.status_code}")
                if reply.status_code == 429:
                    last_error = RateLimited("HTTP 429")
                    continue
                if reply.status_code >= 500:
                    last_error = TransportFailure(f"HTTP {reply.status_code}")
                    continue
                if reply.status_code >= 400:
                    raise NonRetriableServerError(
                        f"HTTP {reply.status_code}: {reply.text[:200]}")

                latency = (time.monotonic() - started) * 1000.0
                try:
                    body = reply.json()
                    text = body["choices"][0]["message"]["content"]
                except (ValueError, KeyError, IndexError, TypeError) as exc:
                    raise TransportFailure(
                        f"malformed completion body: {exc}") from None
                usage = body.get("usage") or {}
                return ChatResponse(
                    text=text,
                    latency_ms=latency,
                    prompt_tokens=int(usage.get("prompt_tokens", 0)),
                    completion_tokens=int(usage.get("completion_tokens", 0)),
                )
        raise last_error if last_error else TransportFailure("no attempts made")


def cropped_image_ref(image_path: str, box: BoundingBox,
                      pad_ratio: float = 0.1) -> tuple[str, float, float]:
    """Crop a padded window around `box` out of the image at `image_path`.

    Returns (data URI of the crop, window origin x, window origin y);
    boxes reported against the crop must be shifted by that origin to
    land back in full-image coordinates.
    """
    from PIL import Image  # deferred: scripted runs never touch images

    with Image.open(image_path) as img:
        window = crop_window(box, pad_ratio=pad_ratio,
                             bounds=(float(img.width), float(img.height)))
        crop = img.crop((int(window.x1), int(window.y1),
                         int(window.x2), int(window.y2)))
        buffer = io.BytesIO()
        crop.convert("RGB").save(buffer, format="JPEG")
    encoded = base64.b64encode(buffer.getvalue()).decode("ascii")
    return f"data:image/jpeg;base64,{encoded}", float(int(window.x1)), float(int(window.y1))


def load_backend(config_path: str):
    """Build a backend from a JSON config file.

    {"kind": "scripted", "script": "replies.jsonl"} replays a script;
    {"kind": "http", "endpoint": ..., "model": ...} goes to the network.
    """
    with open(config_path, encoding="utf-8") as handle:
        config = json.load(handle)
    kind = config.get("kind", "http")
    if kind == "scripted":
        script = config["script"]
        if not os.path.isabs(script):
            script = os.path.join(os.path.dirname(os.path.abspath(config_path)),
                                  script)
        return ScriptedBackend.from_jsonl(script)
    if kind == "http":
        return HttpChatBackend(BackendConfig.from_dict(config))
    raise ValueError(f"unknown backend kind {kind!r}")
