import hashlib
import json
import logging
import os
import tempfile
import threading
import time
from abc import ABC, abstractmethod
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, List, NamedTuple, Optional, Tuple

import requests
from tenacity import Retrying, before_sleep_log, retry_if_exception_type, stop_after_attempt, wait_exponential

from annostore import unescape_field

logger = logging.getLogger(__name__)

MAX_ATTEMPTS = 5
DEFAULT_ENDPOINT = "https://api.openai.com/v1/chat/completions"
DEFAULT_MODEL = "gpt-4o-mini"


class BackendError(RuntimeError):
    pass


class BackendUnavailable(BackendError):
    pass


class AuthError(BackendError):
    pass


class BackendTimeout(BackendError, TimeoutError):
    pass


class UnmatchedPrompt(BackendError):
    pass


class _RetryableStatus(Exception):
    def __init__(self, status: int, body: str):
        super().__init__(f"HTTP {status}: {body[:200]}")
        self.status = status


@dataclass(frozen=True)
class ChatRequest:
    user: str
    system: str = ""
    temperature: float = 0.0
    max_tokens: int = 512

    def __post_init__(self):
        if not self.user or not self.user.strip():
            raise ValueError("ChatRequest.user must be non-empty")
        if self.temperature < 0:
            raise ValueError(f"temperature must be >= 0, got {self.temperature}")
        if self.max_tokens < 1:
            raise ValueError(f"max_tokens must be >= 1, got {self.max_tokens}")


def cache_key(request: ChatRequest, tag: str) -> str:
    """Stable sha256 digest over the request fields and the backend identity tag."""
    payload = {
        "system": request.system,
        "user": request.user,
        "temperature": request.temperature,
        "max_tokens": request.max_tokens,
        "backend": tag,
    }
    raw = json.dumps(payload, sort_keys=True, ensure_ascii=False).encode("utf-8")
    return hashlib.sha256(raw).hexdigest()


class ChatBackend(ABC):
    """Single-turn chat completion; implementations must accept concurrent calls."""

    tag: str = "backend"

    @abstractmethod
    def complete(self, request: ChatRequest) -> str:
        pass


class MockRule(NamedTuple):
    matcher: str
    response: str


@dataclass(frozen=True)
class MockScript:
    """Ordered substring rules; the first rule whose matcher occurs in the prompt answers it."""

    rules: Tuple[MockRule, ...] = ()
    default: Optional[str] = None

    @classmethod
    def from_lines(cls, lines: Iterable[str]) -> "MockScript":
        """Parse ``matcher<TAB>response`` lines; ``*`` as matcher sets the default, ``#`` starts a comment."""
        rules: List[MockRule] = []
        default = None
        for line_number, line in enumerate(lines, start=1):
            line = line.rstrip("\r\n")
            if not line.strip() or line.startswith("#"):
                continue
            if "\t" not in line:
                raise ValueError(f"Mock script line {line_number}: expected 'matcher<TAB>response'")
            matcher, response = line.split("\t", 1)
            if matcher == "*":
                default = unescape_field(response)
            else:
                rules.append(MockRule(unescape_field(matcher), unescape_field(response)))
        return cls(tuple(rules), default)

    @classmethod
    def from_file(cls, path: Path) -> "MockScript":
        with open(path, "r", encoding="utf-8") as infile:
            return cls.from_lines(infile)

    @property
    def digest(self) -> str:
        raw = json.dumps([list(self.rules), self.default], ensure_ascii=False).encode("utf-8")
        return hashlib.sha256(raw).hexdigest()

    def respond(self, prompt: str) -> str:
        for rule in self.rules:
            if rule.matcher in prompt:
                return rule.response
        if self.default is not None:
            return self.default
        raise UnmatchedPrompt(f"No mock rule matches prompt starting {prompt[:80]!r}")


class MockBackend(ChatBackend):
    """Deterministic scripted backend; the reply depends only on the script and the prompt."""

    def __init__(self, script: MockScript):
        self.script = script
        self.tag = f"mock:{script.digest[:16]}"
        self._lock = threading.Lock()
        self.call_count = 0

    def complete(self, request: ChatRequest) -> str:
        with self._lock:
            self.call_count += 1
        return self.script.respond(request.user)


class TokenBucket:
    """Blocking token bucket; ``rate`` tokens per second up to ``capacity``."""

    def __init__(self, rate: float, capacity: Optional[float] = None, clock: Callable[[], float] = time.monotonic):
        self.rate = rate
        self.capacity = capacity if capacity is not None else max(1.0, rate)
        self._clock = clock
        self._tokens = self.capacity
        self._updated = clock()
        self._lock = threading.Lock()

    def acquire(self, sleep: Callable[[float], None] = time.sleep):
        if self.rate <= 0:
            return
        while True:
            with self._lock:
                now = self._clock()
                self._tokens = min(self.capacity, self._tokens + (now - self._updated) * self.rate)
                self._updated = now
                if self._tokens >= 1:
                    self._tokens -= 1
                    return
                wait = (1 - self._tokens) / self.rate
            sleep(wait)


class OpenAIChatBackend(ChatBackend):
    """Client for chat-completions compatible endpoints (OpenAI or a local server).

    Throttling (429), server errors (5xx), connection errors and timeouts are retried with exponential backoff
    (1s, 2s, 4s, ...) for at most ``max_attempts`` attempts.
    """

    def __init__(
        self,
        endpoint: str = DEFAULT_ENDPOINT,
        model: str = DEFAULT_MODEL,
        api_key: Optional[str] = None,
        timeout: float = 60.0,
        max_in_flight: int = 4,
        requests_per_second: float = 2.0,
        max_attempts: int = MAX_ATTEMPTS,
        session: Optional[requests.Session] = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.endpoint = endpoint
        self.model = model
        self.tag = f"openai:{endpoint}:{model}"
        self.timeout = timeout
        self.max_attempts = min(max_attempts, MAX_ATTEMPTS)
        self._api_key = api_key
        self._session = session or requests.Session()
        self._in_flight = threading.BoundedSemaphore(max_in_flight)
        self._bucket = TokenBucket(requests_per_second)
        self._sleep = sleep

    def __repr__(self) -> str:
        return f"OpenAIChatBackend(endpoint={self.endpoint!r}, model={self.model!r})"

    @property
    def headers(self) -> dict:
        headers = {"Content-Type": "application/json"}
        if self._api_key:
            headers["Authorization"] = f"Bearer {self._api_key}"
        return headers

    def _create_payload(self, request: ChatRequest) -> dict:
        messages = []
        if request.system:
            messages.append({"role": "system", "content": request.system})
        messages.append({"role": "user", "content": request.user})
        return {
            "model": self.model,
            "messages": messages,
            "max_tokens": request.max_tokens,
            "temperature": request.temperature,
        }

    def _post(self, payload: dict) -> str:
        self._bucket.acquire(self._sleep)
        with self._in_flight:
            response = self._session.post(self.endpoint, json=payload, headers=self.headers, timeout=self.timeout)
        if response.status_code in (401, 403):
            raise AuthError(f"Credential rejected by {self.endpoint} (HTTP {response.status_code})")
        if response.status_code == 429 or response.status_code >= 500:
            raise _RetryableStatus(response.status_code, response.text)
        if not response.ok:
            raise BackendError(f"HTTP {response.status_code} from {self.endpoint}: {response.text[:200]}")
        return self._parse_generation(response.json())

    @staticmethod
    def _parse_generation(data: dict) -> str:
        choices = data.get("choices") or []
        if not choices:
            raise BackendError("Chat completion response has no choices")
        return choices[0].get("message", {}).get("content") or ""

    def complete(self, request: ChatRequest) -> str:
        retrying = Retrying(
            stop=stop_after_attempt(self.max_attempts),
            wait=wait_exponential(multiplier=1, exp_base=2, min=1),
            retry=retry_if_exception_type((_RetryableStatus, requests.Timeout, requests.ConnectionError)),
            before_sleep=before_sleep_log(logger, logging.WARNING),
            sleep=self._sleep,
            reraise=True,
        )
        try:
            return retrying(self._post, self._create_payload(request))
        except requests.Timeout as e:
            raise BackendTimeout(f"{self.endpoint} timed out after {self.max_attempts} attempts") from e
        except (_RetryableStatus, requests.ConnectionError) as e:
            raise BackendUnavailable(f"{self.endpoint} unavailable after {self.max_attempts} attempts: {e}") from e


class CachedBackend(ChatBackend):
    """Persistent response cache: one file per cache key, response text as content."""

    def __init__(self, inner: ChatBackend, directory: Path):
        self.inner = inner
        self.tag = inner.tag
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0

    def complete(self, request: ChatRequest) -> str:
        path = self.directory / cache_key(request, self.tag)
        if path.exists():
            with self._lock:
                self.hits += 1
            return path.read_bytes().decode("utf-8")

        response = self.inner.complete(request)
        fd, tmp_name = tempfile.mkstemp(dir=self.directory, prefix=".tmp-")
        with os.fdopen(fd, "wb") as outfile:
            outfile.write(response.encode("utf-8"))
        os.replace(tmp_name, path)
        with self._lock:
            self.misses += 1
        return response
