"""Chat-completion gateway: a deterministic scripted mock and a live HTTPS backend.

The gateway never rewrites prompts; whatever the caller assembles is exactly
what the backend receives, and every call is appended verbatim to the
transcript so downstream failure analysis can replay it.
"""

from __future__ import annotations

import os
import random
import re
import threading
import time
from dataclasses import dataclass, field

import requests
import yaml

from .errors import ConfigError, GatewayError, UnmatchedPromptError

RETRY_LIMIT = 3
RETRY_BASE_DELAY = 1.0


@dataclass(frozen=True)
class ChatRequest:
    system_prompt: str
    user_message: str
    temperature: float
    model_name: str
    seed_hint: int | None = None

    def __post_init__(self):
        if not self.system_prompt:
            raise ValueError("system_prompt must be non-empty")
        if not self.user_message:
            raise ValueError("user_message must be non-empty")
        if not 0.0 <= self.temperature <= 2.0:
            raise ValueError("temperature must be within [0, 2]")


@dataclass(frozen=True)
class ChatResponse:
    text: str
    backend: str  # live | mock
    latency_ms: int = 0


@dataclass
class TranscriptEntry:
    """One request/response pair; credentials never enter the transcript."""

    system_prompt: str
    user_message: str
    temperature: float
    model_name: str
    response_text: str
    backend: str
    latency_ms: int
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "system_prompt": self.system_prompt,
            "user_message": self.user_message,
            "temperature": self.temperature,
            "model_name": self.model_name,
            "response_text": self.response_text,
            "backend": self.backend,
            "latency_ms": self.latency_ms,
            "meta": dict(self.meta),
        }


@dataclass
class MockRule:
    """Matches requests and cycles through its scripted responses.

    ``match`` is a literal substring, ``pattern`` a regex (DOTALL). ``where``
    selects the text searched: the user message (default), the system prompt,
    or both concatenated.
    """

    responses: list[str]
    match: str | None = None
    pattern: str | None = None
    where: str = "user"

    def __post_init__(self):
        if not self.responses:
            raise ConfigError("mock rule must have at least one response")
        if (self.match is None) == (self.pattern is None):
            raise ConfigError("mock rule needs exactly one of match/pattern")
        if self.where not in ("user", "system", "any"):
            raise ConfigError(f"mock rule: unknown where {self.where!r}")
        if self.pattern is not None:
            self._compiled = re.compile(self.pattern, re.DOTALL)

    def matches(self, request: ChatRequest) -> bool:
        if self.where == "user":
            haystack = request.user_message
        elif self.where == "system":
            haystack = request.system_prompt
        else:
            haystack = request.system_prompt + "\n" + request.user_message
        if self.match is not None:
            return self.match in haystack
        return self._compiled.search(haystack) is not None


class MockScript:
    """Ordered rule list; first matching rule answers the request."""

    def __init__(self, rules):
        self.rules = list(rules)

    @classmethod
    def from_yaml(cls, path) -> "MockScript":
        with open(path, encoding="utf-8") as handle:
            raw = yaml.safe_load(handle)
        if not isinstance(raw, dict) or "rules" not in raw:
            raise ConfigError(f"mock script {path}: expected a top-level 'rules' list")
        rules = []
        for i, item in enumerate(raw["rules"]):
            try:
                rules.append(
                    MockRule(
                        responses=[str(r) for r in item["responses"]],
                        match=item.get("match"),
                        pattern=item.get("pattern"),
                        where=item.get("where", "user"),
                    )
                )
            except (KeyError, TypeError) as exc:
                raise ConfigError(f"mock script {path}: rule {i}: {exc}") from exc
        return cls(rules)

    def find(self, request: ChatRequest) -> int:
        for i, rule in enumerate(self.rules):
            if rule.matches(request):
                return i
        raise UnmatchedPromptError(
            "no mock rule matches request; user message starts: "
            + request.user_message[:120].replace("\n", " ")
        )


class LlmGateway:
    """Uniform completion interface over the mock and live backends."""

    def __init__(self, backend: str, script: MockScript | None = None,
                 endpoint: str = "", credential_env: str = "PLANSQL_API_KEY",
                 retries: int = RETRY_LIMIT, base_delay: float = RETRY_BASE_DELAY,
                 post=None, sleep=time.sleep, rng=None):
        if backend not in ("mock", "live"):
            raise ConfigError(f"unknown gateway backend {backend!r}")
        if backend == "mock" and script is None:
            raise ConfigError("mock backend requires a script")
        if backend == "live" and not endpoint:
            raise ConfigError("live backend requires an endpoint URL")
        self.backend = backend
        self.script = script
        self.endpoint = endpoint
        self.credential_env = credential_env
        self.retries = retries
        self.base_delay = base_delay
        self.transcript: list[TranscriptEntry] = []
        self.call_count = 0
        self._post = post or requests.post
        self._sleep = sleep
        self._rng = rng or random.Random()
        self._lock = threading.Lock()
        self._rule_counters: dict[int, int] = {}

    def complete(self, request: ChatRequest, meta: dict | None = None) -> ChatResponse:
        """Send one request; record the exchange verbatim in the transcript."""
        if self.backend == "mock":
            response = self._complete_mock(request)
        else:
            response = self._complete_live(request)
        entry = TranscriptEntry(
            system_prompt=request.system_prompt,
            user_message=request.user_message,
            temperature=request.temperature,
            model_name=request.model_name,
            response_text=response.text,
            backend=response.backend,
            latency_ms=response.latency_ms,
            meta=dict(meta or {}),
        )
        with self._lock:
            self.transcript.append(entry)
            self.call_count += 1
        return response

    def _complete_mock(self, request: ChatRequest) -> ChatResponse:
        rule_idx = self.script.find(request)
        rule = self.script.rules[rule_idx]
        with self._lock:
            count = self._rule_counters.get(rule_idx, 0)
            self._rule_counters[rule_idx] = count + 1
        text = rule.responses[count % len(rule.responses)]
        # latency pinned to zero so mock transcripts are byte-identical
        return ChatResponse(text=text, backend="mock", latency_ms=0)

    def _complete_live(self, request: ChatRequest) -> ChatResponse:
        credential = os.environ.get(self.credential_env)
        if not credential:
            raise ConfigError(
                f"live backend credential not set (environment variable {self.credential_env})"
            )
        payload = {
            "model": request.model_name,
            "temperature": request.temperature,
            "messages": [
                {"role": "system", "content": request.system_prompt},
                {"role": "user", "content": request.user_message},
            ],
        }
        if request.seed_hint is not None:
            payload["seed"] = request.seed_hint
        last_error: Exception | None = None
        for attempt in range(self.retries + 1):
            if attempt:
                delay = self.base_delay * (2 ** (attempt - 1))
                self._sleep(delay * (1.0 + self._rng.random() * 0.25))
            start = time.monotonic()
            try:
                response = self._post(
                    self.endpoint,
                    json=payload,
                    headers={"Authorization": f"Bearer {credential}"},
                    timeout=120,
                )
                if response.status_code == 429 or response.status_code >= 500:
                    last_error = GatewayError(f"backend returned HTTP {response.status_code}")
                    continue
                response.raise_for_status()
                text = response.json()["choices"][0]["message"]["content"]
                latency = int((time.monotonic() - start) * 1000)
                return ChatResponse(text=text, backend="live", latency_ms=latency)
            except requests.RequestException as exc:
                last_error = exc
                continue
            except (KeyError, IndexError, ValueError) as exc:
                raise GatewayError(f"malformed backend response: {exc}") from exc
        raise GatewayError(f"retries exhausted: {last_error}")

    def entries_for(self, query_id: str) -> list[TranscriptEntry]:
        return [e for e in self.transcript if e.meta.get("query_id") == query_id]
