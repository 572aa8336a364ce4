"""Client for the chat-completion endpoints behind annotation and judging.

Prompt bodies ship as data files with `{{slot}}` placeholders and render
by exact substitution. All network traffic goes through one Transport
abstraction so the entire test suite (and any batch run) can execute
against a scripted mock. Model responses are validated strictly and
rejected when they do not follow the requested output format; silent
repair would hide exactly the model failures worth noticing.
"""

from __future__ import annotations

import ast
import json
import os
import re
import threading
import time
from dataclasses import dataclass, field
from importlib import resources
from typing import Callable, Mapping, Protocol, Sequence

import requests

from .annotations import parse_annotated
from .errors import (
    AuthenticationFailed,
    DriftError,
    ResponseFormatError,
    RetriesExhausted,
    TransportError,
    TransportTimeout,
    ValidationError,
)
from .metrics import JUDGE_DIMENSIONS
from .model import AnnotatedStory

TEMPLATE_NAMES = ("character_qa", "coref_5shot", "pair_match", "judge", "story_gen")

_SLOT = re.compile(r"\{\{([A-Za-z0-9_]+)\}\}")


@dataclass(frozen=True)
class PromptTemplate:
    """A named prompt body with `{{slot}}` placeholders."""

    name: str
    body: str
    required_slots: frozenset[str]

    @classmethod
    def from_body(cls, name: str, body: str) -> "PromptTemplate":
        return cls(name=name, body=body, required_slots=frozenset(_SLOT.findall(body)))

    @classmethod
    def load(cls, name: str) -> "PromptTemplate":
        if name not in TEMPLATE_NAMES:
            raise ValidationError("unknown_template", f"unknown template: {name}")
        body = resources.files("storychains.prompts").joinpath(f"{name}.txt").read_text("utf-8")
        return cls.from_body(name, body)


def render(template: PromptTemplate, slots: Mapping[str, str]) -> str:
    """Substitute every placeholder; slot content passes through verbatim.

    Raises when a placeholder has no value, so no `{{slot}}` of the
    template ever survives into the rendered prompt.
    """
    missing = sorted(template.required_slots - set(slots))
    if missing:
        raise ValidationError("missing_slot", f"missing slot: {missing[0]}")

    def _sub(match: re.Match) -> str:
        name = match.group(1)
        if name not in slots:
            raise ValidationError("missing_slot", f"missing slot: {name}")
        return str(slots[name])

    return _SLOT.sub(_sub, template.body)


def parse_yes_no(raw: str) -> bool:
    """Read a yes/no answer; anything else is a contract violation."""
    match = re.search(r"[A-Za-z]+", raw)
    token = match.group(0).lower() if match else ""
    if token == "yes":
        return True
    if token == "no":
        return False
    raise ResponseFormatError(f"non-conforming answer: {raw!r}", raw=raw)


def pair_match_score(raw: str) -> float:
    """Binary same-person score from a yes/no matcher answer."""
    return 1.0 if parse_yes_no(raw) else 0.0


@dataclass(frozen=True)
class JudgeVerdict:
    """Per-dimension A/B preferences from one pairwise comparison."""

    specificity: str
    coherence: str
    engagement: str
    grounding: str
    characters: str
    overall_preference: str

    def __post_init__(self):
        for dim in JUDGE_DIMENSIONS:
            value = getattr(self, dim)
            if value not in ("A", "B"):
                raise ValidationError("verdict_value", f"{dim} must be 'A' or 'B', got {value!r}")

    def to_doc(self) -> dict:
        return {dim: getattr(self, dim) for dim in JUDGE_DIMENSIONS}

    @classmethod
    def from_doc(cls, doc: Mapping[str, str]) -> "JudgeVerdict":
        missing = [dim for dim in JUDGE_DIMENSIONS if dim not in doc]
        if missing:
            raise ValidationError("missing_dimension", f"missing keys: {', '.join(missing)}")
        return cls(**{dim: doc[dim] for dim in JUDGE_DIMENSIONS})

    def as_json(self) -> str:
        return json.dumps(self.to_doc(), indent=2)


def _first_brace_block(raw: str) -> str:
    start = raw.find("{")
    if start == -1:
        raise ResponseFormatError("no dictionary found in response", raw=raw)
    depth = 0
    for i in range(start, len(raw)):
        if raw[i] == "{":
            depth += 1
        elif raw[i] == "}":
            depth -= 1
            if depth == 0:
                return raw[start : i + 1]
    raise ResponseFormatError("unterminated dictionary in response", raw=raw)


def parse_judge(raw: str) -> JudgeVerdict:
    """Extract and validate the verdict dictionary from a judge response.

    Tolerates surrounding prose and code fences; uses the first brace
    block found. Values must be exactly 'A' or 'B' for all six keys.
    """
    block = _first_brace_block(raw)
    data = None
    for loader in (ast.literal_eval, json.loads):
        try:
            data = loader(block)
            break
        except (ValueError, SyntaxError):
            continue
    if not isinstance(data, dict):
        raise ResponseFormatError("response dictionary could not be parsed", raw=raw)

    problems = []
    values = {}
    for dim in JUDGE_DIMENSIONS:
        if dim not in data:
            problems.append(f"missing key: {dim}")
            continue
        value = data[dim]
        value = value.strip() if isinstance(value, str) else value
        if value not in ("A", "B"):
            problems.append(f"bad value for {dim}: {value!r}")
            continue
        values[dim] = value
    if problems:
        raise ResponseFormatError("; ".join(problems), raw=raw)
    return JudgeVerdict(**values)


def _normalize_ws(text: str) -> str:
    return " ".join(text.split())


def verify_coref_output(original: str, annotated: str) -> AnnotatedStory:
    """Parse annotated model output and confirm it did not rewrite the story.

    Comparison is whitespace-normalized; any other drift fails with the
    offset of the first divergent character. Outputs are rejected, never
    repaired.
    """
    story = parse_annotated(annotated)
    got = _normalize_ws(story.text)
    want = _normalize_ws(original)
    if got != want:
        offset = next(
            (i for i, (a, b) in enumerate(zip(want, got)) if a != b),
            min(len(want), len(got)),
        )
        raise DriftError(
            f"annotated output rewrites the story: expected {want[offset:offset+20]!r}, "
            f"got {got[offset:offset+20]!r}",
            offset=offset,
        )
    return story


@dataclass(frozen=True)
class EndpointConfig:
    """Where and how to reach an OpenAI-compatible chat endpoint."""

    base_url: str
    model: str
    api_key_env: str = "STORYCHAINS_API_KEY"
    timeout: float = 60.0
    max_retries: int = 2
    max_in_flight: int = 4

    def __post_init__(self):
        if self.timeout <= 0:
            raise ValidationError("timeout_range", "timeout must be > 0")
        if self.max_retries < 0:
            raise ValidationError("retries_range", "max_retries must be >= 0")
        if self.max_in_flight < 1:
            raise ValidationError("in_flight_range", "max_in_flight must be >= 1")

    @classmethod
    def from_doc(cls, doc: Mapping) -> "EndpointConfig":
        return cls(
            base_url=doc.get("base_url", ""),
            model=doc.get("model", ""),
            api_key_env=doc.get("api_key_env", "STORYCHAINS_API_KEY"),
            timeout=doc.get("timeout", 60.0),
            max_retries=doc.get("max_retries", 2),
            max_in_flight=doc.get("max_in_flight", 4),
        )


@dataclass(frozen=True)
class ChatRequest:
    prompt: str
    attachments: tuple[str, ...] = ()


class Transport(Protocol):
    def send(self, request: ChatRequest) -> str: ...


_TRANSIENT_STATUS = {408, 429, 500, 502, 503, 504}


class HttpTransport:
    """POSTs OpenAI-shaped chat requests; API key read from the environment."""

    def __init__(self, config: EndpointConfig, session: requests.Session | None = None):
        self._config = config
        self._session = session or requests.Session()

    def send(self, request: ChatRequest) -> str:
        config = self._config
        api_key = os.environ.get(config.api_key_env)
        if not api_key:
            raise AuthenticationFailed(
                f"environment variable {config.api_key_env} is not set"
            )
        if request.attachments:
            content = [{"type": "text", "text": request.prompt}] + [
                {"type": "image_url", "image_url": {"url": ref}} for ref in request.attachments
            ]
        else:
            content = request.prompt
        payload = {
            "model": config.model,
            "messages": [{"role": "user", "content": content}],
        }
        try:
            response = self._session.post(
                config.base_url.rstrip("/") + "/chat/completions",
                json=payload,
                headers={"Authorization": f"Bearer {api_key}"},
                timeout=config.timeout,
            )
        except requests.Timeout as exc:
            raise TransportTimeout(f"request timed out after {config.timeout}s") from exc
        except requests.RequestException as exc:
            raise TransportError(f"request failed: {exc}") from exc
        if response.status_code in (401, 403):
            raise AuthenticationFailed(f"endpoint rejected credentials ({response.status_code})")
        if response.status_code in _TRANSIENT_STATUS:
            raise TransportError(f"transient endpoint error ({response.status_code})")
        if response.status_code != 200:
            raise TransportError(
                f"endpoint error ({response.status_code})", transient=False
            )
        try:
            return response.json()["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise TransportError("malformed endpoint response", transient=False) from exc


class MockTransport:
    """Scripted transport for offline runs and tests.

    `responses` is consumed in order; an entry may be a string (returned)
    or an exception (raised). Requests and the high-water mark of
    concurrent in-flight sends are recorded.
    """

    def __init__(self, responses: Sequence, delay: float = 0.0):
        self._responses = list(responses)
        self._delay = delay
        self._lock = threading.Lock()
        self.requests: list[ChatRequest] = []
        self.in_flight = 0
        self.max_in_flight_seen = 0

    def send(self, request: ChatRequest) -> str:
        with self._lock:
            self.requests.append(request)
            self.in_flight += 1
            self.max_in_flight_seen = max(self.max_in_flight_seen, self.in_flight)
            if not self._responses:
                self.in_flight -= 1
                raise TransportError("mock transport script exhausted", transient=False)
            item = self._responses.pop(0)
        try:
            if self._delay:
                time.sleep(self._delay)
            if isinstance(item, Exception):
                raise item
            return str(item)
        finally:
            with self._lock:
                self.in_flight -= 1


def mock_transport_from_doc(entries: Sequence) -> MockTransport:
    """Build a MockTransport from config-file entries.

    Each entry is a string (a response) or {"error": kind} where kind is
    timeout | auth | transient | fatal.
    """
    responses: list = []
    for entry in entries:
        if isinstance(entry, str):
            responses.append(entry)
        elif isinstance(entry, Mapping) and "error" in entry:
            kind = entry["error"]
            if kind == "timeout":
                responses.append(TransportTimeout("scripted timeout"))
            elif kind == "auth":
                responses.append(AuthenticationFailed("scripted auth failure"))
            elif kind == "transient":
                responses.append(TransportError("scripted transient failure"))
            else:
                responses.append(TransportError("scripted failure", transient=False))
        else:
            raise ValidationError("mock_script", f"bad mock response entry: {entry!r}")
    return MockTransport(responses)


class ChatClient:
    """Completion calls with bounded concurrency and retry on transient errors."""

    def __init__(
        self,
        config: EndpointConfig,
        transport: Transport | None = None,
        sleep: Callable[[float], None] = time.sleep,
        backoff_base: float = 0.5,
    ):
        self.config = config
        self._transport = transport or HttpTransport(config)
        self._sleep = sleep
        self._backoff_base = backoff_base
        self._limiter = threading.BoundedSemaphore(config.max_in_flight)

    def complete(self, prompt: str, attachments: Sequence[str] = ()) -> str:
        """Send one prompt, retrying transient failures with exponential backoff."""
        request = ChatRequest(prompt=prompt, attachments=tuple(attachments))
        attempts = self.config.max_retries + 1
        last: TransportError | None = None
        for attempt in range(attempts):
            if attempt:
                self._sleep(self._backoff_base * (2 ** (attempt - 1)))
            with self._limiter:
                try:
                    return self._transport.send(request)
                except TransportError as exc:
                    if not exc.transient:
                        raise
                    last = exc
        raise RetriesExhausted(f"gave up after {attempts} attempts: {last}")


def complete(
    config: EndpointConfig,
    prompt: str,
    attachments: Sequence[str] = (),
    transport: Transport | None = None,
) -> str:
    """One-shot completion. Use a shared ChatClient when the in-flight
    bound must hold across calls."""
    return ChatClient(config, transport=transport).complete(prompt, attachments)
