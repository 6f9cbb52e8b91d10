"""Chat-completion clients: a live OpenAI-compatible client and offline mocks.

Every client exposes ``complete(request, key) -> ChatResponse`` and records
each completed call in a thread-safe trace, keyed by
(record_id, stage tag, question_id). The mocks are pure functions of their
inputs so reruns are byte-identical; they never open a network connection.

The live client reads its API credential from the WARDROUND_API_KEY
environment variable. Credentials are never read from config files.
"""

from __future__ import annotations

import json
import os
import threading
import time
import zlib
from dataclasses import dataclass, field

import requests

from .dataset import CRITERIA_QUESTIONS, DatasetSplit, KeyPointSet, RecordBundle
from .errors import AuthRejected, ContextTooLong, MockScriptError, Transport

API_KEY_ENV_VAR = "WARDROUND_API_KEY"

STAGE_FORWARD = "forward"
STAGE_BACKWARD = "backward"
STAGE_REFLECTION = "reflection"
STAGE_REFINEMENT = "refinement"
STAGE_REGEN = "regen"
STAGE_TAGS = (STAGE_FORWARD, STAGE_BACKWARD, STAGE_REFLECTION, STAGE_REFINEMENT, STAGE_REGEN)

DEFAULT_TOP_P = 0.01
DEFAULT_MAX_OUTPUT_TOKENS = 1024
DEFAULT_TIMEOUT_S = 60.0

RETRY_ATTEMPTS = 3
RETRY_BACKOFF_S = (1.0, 2.0, 4.0)
RETRYABLE_STATUS = frozenset({500, 502, 503, 504, 429})

MOCK_MODES = ("scripted", "echo_gold", "corrupt")


@dataclass(frozen=True)
class CallKey:
    """Identity of one pipeline call, used for tracing and mock scripting."""

    record_id: str
    stage: str
    question_id: str

    def __post_init__(self):
        if self.stage not in STAGE_TAGS:
            raise ValueError(f"unknown stage tag {self.stage!r}")

    def as_string(self) -> str:
        return f"{self.record_id}/{self.stage}/{self.question_id}"

    @classmethod
    def from_string(cls, text: str) -> "CallKey":
        parts = text.rsplit("/", 2)
        if len(parts) != 3:
            raise ValueError(f"bad call key {text!r}")
        return cls(*parts)


@dataclass(frozen=True)
class ChatRequest:
    system_text: str
    user_text: str
    model_name: str = "gpt-4o-mini"
    top_p: float = DEFAULT_TOP_P
    max_output_tokens: int = DEFAULT_MAX_OUTPUT_TOKENS

    def __post_init__(self):
        if not self.system_text or not self.user_text:
            raise ValueError("system_text and user_text must be nonempty")
        if not 0.0 < self.top_p <= 1.0:
            raise ValueError(f"top_p must be in (0, 1], got {self.top_p}")
        if self.max_output_tokens <= 0:
            raise ValueError("max_output_tokens must be positive")


@dataclass(frozen=True)
class ChatResponse:
    raw_text: str
    latency_ms: float = 0.0
    attempt_count: int = 1


class TraceLog:
    """Append-only, thread-safe log of completed calls."""

    def __init__(self):
        self._lock = threading.Lock()
        self._entries: list[CallKey] = []

    def append(self, key: CallKey) -> None:
        with self._lock:
            self._entries.append(key)

    def entries(self) -> tuple[CallKey, ...]:
        with self._lock:
            return tuple(self._entries)

    def __len__(self) -> int:
        with self._lock:
            return len(self._entries)


# --- canned JSON payloads ----------------------------------------------------
# These are the wire shapes the pipeline parses. The mocks and tests build
# them with the same helpers so the two sides cannot drift apart.


def render_diagnosis_json(entities: tuple[str, ...] | list[str], rationale: str = "") -> str:
    obj: dict = {"diagnosis": list(entities)}
    if rationale:
        obj["rationale"] = rationale
    return json.dumps(obj, ensure_ascii=False)


def render_criteria_json(criteria_text: str) -> str:
    return json.dumps({"criteria": criteria_text}, ensure_ascii=False)


def render_evidence_json(evidence: dict[str, dict[str, str]]) -> str:
    return json.dumps({"evidence": evidence}, ensure_ascii=False)


def render_verdict_json(verdicts: dict[str, dict[str, str]]) -> str:
    return json.dumps({"verdicts": verdicts}, ensure_ascii=False)


def _slots_from_key_points(points: KeyPointSet | None) -> dict[str, str]:
    if points is None:
        return {}
    return {
        cat: "；".join(spans)
        for cat, spans in points.by_category().items()
        if spans
    }


# --- mock client --------------------------------------------------------------


@dataclass
class MockScript:
    """Configuration of the offline mock.

    scripted: every response comes from ``entries``; a run checks up front
    that all keys it may request are present.
    echo_gold: responses echo the reference answers of the provided split.
    corrupt: echo_gold payloads wrapped in deterministic junk (prose, code
    fences, full-width quotes, trailing commas) that the repair pass must
    strip.
    """

    mode: str
    entries: dict[CallKey, str] = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in MOCK_MODES:
            raise ValueError(f"mock mode must be one of {MOCK_MODES}, got {self.mode!r}")


def load_mock_script(path: str) -> MockScript:
    with open(path, encoding="utf-8") as fh:
        obj = json.load(fh)
    entries = {
        CallKey.from_string(k): v for k, v in obj.get("entries", {}).items()
    }
    return MockScript(mode=obj.get("mode", "scripted"), entries=entries)


def _corrupt_wrap(payload: str, key: CallKey) -> str:
    """Deterministically wrap a valid payload in junk the repair pass removes."""
    variant = zlib.crc32(key.as_string().encode("utf-8")) % 5
    if variant == 0:
        return f"```json\n{payload}\n```"
    if variant == 1:
        return f"好的，诊断结果如下：{payload}"
    if variant == 2:
        return f"Sure, here you go:\n```\n{payload}\n```\nHope this helps."
    if variant == 3:
        # trailing comma before the closing brace/bracket
        return payload[:-1].rstrip() + ", " + payload[-1]
    return payload.replace('"', "“", 1).replace('"', "”", 1) \
        if payload.count('"') >= 2 else payload


class MockLLMClient:
    """Offline stand-in for the live client. Pure: output depends only on
    (script, split, key); repeated calls with the same key return identical
    bytes and no network connection is ever opened."""

    def __init__(self, script: MockScript, split: DatasetSplit | None = None):
        if script.mode in ("echo_gold", "corrupt") and split is None:
            raise ValueError(f"mock mode {script.mode!r} needs the reference split")
        self.script = script
        self.split = split
        self.trace = TraceLog()
        self._lock = threading.Lock()
        self.request_log: list[tuple[CallKey, ChatRequest]] = []
        self._by_id: dict[str, RecordBundle] = (
            {b.record_id: b for b in split.records} if split else {}
        )

    def _gold_payload(self, key: CallKey) -> str:
        bundle = self._by_id.get(key.record_id)
        if bundle is None:
            raise MockScriptError(f"mock has no record {key.record_id!r}")
        answer = bundle.answer(key.question_id)
        if key.stage in (STAGE_FORWARD, STAGE_REGEN):
            if key.question_id in CRITERIA_QUESTIONS:
                return render_criteria_json(answer.criteria_text)
            return render_diagnosis_json(answer.entities)
        if key.stage == STAGE_BACKWARD:
            # evidence slots drawn from the paired criteria annotation
            paired = "Q2" if key.question_id in ("Q1", "Q3") else "Q5"
            slots = _slots_from_key_points(bundle.answer(paired).key_points)
            if not slots:
                slots = {"symptoms": "见病历记录"}
            return render_evidence_json({e: dict(slots) for e in answer.entities})
        if key.stage == STAGE_REFLECTION:
            return render_verdict_json({e: {"action": "keep"} for e in answer.entities})
        if key.stage == STAGE_REFINEMENT:
            return render_diagnosis_json(answer.entities, rationale="与病历特征相符")
        raise MockScriptError(f"mock cannot answer stage {key.stage!r}")

    def response_for(self, key: CallKey) -> str:
        if self.script.mode == "scripted":
            if key not in self.script.entries:
                raise MockScriptError(f"scripted mock has no entry for {key.as_string()!r}")
            return self.script.entries[key]
        payload = self._gold_payload(key)
        if self.script.mode == "corrupt":
            return _corrupt_wrap(payload, key)
        return payload

    def complete(self, request: ChatRequest, key: CallKey) -> ChatResponse:
        text = self.response_for(key)
        with self._lock:
            self.request_log.append((key, request))
        self.trace.append(key)
        return ChatResponse(raw_text=text, latency_ms=0.0, attempt_count=1)


# --- live client ---------------------------------------------------------------


def _looks_like_context_overflow(status: int, body_text: str) -> bool:
    if status != 400:
        return False
    lowered = body_text.lower()
    return "context" in lowered and ("length" in lowered or "token" in lowered)


class LiveLLMClient:
    """OpenAI-compatible chat-completions client.

    POSTs to <base_url>/chat/completions with a two-message conversation
    (system, user) and the request's top_p; no temperature is sent. Retries
    up to 3 attempts with 1s/2s/4s backoff, but only on transport errors and
    retryable HTTP statuses. The request text is sent byte-for-byte as
    constructed by the pipeline.
    """

    def __init__(
        self,
        base_url: str,
        api_key: str | None = None,
        timeout_s: float = DEFAULT_TIMEOUT_S,
        session: requests.Session | None = None,
        sleep=time.sleep,
        max_attempts: int = RETRY_ATTEMPTS,
        backoff_s: tuple[float, ...] = RETRY_BACKOFF_S,
    ):
        if not base_url:
            raise ValueError("base_url is required for the live client")
        self.base_url = base_url.rstrip("/")
        self.api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV_VAR)
        self.timeout_s = timeout_s
        self.session = session or requests.Session()
        self.sleep = sleep
        self.max_attempts = max_attempts
        self.backoff_s = backoff_s
        self.trace = TraceLog()

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        return headers

    def complete(self, request: ChatRequest, key: CallKey) -> ChatResponse:
        url = f"{self.base_url}/chat/completions"
        body = {
            "model": request.model_name,
            "messages": [
                {"role": "system", "content": request.system_text},
                {"role": "user", "content": request.user_text},
            ],
            "top_p": request.top_p,
            "max_tokens": request.max_output_tokens,
        }
        start = time.monotonic()
        last_detail = "no attempts made"
        for attempt in range(1, self.max_attempts + 1):
            try:
                resp = self.session.post(
                    url, json=body, headers=self._headers(), timeout=self.timeout_s)
            except requests.RequestException as exc:
                last_detail = f"transport error: {exc}"
            else:
                if resp.status_code == 200:
                    latency_ms = (time.monotonic() - start) * 1000.0
                    response = ChatResponse(
                        raw_text=self._extract_text(resp),
                        latency_ms=latency_ms,
                        attempt_count=attempt,
                    )
                    self.trace.append(key)
                    return response
                if resp.status_code in (401, 403):
                    raise AuthRejected(f"endpoint rejected credential (HTTP {resp.status_code})")
                if _looks_like_context_overflow(resp.status_code, resp.text):
                    raise ContextTooLong(resp.text[:500])
                if resp.status_code not in RETRYABLE_STATUS:
                    raise Transport(f"HTTP {resp.status_code}: {resp.text[:500]}")
                last_detail = f"HTTP {resp.status_code}"
            if attempt < self.max_attempts:
                self.sleep(self.backoff_s[min(attempt - 1, len(self.backoff_s) - 1)])
        raise Transport(f"retries exhausted after {self.max_attempts} attempts ({last_detail})")

    def _extract_text(self, resp) -> str:
        try:
            data = resp.json()
            text = data["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise Transport(f"malformed provider response: {exc}") from exc
        if not isinstance(text, str):
            raise Transport("provider returned non-text message content")
        return text
