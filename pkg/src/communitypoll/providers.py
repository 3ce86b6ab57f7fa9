"""Batch-style LLM provider contract, a deterministic mock, and an HTTP batch client.

Every provider exposes ``submit(requests) -> handle``, ``poll(handle) -> status``
and ``fetch(handle) -> results``. Status is one of ``in_progress``,
``completed`` or ``failed``.
"""

from __future__ import annotations

import itertools
import json
import logging
import os
import threading
import zlib
from dataclasses import dataclass, field
from typing import Mapping, Protocol, Sequence

import numpy as np
import requests

from .errors import ConfigError, ProviderError
from .survey import MULTI, OPEN, SINGLE, NO_ADDITIONAL, Questionnaire, canonical_answer_text

log = logging.getLogger(__name__)

IN_PROGRESS, COMPLETED, FAILED = "in_progress", "completed", "failed"
RESULT_STATUSES = ("ok", "provider_error", "timeout")


@dataclass(frozen=True)
class ProviderRequest:
    custom_id: str
    system_text: str
    user_text: str
    model_name: str = "mock"
    temperature: float | None = None
    max_output_tokens: int | None = None
    metadata: Mapping = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "custom_id": self.custom_id,
            "model_name": self.model_name,
            "temperature": self.temperature,
            "max_output_tokens": self.max_output_tokens,
            "metadata": dict(self.metadata),
            "system_text": self.system_text,
            "user_text": self.user_text,
        }


@dataclass(frozen=True)
class ProviderResult:
    custom_id: str
    raw_text: str | None
    status: str = "ok"
    input_tokens: int = 0
    output_tokens: int = 0
    cost: float = 0.0
    error: str | None = None

    def __post_init__(self):
        if self.status not in RESULT_STATUSES:
            raise ValueError(f"unknown result status {self.status!r}")

    def to_dict(self) -> dict:
        return {
            "custom_id": self.custom_id,
            "status": self.status,
            "raw_text": self.raw_text,
            "input_tokens": self.input_tokens,
            "output_tokens": self.output_tokens,
            "cost": self.cost,
            "error": self.error,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "ProviderResult":
        keys = ("custom_id", "raw_text", "status", "input_tokens", "output_tokens", "cost", "error")
        return cls(**{k: data[k] for k in keys if k in data})


class Provider(Protocol):
    name: str

    def submit(self, requests: Sequence[ProviderRequest]) -> str: ...

    def poll(self, handle: str) -> str: ...

    def fetch(self, handle: str) -> list[ProviderResult]: ...


def _crc(text: str) -> int:
    return zlib.crc32(text.encode("utf-8"))


def _approx_tokens(text: str | None) -> int:
    return 0 if not text else max(1, len(text) // 4)


def largest_remainder(weights: Sequence[float], n: int) -> list[int]:
    """Integer counts summing to ``n`` proportional to ``weights`` (ties go to earlier entries)."""
    w = np.asarray(weights, dtype=float)
    if n < 0 or np.any(w < 0) or w.sum() <= 0:
        raise ValueError("weights must be nonnegative with positive sum and n >= 0")
    exact = w / w.sum() * n
    counts = np.floor(exact).astype(int)
    short = n - int(counts.sum())
    order = sorted(range(len(w)), key=lambda i: (-(exact[i] - counts[i]), i))
    for i in order[:short]:
        counts[i] += 1
    return counts.tolist()


DEFAULT_OPEN_TEXTS = (
    "Protect our water supply before anything else.",
    "Make sure local people get the jobs.",
    "Keep utility bills from going up for residents.",
    "Be transparent about pollution from backup generators.",
    "The tax revenue should fund schools and roads.",
)


@dataclass(frozen=True)
class BehaviorProfile:
    """What the mock answers and which faults it injects.

    ``weights`` maps question id to option weights (missing questions are
    uniform). ``quotas`` maps question id to option shares that are turned
    into exact per-run counts, using each request's ``agent_index`` and
    ``agent_count`` metadata. Multi-select questions draw 1 to 3 distinct
    options with probabilities ``selection_counts``.
    """

    weights: Mapping[str, Mapping[str, float]] = field(default_factory=dict)
    quotas: Mapping[str, Mapping[str, float]] = field(default_factory=dict)
    selection_counts: tuple[float, float, float] = (0.3, 0.4, 0.3)
    other_rate: float = 0.0
    open_texts: tuple[str, ...] = DEFAULT_OPEN_TEXTS
    no_additional_rate: float = 0.2
    malformed_first_attempts: int = 0
    over_select_questions: tuple[str, ...] = ()
    over_select_every: int = 1
    timeout_rate: float = 0.0
    provider_error_rate: float = 0.0
    submit_failures: int = 0
    fenced: bool = False

    def __post_init__(self):
        for name in ("other_rate", "no_additional_rate", "timeout_rate", "provider_error_rate"):
            if not 0 <= getattr(self, name) <= 1:
                raise ConfigError(f"{name} must be in [0, 1]")
        if len(self.selection_counts) != 3 or sum(self.selection_counts) <= 0:
            raise ConfigError("selection_counts needs three weights with positive sum")
        if self.over_select_every < 1:
            raise ConfigError("over_select_every must be at least 1")

    @classmethod
    def from_dict(cls, data: Mapping | None) -> "BehaviorProfile":
        data = dict(data or {})
        for key in ("selection_counts", "open_texts", "over_select_questions"):
            if key in data:
                data[key] = tuple(data[key])
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(f"unknown mock behavior setting: {exc}") from exc

    def over_selects(self, agent_index: int) -> bool:
        return bool(self.over_select_questions) and agent_index % self.over_select_every == 0


class MockProvider:
    """Deterministic survey respondent.

    Each answer is drawn from a generator seeded by (seed, agent id, attempt,
    question), so outputs do not depend on batching or thread scheduling.
    """

    name = "mock"

    def __init__(self, questionnaire: Questionnaire, seed: int = 0, behavior: BehaviorProfile | None = None):
        self.questionnaire = questionnaire
        self.seed = int(seed)
        self.behavior = behavior or BehaviorProfile()
        self._jobs: dict[str, list[ProviderResult]] = {}
        self._counter = itertools.count()
        self._lock = threading.Lock()
        self._submit_calls = 0
        self._quota_cache: dict[tuple[str, int], list[str]] = {}
        for qid, table in itertools.chain(self.behavior.weights.items(), self.behavior.quotas.items()):
            q = questionnaire[qid]
            unknown = set(table) - set(q.options)
            if unknown:
                raise ConfigError(f"mock weights for {qid} name unknown options {sorted(unknown)}")

    def submit(self, requests: Sequence[ProviderRequest]) -> str:
        with self._lock:
            self._submit_calls += 1
            if self._submit_calls <= self.behavior.submit_failures:
                raise ProviderError(f"mock submit failure {self._submit_calls}")
            handle = f"mock-batch-{next(self._counter)}"
        results = [self.respond(r) for r in requests]
        with self._lock:
            self._jobs[handle] = results
        return handle

    def poll(self, handle: str) -> str:
        if handle not in self._jobs:
            raise ProviderError(f"unknown batch {handle}")
        return COMPLETED

    def fetch(self, handle: str) -> list[ProviderResult]:
        with self._lock:
            return list(self._jobs.pop(handle))

    def _rng(self, custom_id: str, attempt: int, salt: str) -> np.random.Generator:
        return np.random.default_rng([self.seed, _crc(custom_id), attempt, _crc(salt)])

    def _quota_assignment(self, qid: str, n: int) -> list[str]:
        key = (qid, n)
        with self._lock:
            if key not in self._quota_cache:
                q = self.questionnaire[qid]
                table = self.behavior.quotas[qid]
                shares = [table.get(o, 0.0) for o in q.options]
                slots = [o for o, c in zip(q.options, largest_remainder(shares, n)) for _ in range(c)]
                perm = np.random.default_rng([self.seed, _crc(qid), n]).permutation(n)
                self._quota_cache[key] = [slots[i] for i in perm]
            return self._quota_cache[key]

    def _probs(self, qid: str, options: Sequence[str]) -> np.ndarray:
        table = self.behavior.weights.get(qid)
        if table is None:
            return np.full(len(options), 1.0 / len(options))
        w = np.array([table.get(o, 0.0) for o in options], dtype=float)
        return w / w.sum()

    def answer(self, qid: str, custom_id: str, attempt: int, agent_index: int, agent_count: int) -> str:
        b = self.behavior
        q = self.questionnaire[qid]
        rng = self._rng(custom_id, attempt, qid)
        if q.kind == OPEN:
            if rng.random() < b.no_additional_rate:
                return NO_ADDITIONAL
            return b.open_texts[int(rng.integers(len(b.open_texts)))]
        if q.kind == MULTI and qid in b.over_select_questions and b.over_selects(agent_index):
            return ", ".join([o for o in q.options if o != q.other_option][:4])
        if q.kind == SINGLE:
            if qid in b.quotas:
                return self._quota_assignment(qid, agent_count)[agent_index]
            return q.options[int(rng.choice(len(q.options), p=self._probs(qid, q.options)))]
        choices = [o for o in q.options if o != q.other_option]
        p = self._probs(qid, choices) if qid in b.weights else np.full(len(choices), 1.0 / len(choices))
        counts = np.asarray(b.selection_counts, dtype=float)
        k = int(rng.choice(3, p=counts / counts.sum())) + 1
        k = min(k, int(np.count_nonzero(p)))
        picks = [choices[i] for i in sorted(rng.choice(len(choices), size=k, replace=False, p=p))]
        other = None
        if q.other_option and rng.random() < b.other_rate:
            other = b.open_texts[int(rng.integers(len(b.open_texts)))]
            picks = picks[: 2] + [q.other_option]
        return canonical_answer_text(q, picks, other)

    def respond(self, request: ProviderRequest) -> ProviderResult:
        b = self.behavior
        meta = request.metadata
        attempt = int(meta.get("attempt", 0))
        index = int(meta.get("agent_index", 0))
        count = int(meta.get("agent_count", index + 1))
        rng = self._rng(request.custom_id, attempt, "status")
        tokens_in = _approx_tokens(request.system_text) + _approx_tokens(request.user_text)
        draw = rng.random()
        if draw < b.timeout_rate:
            return ProviderResult(request.custom_id, None, "timeout", tokens_in, 0, error="mock timeout")
        if draw < b.timeout_rate + b.provider_error_rate:
            return ProviderResult(request.custom_id, None, "provider_error", tokens_in, 0, error="mock error")
        if attempt < b.malformed_first_attempts:
            text = '{"q01": "Positive", "q02": '
        else:
            body = {qid: self.answer(qid, request.custom_id, attempt, index, count) for qid in self.questionnaire.ids}
            text = json.dumps(body, indent=2, ensure_ascii=False)
            if b.fenced:
                text = f"```json\n{text}\n```"
        return ProviderResult(request.custom_id, text, "ok", tokens_in, _approx_tokens(text))


class HttpBatchProvider:
    """Client for OpenAI-compatible batch endpoints (files upload, batch create, output download)."""

    name = "http_batch"
    endpoint = "/v1/chat/completions"

    def __init__(self, base_url: str, api_key: str | None = None, *, session: requests.Session | None = None,
                 timeout: float = 60.0, completion_window: str = "24h",
                 price_per_1k_tokens: tuple[float, float] = (0.0, 0.0)):
        self.base_url = base_url.rstrip("/")
        self.api_key = api_key if api_key is not None else os.environ.get("PROVIDER_API_KEY")
        if not self.api_key:
            raise ConfigError("PROVIDER_API_KEY is not set")
        self.session = session or requests.Session()
        self.timeout = timeout
        self.completion_window = completion_window
        self.price_per_1k_tokens = price_per_1k_tokens

    def _headers(self) -> dict:
        return {"Authorization": f"Bearer {self.api_key}"}

    def _call(self, method: str, path: str, **kwargs):
        try:
            resp = self.session.request(method, self.base_url + path, headers=self._headers(),
                                        timeout=self.timeout, **kwargs)
        except requests.RequestException as exc:
            raise ProviderError(f"{method} {path} failed: {exc}") from exc
        if resp.status_code >= 400:
            raise ProviderError(f"{method} {path} returned HTTP {resp.status_code}: {resp.text[:200]}")
        return resp

    def _line(self, r: ProviderRequest) -> dict:
        body: dict = {
            "model": r.model_name,
            "messages": [{"role": "system", "content": r.system_text}, {"role": "user", "content": r.user_text}],
        }
        if r.temperature is not None:
            body["temperature"] = r.temperature
        if r.max_output_tokens is not None:
            body["max_tokens"] = r.max_output_tokens
        return {"custom_id": r.custom_id, "method": "POST", "url": self.endpoint, "body": body}

    def submit(self, requests_: Sequence[ProviderRequest]) -> str:
        payload = "\n".join(json.dumps(self._line(r)) for r in requests_).encode("utf-8")
        file_id = self._call("POST", "/files", data={"purpose": "batch"},
                             files={"file": ("batch.jsonl", payload, "application/jsonl")}).json()["id"]
        batch = self._call("POST", "/batches", json={"input_file_id": file_id, "endpoint": self.endpoint,
                                                     "completion_window": self.completion_window}).json()
        return batch["id"]

    def poll(self, handle: str) -> str:
        status = self._call("GET", f"/batches/{handle}").json().get("status")
        if status == "completed":
            return COMPLETED
        if status in ("failed", "expired", "cancelled"):
            return FAILED
        return IN_PROGRESS

    def fetch(self, handle: str) -> list[ProviderResult]:
        batch = self._call("GET", f"/batches/{handle}").json()
        out_id = batch.get("output_file_id")
        if not out_id:
            raise ProviderError(f"batch {handle} has no output file")
        text = self._call("GET", f"/files/{out_id}/content").text
        results = []
        for line in text.splitlines():
            if line.strip():
                results.append(self._result(json.loads(line)))
        return results

    def _result(self, item: Mapping) -> ProviderResult:
        cid = item.get("custom_id")
        resp = item.get("response") or {}
        if item.get("error") or resp.get("status_code", 200) >= 400:
            return ProviderResult(cid, None, "provider_error", error=json.dumps(item.get("error") or resp.get("body")))
        body = resp.get("body") or {}
        try:
            content = body["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError):
            return ProviderResult(cid, None, "provider_error", error="response has no message content")
        usage = body.get("usage") or {}
        tin, tout = int(usage.get("prompt_tokens", 0)), int(usage.get("completion_tokens", 0))
        cost = (tin * self.price_per_1k_tokens[0] + tout * self.price_per_1k_tokens[1]) / 1000
        return ProviderResult(cid, content, "ok", tin, tout, cost)
