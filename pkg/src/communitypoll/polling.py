"""Batch polling of agents: submission, retries, parsing and run persistence."""

from __future__ import annotations

import json
import logging
import os
import random
import re
import tempfile
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

from .errors import AnswerError, MissingAnswerError, ParseError, ProviderError, RunError, UnknownKeyError
from .population import AgentProfile
from .providers import COMPLETED, FAILED, Provider, ProviderRequest, ProviderResult
from .survey import NormalizedAnswer, Questionnaire, render_user_prompt, validate_answer

log = logging.getLogger(__name__)

FENCE = re.compile(r"```[A-Za-z0-9_-]*\s*\n?(.*?)```", re.DOTALL)
KEY_FORMS = re.compile(r"^(?:q|question)?[ _-]?0*(\d+)(?:[ _-]?id)?$", re.IGNORECASE)

REQUESTS_FILE = "requests.jsonl"
RAW_FILE = "raw_results.jsonl"
RESPONSES_FILE = "responses.jsonl"
MANIFEST_FILE = "manifest.json"


@dataclass(frozen=True)
class PollConfig:
    model_name: str = "mock"
    temperature: float | None = None
    max_output_tokens: int | None = None
    max_retries: int = 2
    batch_size: int = 250
    concurrency: int = 4
    poll_interval: float = 5.0
    max_wait: float | None = None
    submit_attempts: int = 5
    backoff_base: float = 1.0
    backoff_cap: float = 60.0
    seed: int = 0

    def __post_init__(self):
        if self.max_retries < 0:
            raise ValueError("max_retries must be nonnegative")
        if self.batch_size < 1 or self.concurrency < 1 or self.submit_attempts < 1:
            raise ValueError("batch_size, concurrency and submit_attempts must be positive")


@dataclass(frozen=True)
class SurveyResponse:
    agent_id: str
    answers: Mapping[str, NormalizedAnswer]
    parse_status: str
    retry_count: int
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.parse_status == "ok"

    def to_dict(self) -> dict:
        return {
            "agent_id": self.agent_id,
            "parse_status": self.parse_status,
            "retry_count": self.retry_count,
            "error": self.error,
            "answers": {k: v.to_dict() for k, v in self.answers.items()},
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "SurveyResponse":
        answers = {k: NormalizedAnswer.from_dict(v) for k, v in data.get("answers", {}).items()}
        return cls(data["agent_id"], answers, data["parse_status"], int(data["retry_count"]), data.get("error"))


@dataclass
class PollResult:
    responses: list[SurveyResponse]
    raw_results: list[dict] = field(default_factory=list)
    tokens: int = 0
    cost: float = 0.0

    @property
    def n_ok(self) -> int:
        return sum(r.ok for r in self.responses)

    @property
    def n_failed(self) -> int:
        return len(self.responses) - self.n_ok


def first_json_object(text: str):
    decoder = json.JSONDecoder()
    for m in re.finditer(r"\{", text):
        try:
            obj, _ = decoder.raw_decode(text, m.start())
        except json.JSONDecodeError:
            continue
        if isinstance(obj, dict):
            return obj
    raise ParseError("no JSON object found in response")


def _question_id(key: str, questionnaire: Questionnaire) -> str:
    if key in questionnaire.ids:
        return key
    m = KEY_FORMS.match(key.strip())
    if m:
        qid = f"q{int(m.group(1)):02d}"
        if qid in questionnaire.ids:
            return qid
    raise UnknownKeyError(f"unknown answer key {key!r}")


def parse_response(raw_text: str | None, questionnaire: Questionnaire) -> dict[str, NormalizedAnswer]:
    """Extract, key-map and validate the answers in one raw model output."""
    if not raw_text:
        raise ParseError("empty response")
    fenced = FENCE.search(raw_text)
    obj = first_json_object(fenced.group(1) if fenced else raw_text)
    raw_answers: dict[str, object] = {}
    for key, value in obj.items():
        qid = _question_id(str(key), questionnaire)
        if qid in raw_answers:
            raise ParseError(f"duplicate answer for {qid}")
        raw_answers[qid] = value
    answers = {}
    for q in questionnaire:
        if q.id not in raw_answers:
            raise MissingAnswerError(f"{q.id}: answer missing", question_id=q.id)
        answers[q.id] = validate_answer(q, raw_answers[q.id])
    return answers


def _evaluate(result: ProviderResult, questionnaire: Questionnaire):
    """Returns (answers, error message); answers is None on failure."""
    if result.status != "ok":
        return None, f"{result.status}: {result.error or 'no detail'}"
    try:
        return parse_response(result.raw_text, questionnaire), None
    except (ParseError, AnswerError) as exc:
        return None, f"{type(exc).__name__}: {exc}"


def atomic_write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def _jsonl(rows) -> str:
    return "".join(json.dumps(r, ensure_ascii=False, sort_keys=True) + "\n" for r in rows)


class Progress:
    def __init__(self, total: int):
        self.total = total
        self.done = 0
        self._lock = threading.Lock()

    def add(self, k: int) -> None:
        with self._lock:
            self.done += k
            log.info("received %d/%d results", self.done, self.total)


class Batcher:
    """Runs provider batch jobs with bounded concurrency and backoff."""

    def __init__(self, provider: Provider, config: PollConfig, sleep: Callable[[float], None]):
        self.provider = provider
        self.config = config
        self.sleep = sleep
        self._jitter = random.Random(config.seed)
        self._jitter_lock = threading.Lock()

    def _delay(self, attempt: int) -> float:
        with self._jitter_lock:
            jitter = self._jitter.random()
        return min(self.config.backoff_cap, self.config.backoff_base * 2 ** attempt) * (0.5 + 0.5 * jitter)

    def run_job(self, batch: Sequence[ProviderRequest]) -> list[ProviderResult]:
        cfg = self.config
        last: Exception | None = None
        for attempt in range(cfg.submit_attempts):
            try:
                handle = self.provider.submit(batch)
                waited = 0.0
                while True:
                    status = self.provider.poll(handle)
                    if status == COMPLETED:
                        break
                    if status == FAILED:
                        raise ProviderError(f"batch {handle} failed")
                    if cfg.max_wait is not None and waited >= cfg.max_wait:
                        return [ProviderResult(r.custom_id, None, "timeout", error="batch wait exceeded")
                                for r in batch]
                    self.sleep(cfg.poll_interval)
                    waited += cfg.poll_interval
                return self._complete(batch, self.provider.fetch(handle))
            except ProviderError as exc:
                last = exc
                log.warning("batch of %d failed (attempt %d/%d): %s", len(batch), attempt + 1,
                            cfg.submit_attempts, exc)
                if attempt + 1 < cfg.submit_attempts:
                    self.sleep(self._delay(attempt))
        raise ProviderError(f"batch failed after {cfg.submit_attempts} attempts: {last}")

    @staticmethod
    def _complete(batch, results) -> list[ProviderResult]:
        """One result per submitted id, in submission order."""
        by_id: dict[str, ProviderResult] = {}
        for r in results:
            by_id.setdefault(r.custom_id, r)
        return [by_id.get(r.custom_id) or ProviderResult(r.custom_id, None, "provider_error",
                                                         error="no result returned") for r in batch]

    def run(self, requests: Sequence[ProviderRequest], progress: Progress) -> list[ProviderResult]:
        size = self.config.batch_size
        batches = [requests[i:i + size] for i in range(0, len(requests), size)]
        out: list[ProviderResult] = []
        errors: list[Exception] = []
        with ThreadPoolExecutor(max_workers=self.config.concurrency) as pool:
            futures = [pool.submit(self.run_job, b) for b in batches]
            for fut in futures:
                try:
                    res = fut.result()
                except ProviderError as exc:
                    errors.append(exc)
                    continue
                progress.add(len(res))
                out.extend(res)
        if errors:
            raise errors[0]
        return out


def build_request(agent: AgentProfile, index: int, count: int, system_text: str, questionnaire: Questionnaire,
                  config: PollConfig, attempt: int = 0, user_text: str | None = None) -> ProviderRequest:
    return ProviderRequest(
        custom_id=agent.agent_id,
        system_text=system_text,
        user_text=user_text if user_text is not None else render_user_prompt(agent, questionnaire),
        model_name=config.model_name,
        temperature=config.temperature,
        max_output_tokens=config.max_output_tokens,
        metadata={"attempt": attempt, "agent_index": index, "agent_count": count},
    )


def _raw_row(result: ProviderResult, attempt: int) -> dict:
    return {"attempt": attempt, **result.to_dict()}


def persist_run(run_dir: Path, requests: Sequence[ProviderRequest], raw_rows: Sequence[dict],
                responses: Sequence[SurveyResponse], manifest: Mapping) -> None:
    atomic_write_text(run_dir / REQUESTS_FILE, _jsonl(r.to_dict() for r in requests))
    atomic_write_text(run_dir / RAW_FILE, _jsonl(raw_rows))
    atomic_write_text(run_dir / RESPONSES_FILE, _jsonl(r.to_dict() for r in responses))
    # The manifest goes last so its presence marks a finalized run.
    atomic_write_text(run_dir / MANIFEST_FILE, json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def run_poll(agents: Sequence[AgentProfile], system_text: str, questionnaire: Questionnaire, provider: Provider,
             config: PollConfig = PollConfig(), run_dir: str | Path | None = None,
             sleep: Callable[[float], None] = time.sleep, manifest_extra: Mapping | None = None) -> PollResult:
    """Poll every agent, retrying invalid outputs up to ``config.max_retries`` times.

    Responses still invalid after the last retry are marked ``failed``; they
    are kept in the output so they can be counted and excluded downstream.
    """
    if not agents:
        raise ValueError("no agents to poll")
    ids = [a.agent_id for a in agents]
    if len(set(ids)) != len(ids):
        raise ValueError("agent ids must be unique")
    count = len(agents)
    base = [build_request(a, i, count, system_text, questionnaire, config) for i, a in enumerate(agents)]
    progress = Progress(count)
    batcher = Batcher(provider, config, sleep)

    final: dict[str, SurveyResponse] = {}
    raw_rows: list[dict] = []
    tokens, cost = 0, 0.0
    pending = list(range(count))
    started = time.time()
    error: Exception | None = None
    for attempt in range(config.max_retries + 1):
        if not pending:
            break
        reqs = [base[i] if attempt == 0 else
                replace(base[i], metadata={**base[i].metadata, "attempt": attempt})
                for i in pending]
        try:
            results = batcher.run(reqs, progress)
        except ProviderError as exc:
            error = exc
            break
        by_id = {r.custom_id: r for r in results}
        still = []
        for i in pending:
            res = by_id[ids[i]]
            raw_rows.append(_raw_row(res, attempt))
            tokens += res.input_tokens + res.output_tokens
            cost += res.cost
            answers, err = _evaluate(res, questionnaire)
            if answers is not None:
                final[ids[i]] = SurveyResponse(ids[i], answers, "ok", attempt)
            elif attempt == config.max_retries:
                final[ids[i]] = SurveyResponse(ids[i], {}, "failed", attempt, err)
            else:
                still.append(i)
        pending = still

    responses = [final[i] for i in ids if i in final]
    result = PollResult(responses, raw_rows, tokens, cost)
    if run_dir is not None:
        manifest = {
            "status": "complete" if error is None else "partial",
            "model_name": config.model_name,
            "provider": getattr(provider, "name", type(provider).__name__),
            "seed": config.seed,
            "max_retries": config.max_retries,
            "n_agents": count,
            "n_ok": result.n_ok,
            "n_failed": result.n_failed,
            "tokens": tokens,
            "cost": cost,
            "started_at": started,
            "finished_at": time.time(),
            **(dict(manifest_extra) if manifest_extra else {}),
        }
        persist_run(Path(run_dir), base, raw_rows, responses, manifest)
    if error is not None:
        raise RunError(f"provider failed; {len(responses)} of {count} responses kept: {error}", partial=responses)
    log.info("poll finished: %d ok, %d failed", result.n_ok, result.n_failed)
    return result


def read_jsonl(path: str | Path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def read_responses(path: str | Path) -> list[SurveyResponse]:
    return [SurveyResponse.from_dict(d) for d in read_jsonl(path)]


def reprocess_raw(run_dir: str | Path, questionnaire: Questionnaire, max_retries: int | None = None) -> list[SurveyResponse]:
    """Rebuild responses from persisted raw results without calling any provider."""
    run_dir = Path(run_dir)
    order = [r["custom_id"] for r in read_jsonl(run_dir / REQUESTS_FILE)]
    if max_retries is None:
        max_retries = json.loads((run_dir / MANIFEST_FILE).read_text())["max_retries"]
    attempts: dict[str, list[dict]] = {}
    for row in read_jsonl(run_dir / RAW_FILE):
        attempts.setdefault(row["custom_id"], []).append(row)
    out = []
    for cid in order:
        rows = sorted(attempts.get(cid, []), key=lambda r: r["attempt"])
        for row in rows:
            answers, err = _evaluate(ProviderResult.from_dict(row), questionnaire)
            if answers is not None:
                out.append(SurveyResponse(cid, answers, "ok", row["attempt"]))
                break
            if row["attempt"] >= max_retries:
                out.append(SurveyResponse(cid, {}, "failed", row["attempt"], err))
                break
    return out
