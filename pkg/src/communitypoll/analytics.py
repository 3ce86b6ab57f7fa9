"""Frequency aggregation, net support, and LLM-driven topic analysis of open text."""

from __future__ import annotations

import json
import logging
import threading
from dataclasses import dataclass, field
from fractions import Fraction
from itertools import count
from typing import Mapping, Sequence

from .errors import DomainError, ParseError, ProviderError
from .polling import Batcher, PollConfig, Progress, SurveyResponse, first_json_object
from .providers import COMPLETED, ProviderRequest, ProviderResult
from .survey import MULTI, NO_ADDITIONAL, SINGLE, Questionnaire

log = logging.getLogger(__name__)

SUPPORT_QUESTION = "q12"
SUPPORT_LEVELS = ("Strongly Support", "Support")
OPPOSE_LEVELS = ("Oppose", "Strongly Oppose")


def percent(count: int, total: int) -> float:
    """Share in percent, one decimal, ties to even, computed on exact rationals."""
    return float(round(Fraction(100 * count, total), 1))


@dataclass(frozen=True)
class AggregateResult:
    question_id: str
    kind: str
    options: tuple[str, ...]
    counts: tuple[int, ...]
    n_ok: int
    n_failed: int
    other_texts: tuple[str, ...] = ()

    @property
    def percentages(self) -> tuple[float, ...]:
        return tuple(percent(c, self.n_ok) for c in self.counts)

    def count(self, option: str) -> int:
        return self.counts[self.options.index(option)]

    def percentage(self, option: str) -> float:
        return percent(self.count(option), self.n_ok)

    def top(self, k: int = 3) -> list[tuple[str, int]]:
        ranked = sorted(zip(self.options, self.counts), key=lambda oc: (-oc[1], self.options.index(oc[0])))
        return ranked[:k]

    def to_dict(self) -> dict:
        return {
            "question_id": self.question_id,
            "kind": self.kind,
            "n_ok": self.n_ok,
            "n_failed": self.n_failed,
            "options": [{"option": o, "count": c, "percent": p}
                        for o, c, p in zip(self.options, self.counts, self.percentages)],
            "other_texts": list(self.other_texts),
        }


def aggregate(responses: Sequence[SurveyResponse], questionnaire: Questionnaire) -> list[AggregateResult]:
    ok = [r for r in responses if r.ok]
    failed = len(responses) - len(ok)
    if not ok:
        raise DomainError("no ok responses to aggregate")
    out = []
    for q in questionnaire:
        tally = dict.fromkeys(q.options, 0)
        others = []
        for r in ok:
            answer = r.answers[q.id]
            for s in answer.selections:
                tally[s] += 1
            if answer.other_text is not None:
                others.append(answer.other_text)
        out.append(AggregateResult(q.id, q.kind, q.options, tuple(tally.values()), len(ok), failed,
                                   tuple(sorted(others))))
    return out


def net_support(result: AggregateResult) -> float:
    """Support share minus opposition share, in percent, from exact counts."""
    support = sum(result.count(o) for o in SUPPORT_LEVELS)
    oppose = sum(result.count(o) for o in OPPOSE_LEVELS)
    return float(Fraction(100 * (support - oppose), result.n_ok))


def open_texts(responses: Sequence[SurveyResponse], question_id: str = "q13") -> list[str]:
    """Free-text messages from ok responses, skipping the no-comment option."""
    out = []
    for r in responses:
        if r.ok:
            a = r.answers[question_id]
            if a.other_text and NO_ADDITIONAL not in a.selections:
                out.append(a.other_text)
    return out


# Topic analysis --------------------------------------------------------------

EXTRACT_INSTRUCTIONS = (
    "You label short survey comments. Return a JSON list of at most {k} key phrases "
    "that capture the main points of the comment. Return only the JSON list."
)
THEME_INSTRUCTIONS = (
    "You group key phrases from survey comments into at most {k} themes. Return a JSON object "
    '{{"themes": [{{"label": "...", "phrases": ["..."]}}]}} in which every phrase is copied '
    "exactly from the input. Return only the JSON object."
)


@dataclass(frozen=True)
class Theme:
    label: str
    count: int
    percentage: float


@dataclass(frozen=True)
class TopicReport:
    themes: tuple[Theme, ...]
    phrase_extractions: tuple[tuple[str, ...], ...]
    n_responses: int
    n_extraction_failures: int = 0
    theme_stage_failed: bool = False
    mapping: Mapping[str, tuple[str, ...]] = field(default_factory=dict)

    @property
    def skipped(self) -> bool:
        return self.n_responses == 0

    def to_dict(self) -> dict:
        return {
            "n_responses": self.n_responses,
            "n_extraction_failures": self.n_extraction_failures,
            "theme_stage_failed": self.theme_stage_failed,
            "themes": [{"label": t.label, "count": t.count, "percent": t.percentage} for t in self.themes],
            "mapping": {k: list(v) for k, v in self.mapping.items()},
            "phrase_extractions": [list(p) for p in self.phrase_extractions],
        }


def _json_list(text: str | None) -> list[str]:
    if not text:
        raise ValueError("empty output")
    start = text.find("[")
    if start < 0:
        raise ValueError("no JSON list")
    value, _ = json.JSONDecoder().raw_decode(text, start)
    if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
        raise ValueError("expected a list of strings")
    return [v.strip() for v in value if v.strip()]


def count_themes(extractions: Sequence[Sequence[str]], mapping: Mapping[str, Sequence[str]],
                 n_responses: int) -> tuple[Theme, ...]:
    """Responses per theme: a response counts once for each theme that holds any of its phrases."""
    phrase_theme: dict[str, list[str]] = {}
    for label, phrases in mapping.items():
        for p in phrases:
            phrase_theme.setdefault(p, []).append(label)
    totals = dict.fromkeys(mapping, 0)
    for phrases in extractions:
        hit = {label for p in phrases for label in phrase_theme.get(p, ())}
        for label in hit:
            totals[label] += 1
    themes = [Theme(label, c, percent(c, n_responses) if n_responses else 0.0) for label, c in totals.items()]
    return tuple(sorted(themes, key=lambda t: (-t.count, t.label)))


def ldta(texts: Sequence[str], provider, *, model_name: str = "mock", max_phrases: int = 3, max_themes: int = 10,
         config: PollConfig | None = None, sleep=None) -> TopicReport:
    """Three-stage topic analysis: phrase extraction, theme grouping, response counting."""
    n = len(texts)
    if n == 0:
        return TopicReport((), (), 0)
    config = config or PollConfig(model_name=model_name, poll_interval=0.0)
    batcher = Batcher(provider, config, sleep or (lambda s: None))
    system1 = EXTRACT_INSTRUCTIONS.format(k=max_phrases)
    reqs = [ProviderRequest(f"text-{i:05d}", system1, t, model_name, metadata={"stage": "extract"})
            for i, t in enumerate(texts)]
    try:
        results = {r.custom_id: r for r in batcher.run(reqs, Progress(n))}
    except ProviderError as exc:
        log.warning("phrase extraction failed: %s", exc)
        results = {}

    extractions: list[tuple[str, ...]] = []
    failures = 0
    for req in reqs:
        res = results.get(req.custom_id)
        try:
            if res is None or res.status != "ok":
                raise ValueError("no result")
            phrases = list(dict.fromkeys(_json_list(res.raw_text)))
        except ValueError:
            failures += 1
            extractions.append(())
            continue
        extractions.append(tuple(phrases[:max_phrases]))

    unique = sorted({p for ps in extractions for p in ps})
    if not unique:
        return TopicReport((), tuple(extractions), n, failures, theme_stage_failed=failures > 0)
    system2 = THEME_INSTRUCTIONS.format(k=max_themes)
    req = ProviderRequest("themes", system2, json.dumps(unique, ensure_ascii=False), model_name,
                          metadata={"stage": "themes"})
    try:
        res = batcher.run_job([req])[0]
        if res.status != "ok":
            raise ValueError(res.error or res.status)
        obj = first_json_object(res.raw_text or "")
        known = set(unique)
        mapping: dict[str, tuple[str, ...]] = {}
        for item in obj.get("themes", [])[:max_themes]:
            label = str(item["label"]).strip()
            mapping[label] = tuple(p for p in item.get("phrases", []) if p in known)
    except (ProviderError, ParseError, ValueError, KeyError, TypeError) as exc:
        log.warning("theme grouping failed: %s", exc)
        return TopicReport((), tuple(extractions), n, failures, theme_stage_failed=True)
    return TopicReport(count_themes(extractions, mapping, n), tuple(extractions), n, failures, False, mapping)


DEFAULT_PHRASE_RULES = (
    ("water", "water supply"),
    ("job", "local jobs"),
    ("bill", "utility bills"),
    ("pollution", "pollution disclosure"),
    ("generator", "backup generators"),
    ("tax", "tax revenue"),
    ("school", "school funding"),
)
DEFAULT_THEME_RULES = (
    ("Water Resource Protection", ("water",)),
    ("Local Employment", ("jobs",)),
    ("Utility Costs", ("bills",)),
    ("Air Quality and Transparency", ("pollution", "generators")),
    ("Public Revenue", ("tax", "school")),
)


class MockTopicProvider:
    """Keyword-driven stand-in for the two LLM stages of topic analysis."""

    name = "mock-topics"

    def __init__(self, phrase_rules=DEFAULT_PHRASE_RULES, theme_rules=DEFAULT_THEME_RULES,
                 fallback_theme: str | None = "Other Concerns", fail_stages: tuple[str, ...] = ()):
        self.phrase_rules = tuple(phrase_rules)
        self.theme_rules = tuple(theme_rules)
        self.fallback_theme = fallback_theme
        self.fail_stages = fail_stages
        self._jobs: dict[str, list[ProviderResult]] = {}
        self._ids = count()
        self._lock = threading.Lock()

    def extract(self, text: str) -> list[str]:
        low = text.casefold()
        return [phrase for key, phrase in self.phrase_rules if key in low][:3]

    def group(self, phrases: Sequence[str]) -> dict:
        themes: dict[str, list[str]] = {}
        for p in phrases:
            low = p.casefold()
            label = next((lab for lab, keys in self.theme_rules if any(k in low for k in keys)), self.fallback_theme)
            if label is not None:
                themes.setdefault(label, []).append(p)
        return {"themes": [{"label": k, "phrases": v} for k, v in themes.items()]}

    def _one(self, r: ProviderRequest) -> ProviderResult:
        stage = r.metadata.get("stage")
        if stage in self.fail_stages:
            return ProviderResult(r.custom_id, None, "provider_error", error="mock stage failure")
        if stage == "themes":
            text = json.dumps(self.group(json.loads(r.user_text)))
        else:
            text = json.dumps(self.extract(r.user_text))
        return ProviderResult(r.custom_id, text)

    def submit(self, requests: Sequence[ProviderRequest]) -> str:
        with self._lock:
            handle = f"topics-{next(self._ids)}"
            self._jobs[handle] = [self._one(r) for r in requests]
        return handle

    def poll(self, handle: str) -> str:
        return COMPLETED

    def fetch(self, handle: str) -> list[ProviderResult]:
        with self._lock:
            return self._jobs.pop(handle)


def summary_lines(results: Sequence[AggregateResult], questionnaire: Questionnaire,
                  topics: TopicReport | None) -> list[str]:
    by_id = {r.question_id: r for r in results}
    first = results[0]
    lines = [f"Responses: {first.n_ok} ok, {first.n_failed} failed", ""]
    if SUPPORT_QUESTION in by_id:
        q12 = by_id[SUPPORT_QUESTION]
        lines.append("Overall attitude")
        lines += [f"  {o}: {p:.1f}%" for o, p in zip(q12.options, q12.percentages)]
        lines.append(f"  Net support: {net_support(q12):+.1f}%")
        lines.append("")
    for q in questionnaire:
        r = by_id[q.id]
        if q.kind == MULTI:
            picks = ", ".join(f"{o} ({percent(c, r.n_ok):.1f}%)" for o, c in r.top(3))
            lines.append(f"{q.id} top 3: {picks}")
        elif q.kind == SINGLE and q.id != SUPPORT_QUESTION:
            o, c = r.top(1)[0]
            lines.append(f"{q.id} most common: {o} ({percent(c, r.n_ok):.1f}%)")
    lines.append("")
    if topics is None or topics.skipped:
        lines.append("Open-text themes: topic analysis skipped")
    else:
        lines.append(f"Open-text themes ({topics.n_responses} responses, "
                     f"{topics.n_extraction_failures} extraction failures)")
        lines += [f"  {t.label}: {t.count} ({t.percentage:.1f}%)" for t in topics.themes]
        if topics.theme_stage_failed:
            lines.append("  theme grouping failed")
    return lines
