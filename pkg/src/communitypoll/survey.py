"""Questionnaire model, prompt rendering and answer normalization."""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

from .errors import (
    ConfigError,
    InvalidAnswerError,
    MissingAnswerError,
    OverSelectionError,
    RenderError,
)
from .population import AgentProfile

SINGLE = "single_select"
MULTI = "multi_select_max3"
OPEN = "open_text"
KINDS = (SINGLE, MULTI, OPEN)
MAX_SELECTIONS = 3
NO_ADDITIONAL = "No additional thoughts"

# Attribute order of the role block, with the literal suffix/prefix each one carries.
ROLE_FIELDS = (
    ("age_group", "{}"),
    ("sex", "{}"),
    ("race", "{}"),
    ("ethnicity", "{}"),
    ("education_level", "{} education"),
    ("marital_status", "{}"),
    ("language_at_home", "{}"),
    ("citizenship", "{}"),
    ("employment_status", "{}"),
    ("household_income", "{} household yearly income"),
    ("housing", "{}"),
    ("vehicles", "household has {}"),
)

USER_TEMPLATE = """\
ASSUME THE ROLE of this resident: {role}

Put yourself completely in this person's position. Answer ALL questions from your perspective:

{questions}

Give short, clear answers. Be honest and share your real thoughts even if they're critical.

Please respond in JSON format with the following structure:
{json_block}"""


def _fold(text: str) -> str:
    return " ".join(text.split()).casefold()


@dataclass(frozen=True)
class Question:
    id: str
    text: str
    kind: str
    options: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "options", tuple(self.options))
        if self.kind not in KINDS:
            raise ConfigError(f"question {self.id}: unknown kind {self.kind!r}")
        if len(self.options) < 2:
            raise ConfigError(f"question {self.id}: at least two options are required")
        if len({_fold(o) for o in self.options}) != len(self.options):
            raise ConfigError(f"question {self.id}: duplicate options")
        if self.kind == OPEN and self.options != (NO_ADDITIONAL, "Other (please specify)"):
            raise ConfigError(f"question {self.id}: open_text options must be the fixed pair")

    @property
    def other_option(self) -> str | None:
        for option in self.options:
            if option.casefold().startswith("other"):
                return option
        return None

    def render(self) -> str:
        return "\n".join([f"{self.id}. {self.text}"] + [f"- {o}" for o in self.options])

    def to_dict(self) -> dict:
        return {"id": self.id, "text": self.text, "kind": self.kind, "options": list(self.options)}


@dataclass(frozen=True)
class Questionnaire:
    version: str
    questions: tuple[Question, ...]

    def __post_init__(self):
        object.__setattr__(self, "questions", tuple(self.questions))
        ids = [q.id for q in self.questions]
        if len(ids) != 13:
            raise ConfigError(f"questionnaire must have 13 questions, got {len(ids)}")
        if len(set(ids)) != len(ids):
            raise ConfigError("question ids must be unique")
        if sum(q.kind == OPEN for q in self.questions) != 1:
            raise ConfigError("questionnaire must have exactly one open_text question")

    @property
    def ids(self) -> tuple[str, ...]:
        return tuple(q.id for q in self.questions)

    def __getitem__(self, question_id: str) -> Question:
        for q in self.questions:
            if q.id == question_id:
                return q
        raise KeyError(question_id)

    def __iter__(self):
        return iter(self.questions)

    def render(self) -> str:
        return "\n\n".join(q.render() for q in self.questions)

    def json_block(self) -> str:
        lines = [f'    "{qid}": "your_answer"' for qid in self.ids]
        return "{\n" + ",\n".join(lines) + "\n}"

    def to_dict(self) -> dict:
        return {"version": self.version, "questions": [q.to_dict() for q in self.questions]}

    @classmethod
    def from_dict(cls, data: dict) -> "Questionnaire":
        try:
            return cls(str(data["version"]), tuple(Question(**q) for q in data["questions"]))
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"malformed questionnaire: {exc}") from exc


def load_questionnaire(path: str | Path | None = None) -> Questionnaire:
    if path is None:
        text = (resources.files("communitypoll") / "data" / "questionnaire_v1.json").read_text(encoding="utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    return Questionnaire.from_dict(json.loads(text))


@dataclass(frozen=True)
class PromptPair:
    system_text: str
    user_text: str


def render_user_prompt(agent: AgentProfile, questionnaire: Questionnaire) -> str:
    parts = []
    for name, fmt in ROLE_FIELDS:
        value = getattr(agent, name, None)
        if value is None or value == "":
            raise RenderError(f"agent {agent.agent_id} has no {name}", placeholder=name)
        parts.append(fmt.format(value))
    return USER_TEMPLATE.format(role=", ".join(parts), questions=questionnaire.render(),
                                json_block=questionnaire.json_block())


def prompt_pairs(system_text: str, agents: Iterable[AgentProfile], questionnaire: Questionnaire) -> list[PromptPair]:
    return [PromptPair(system_text, render_user_prompt(a, questionnaire)) for a in agents]


@dataclass(frozen=True)
class NormalizedAnswer:
    """Canonical selections plus any free text captured with them."""

    selections: tuple[str, ...]
    other_text: str | None = None
    text: str | None = None

    def to_dict(self) -> dict:
        out: dict = {"selections": list(self.selections)}
        if self.other_text is not None:
            out["other_text"] = self.other_text
        if self.text is not None:
            out["text"] = self.text
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "NormalizedAnswer":
        return cls(tuple(data["selections"]), data.get("other_text"), data.get("text"))


def _other_payload(token: str, label: str) -> str | None:
    """Strip an 'Other' prefix (with or without the label's parenthetical) and separators."""
    body = token.strip()
    for prefix in (label, "other (please specify)", "other"):
        if body.casefold().startswith(prefix.casefold()):
            body = body[len(prefix):]
            break
    body = body.lstrip(" :-–").strip()
    return body or None


def _match(question: Question, token: str) -> str | None:
    key = _fold(token)
    for option in question.options:
        if _fold(option) == key:
            return option
    return None


def _is_other(question: Question, token: str) -> bool:
    return question.other_option is not None and _fold(token).startswith("other")


def _as_text(question: Question, raw) -> str:
    if isinstance(raw, str):
        return raw
    if isinstance(raw, (list, tuple)) and all(isinstance(r, str) for r in raw):
        return ", ".join(raw)
    raise InvalidAnswerError(f"{question.id}: answer must be text, got {type(raw).__name__}", question_id=question.id)


def _is_blank(raw) -> bool:
    if raw is None:
        return True
    if isinstance(raw, str):
        return not raw.strip()
    if isinstance(raw, (list, tuple)):
        return all(isinstance(r, str) and not r.strip() for r in raw)
    return False


def _multi_tokens(question: Question, raw) -> list[tuple[str, str | None]]:
    """Split a multi-select answer into (token, other payload) pairs."""
    if isinstance(raw, (list, tuple)):
        return [(t, _other_payload(t, question.other_option) if _is_other(question, t) else None)
                for t in map(lambda r: _as_text(question, r), raw) if t.strip()]
    pieces = raw.split(",")
    out = []
    for i, piece in enumerate(pieces):
        if not piece.strip():
            continue
        if _match(question, piece) is None and _is_other(question, piece):
            # Free text may contain commas, so it runs to the end of the answer.
            out.append((piece, _other_payload(",".join(pieces[i:]), question.other_option)))
            break
        out.append((piece, None))
    return out


def validate_answer(question: Question, raw) -> NormalizedAnswer:
    if _is_blank(raw):
        raise MissingAnswerError(f"{question.id}: empty answer", question_id=question.id)

    if question.kind == OPEN:
        text = _as_text(question, raw).strip()
        if _fold(text).rstrip(".") == _fold(NO_ADDITIONAL):
            return NormalizedAnswer((NO_ADDITIONAL,))
        label = question.options[1]
        payload = _other_payload(text, label) if _fold(text).startswith("other") else text
        return NormalizedAnswer((label,), other_text=payload, text=text)

    if question.kind == SINGLE:
        if isinstance(raw, (list, tuple)):
            if len(raw) != 1:
                raise InvalidAnswerError(f"{question.id}: expected exactly one selection", question_id=question.id)
            raw = raw[0]
        text = _as_text(question, raw)
        option = _match(question, text)
        if option is not None:
            return NormalizedAnswer((option,))
        if _is_other(question, text):
            return NormalizedAnswer((question.other_option,), other_text=_other_payload(text, question.other_option))
        raise InvalidAnswerError(f"{question.id}: {text.strip()!r} is not an option", question_id=question.id)

    if not isinstance(raw, (list, tuple)):
        raw = _as_text(question, raw)
    selections: list[str] = []
    other_text = None
    for token, payload in _multi_tokens(question, raw):
        option = _match(question, token)
        if option is None and _is_other(question, token):
            option, other_text = question.other_option, payload
        if option is None:
            raise InvalidAnswerError(f"{question.id}: {token.strip()!r} is not an option", question_id=question.id)
        if option not in selections:
            selections.append(option)
    if not selections:
        raise MissingAnswerError(f"{question.id}: no selections", question_id=question.id)
    if len(selections) > MAX_SELECTIONS:
        raise OverSelectionError(f"{question.id}: {len(selections)} selections exceed {MAX_SELECTIONS}",
                                 question_id=question.id)
    return NormalizedAnswer(tuple(selections), other_text=other_text)


def canonical_answer_text(question: Question, selections: Sequence[str], other_text: str | None = None) -> str:
    """Render selections the way a respondent is asked to write them."""
    parts = []
    for s in selections:
        if s == question.other_option and other_text:
            parts.append(f"Other: {other_text}")
        else:
            parts.append(s)
    if question.kind == MULTI and other_text:
        # Keep the free-text item last so its commas do not split other selections.
        parts.sort(key=lambda p: p.startswith("Other:"))
    return ", ".join(parts)
