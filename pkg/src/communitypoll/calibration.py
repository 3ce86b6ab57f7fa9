"""Split conformal calibration of agent-poll option probabilities."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import DomainError

POOLED = "*"
GROUPINGS = ("pooled", "question")
CSV_COLUMNS = ("community_id", "question_id", "option_id", "y_hat", "y")


def _check_prob(name: str, value: float) -> float:
    value = float(value)
    if not 0.0 <= value <= 1.0:
        raise DomainError(f"{name}={value!r} is outside [0, 1]")
    return value


def _check_alpha(alpha: float) -> None:
    if not 0 < alpha < 1:
        raise DomainError(f"alpha must be in (0, 1), got {alpha!r}")


@dataclass(frozen=True)
class CalibrationPair:
    community_id: str
    question_id: str
    option_id: str
    y_hat: float
    y: float

    def __post_init__(self):
        object.__setattr__(self, "y_hat", _check_prob("y_hat", self.y_hat))
        object.__setattr__(self, "y", _check_prob("y", self.y))

    @property
    def key(self) -> tuple[str, str, str]:
        return self.community_id, self.question_id, self.option_id

    @property
    def score(self) -> float:
        return abs(self.y - self.y_hat)


def conformal_rank(n: int, alpha: float) -> int:
    """ceil((n+1)(1-alpha)), evaluated on the decimal value of alpha to avoid float drift."""
    return math.ceil((n + 1) * (1 - Fraction(repr(float(alpha)))))


@dataclass(frozen=True)
class ConformalModel:
    scores: tuple[float, ...]
    alpha: float
    q_hat: float

    @property
    def n(self) -> int:
        return len(self.scores)

    @property
    def is_vacuous(self) -> bool:
        return math.isinf(self.q_hat)

    def to_dict(self) -> dict:
        return {"n": self.n, "alpha": self.alpha, "q_hat": None if self.is_vacuous else self.q_hat}


def calibrate_scores(scores: Iterable[float], alpha: float) -> ConformalModel:
    _check_alpha(alpha)
    ordered = tuple(sorted(float(s) for s in scores))
    if not ordered:
        raise DomainError("calibration needs at least one pair")
    if any(s < 0 or math.isnan(s) for s in ordered):
        raise DomainError("scores must be nonnegative")
    k = conformal_rank(len(ordered), alpha)
    q_hat = ordered[k - 1] if k <= len(ordered) else math.inf
    return ConformalModel(ordered, float(alpha), q_hat)


def calibrate(pairs: Sequence[CalibrationPair], alpha: float) -> ConformalModel:
    return calibrate_scores((p.score for p in pairs), alpha)


def calibrate_grouped(pairs: Sequence[CalibrationPair], alpha: float,
                      grouping: str = "pooled") -> dict[str, ConformalModel]:
    """One model for all pairs, or one per question id."""
    if grouping not in GROUPINGS:
        raise DomainError(f"grouping must be one of {GROUPINGS}")
    if grouping == "pooled":
        return {POOLED: calibrate(pairs, alpha)}
    groups: dict[str, list[CalibrationPair]] = {}
    for p in pairs:
        groups.setdefault(p.question_id, []).append(p)
    return {qid: calibrate(g, alpha) for qid, g in sorted(groups.items())}


def model_for(models: Mapping[str, ConformalModel], question_id: str) -> ConformalModel | None:
    return models.get(question_id, models.get(POOLED))


def predict_interval(model: ConformalModel, y_hat: float) -> tuple[float, float]:
    y_hat = _check_prob("y_hat", y_hat)
    if model.is_vacuous:
        return 0.0, 1.0
    return max(0.0, y_hat - model.q_hat), min(1.0, y_hat + model.q_hat)


def read_pairs_csv(path: str | Path) -> list[CalibrationPair]:
    pairs = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = set(CSV_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise DomainError(f"{path}: missing columns {sorted(missing)}")
        for line, row in enumerate(reader, start=2):
            try:
                pairs.append(CalibrationPair(row["community_id"], row["question_id"], row["option_id"],
                                             float(row["y_hat"]), float(row["y"])))
            except (ValueError, DomainError) as exc:
                raise DomainError(f"{path}:{line}: {exc}") from exc
    return pairs


def beta_truth(rng: np.random.Generator, shape) -> np.ndarray:
    return rng.beta(2.0, 5.0, size=shape)


def gaussian_estimator(sd: float = 0.05) -> Callable[[np.random.Generator, np.ndarray], np.ndarray]:
    def noisy(rng, y):
        return np.clip(y + rng.normal(0.0, sd, size=y.shape), 0.0, 1.0)
    return noisy


def coverage_simulation(alpha: float, n_cal: int, trials: int = 10_000, *, seed: int = 0,
                        true_dist: Callable = beta_truth, estimator: Callable | None = None,
                        loop: bool = False) -> float:
    """Fraction of trials whose fresh test point falls inside the calibrated interval.

    Each trial draws ``n_cal + 1`` exchangeable (y, y_hat) pairs, calibrates on
    the first ``n_cal`` and tests on the last. ``loop=True`` routes every trial
    through :func:`calibrate` and :func:`predict_interval` instead of the
    vectorized path; both give the same answer.
    """
    _check_alpha(alpha)
    if n_cal < 1 or trials < 1:
        raise DomainError("n_cal and trials must be positive")
    estimator = estimator or gaussian_estimator()
    rng = np.random.default_rng(seed)
    y = true_dist(rng, (trials, n_cal + 1))
    y_hat = estimator(rng, y)
    scores = np.abs(y - y_hat)
    if loop:
        hits = 0
        for t in range(trials):
            model = calibrate_scores(scores[t, :n_cal], alpha)
            lo, hi = predict_interval(model, float(y_hat[t, -1]))
            hits += lo <= y[t, -1] <= hi
        return hits / trials
    k = conformal_rank(n_cal, alpha)
    if k > n_cal:
        return 1.0
    q_hat = np.sort(scores[:, :n_cal], axis=1)[:, k - 1]
    lo = np.maximum(0.0, y_hat[:, -1] - q_hat)
    hi = np.minimum(1.0, y_hat[:, -1] + q_hat)
    return float(np.mean((lo <= y[:, -1]) & (y[:, -1] <= hi)))


def coverage_bound(alpha: float, trials: int) -> float:
    """Lower acceptance bound on empirical coverage: 1 - alpha minus three binomial standard errors."""
    return 1 - alpha - 3 * math.sqrt(alpha * (1 - alpha) / trials)
