"""Agent population synthesis on top of the IPF joint distribution."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import tempfile
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy import stats

from .census import (
    ADULT_TEEN_BRACKET,
    ATTAINMENT_LABELS,
    ENROLLMENT_CATEGORIES,
    IPF_DIMENSIONS,
    TEEN_BRACKET,
    YOUNG_ADULT_AGE_GROUPS,
    MarginalTable,
    is_adult,
    partition_age_bracket,
)
from .errors import ConfigError, DomainError, PreconditionError, SynthesisError
from .ipf import IpfConfig, JointDistribution, ipf_fit

log = logging.getLogger(__name__)

POPULATION_FORMAT = "communitypoll-population/1"
AGENT_FIELDS = IPF_DIMENSIONS + ("marital_status", "education_level")

DISPLAY_NAMES = {
    "age_group": "Age Group",
    "sex": "Sex",
    "race": "Race",
    "ethnicity": "Ethnicity",
    "citizenship": "Citizenship",
    "language_at_home": "Language at Home",
    "employment_status": "Employment Status",
    "household_income": "Household Income",
    "housing": "Housing",
    "vehicles": "Vehicles",
}
REPORT_ORDER = tuple(DISPLAY_NAMES)

# Census marital tables are not age-specific; these multipliers tilt them
# toward never-married for young adults and widowed for the elderly before
# renormalizing. The magnitudes are a configurable stand-in.
DEFAULT_MARITAL_MULTIPLIERS: dict[str, dict[str, float]] = {
    ADULT_TEEN_BRACKET: {"Never Married": 3.0},
    "20 to 24 years": {"Never Married": 3.0},
    "75 to 84 years": {"Widowed": 4.0},
    "85 years and over": {"Widowed": 4.0},
}


@dataclass(frozen=True)
class AgentProfile:
    agent_id: str
    language_at_home: str
    citizenship: str
    employment_status: str
    household_income: str
    housing: str
    vehicles: str
    age_group: str
    sex: str
    race: str
    ethnicity: str
    marital_status: str | None = None
    education_level: str | None = None

    def check(self) -> None:
        """Raise PreconditionError unless the profile is a complete, coherent adult."""
        if not is_adult(self.age_group):
            raise PreconditionError(f"{self.agent_id}: age group {self.age_group!r} is under 18")
        for name in AGENT_FIELDS:
            if getattr(self, name) is None:
                raise PreconditionError(f"{self.agent_id}: missing {name}")
        young = self.age_group in YOUNG_ADULT_AGE_GROUPS
        allowed = ENROLLMENT_CATEGORIES if young else ATTAINMENT_LABELS
        if self.education_level not in allowed:
            raise PreconditionError(
                f"{self.agent_id}: education {self.education_level!r} inconsistent with age {self.age_group!r}")


@dataclass(frozen=True)
class FitReport:
    dimension: str
    chi_square: float
    degrees_of_freedom: int
    p_value: float
    alpha: float = 0.05
    bins: tuple[str, ...] = ()

    @property
    def passed(self) -> bool:
        return self.p_value > self.alpha

    def row(self) -> str:
        verdict = "Fail to reject H0" if self.passed else "Reject H0"
        name = DISPLAY_NAMES.get(self.dimension, self.dimension)
        return f"{name:<18} {self.chi_square:>9.4f} {self.degrees_of_freedom:>4d} {self.p_value:>7.4f}  {verdict}"

    def to_dict(self) -> dict:
        data = asdict(self)
        data["bins"] = list(self.bins)
        data["passed"] = self.passed
        return data


def format_fit_table(reports: Iterable[FitReport], title: str = "Chi-square goodness-of-fit") -> str:
    reports = list(reports)
    alpha = reports[0].alpha if reports else 0.05
    lines = [title, f"{'Attribute':<18} {'Chi2':>9} {'df':>4} {'p':>7}  Result (alpha={alpha:g})"]
    lines += [r.row() for r in reports]
    return "\n".join(lines) + "\n"


def _rng(seed) -> np.random.Generator:
    return np.random.default_rng(seed)


def sample_cells(joint: JointDistribution, n: int, seed, age_dimension: str = "age_group") -> np.ndarray:
    """Draw ``n`` cells, redrawing any that fall in a minor age group."""
    if int(n) < 1:
        raise DomainError("n must be a positive integer")
    rng = _rng(seed)
    if age_dimension not in joint.dimensions:
        return joint.draw(n, rng)
    a = joint.dimensions.index(age_dimension)
    adult = np.array([is_adult(c) for c in joint.categories[a]])
    adult_share = float(joint.marginal(a)[adult].sum() / joint.total())
    if adult_share <= 0:
        raise DomainError("joint distribution places no mass on adult age groups")
    kept = []
    have = 0
    while have < n:
        batch = int((n - have) / adult_share * 1.1) + 16
        draws = joint.draw(batch, rng)
        draws = draws[adult[draws[:, a]]]
        kept.append(draws)
        have += len(draws)
    return np.concatenate(kept)[:n]


def _agent_ids(n: int) -> list[str]:
    width = max(4, len(str(n - 1)))
    return [f"agent-{i:0{width}d}" for i in range(n)]


def sample_agents(joint: JointDistribution, n: int, seed) -> list[AgentProfile]:
    """Sample adult agents over the ten IPF dimensions (marital status and education unset)."""
    missing = set(IPF_DIMENSIONS) - set(joint.dimensions)
    if missing:
        raise DomainError(f"joint distribution lacks agent dimensions: {sorted(missing)}")
    cells = sample_cells(joint, n, seed)
    cols = {dim: joint.categories[d] for d, dim in enumerate(joint.dimensions)}
    index = {dim: d for d, dim in enumerate(joint.dimensions)}
    return [
        AgentProfile(agent_id, **{dim: cols[dim][row[index[dim]]] for dim in IPF_DIMENSIONS})
        for agent_id, row in zip(_agent_ids(n), cells)
    ]


def _pick(probs: np.ndarray, u: float) -> int:
    cdf = np.cumsum(probs / probs.sum())
    return min(int(np.searchsorted(cdf, u, side="right")), len(probs) - 1)


def assign_marital_status(agents: Sequence[AgentProfile], sex_tables: Mapping[str, MarginalTable], seed,
                          multipliers: Mapping[str, Mapping[str, float]] = DEFAULT_MARITAL_MULTIPLIERS,
                          ) -> list[AgentProfile]:
    """Draw marital status from the agent's sex-specific table, tilted by age."""
    for agent in agents:
        if not is_adult(agent.age_group):
            raise PreconditionError(f"{agent.agent_id}: age group {agent.age_group!r} is under 18")
        if agent.sex not in sex_tables:
            raise ConfigError(f"no marital status table for sex {agent.sex!r}")
    u = _rng(seed).random(len(agents))
    out = []
    for agent, draw in zip(agents, u):
        table = sex_tables[agent.sex]
        probs = np.asarray(table.counts, dtype=float)
        tilt = multipliers.get(agent.age_group, {})
        probs = probs * np.array([tilt.get(c, 1.0) for c in table.categories])
        if probs.sum() <= 0:
            raise ConfigError(f"marital status table for {agent.sex!r} has no mass")
        out.append(replace(agent, marital_status=table.categories[_pick(probs, draw)]))
    return out


def assign_education(agents: Sequence[AgentProfile], enrollment_table: MarginalTable,
                     attainment_table: MarginalTable, seed) -> list[AgentProfile]:
    """Young adults (18-24) get an enrollment status; older agents an attainment level."""
    if enrollment_table is None or attainment_table is None:
        raise ConfigError("both enrollment and attainment tables are required")
    for table in (enrollment_table, attainment_table):
        if table.total <= 0:
            raise ConfigError(f"{table.dimension_name} ({table.condition}) table has no mass")
    u = _rng(seed).random(len(agents))
    enroll = np.asarray(enrollment_table.counts, dtype=float)
    attain = np.asarray(attainment_table.counts, dtype=float)
    out = []
    for agent, draw in zip(agents, u):
        if not is_adult(agent.age_group):
            raise PreconditionError(f"{agent.agent_id}: age group {agent.age_group!r} is under 18")
        if agent.age_group in YOUNG_ADULT_AGE_GROUPS:
            level = enrollment_table.categories[_pick(enroll, draw)]
        else:
            level = attainment_table.categories[_pick(attain, draw)]
        out.append(replace(agent, education_level=level))
    return out


def merge_small_bins(observed, expected, labels=None, min_expected: float = 5.0):
    """Merge bins with expected count below ``min_expected`` into an adjacent bin.

    The smallest offending bin is merged first, into whichever neighbour is
    nonzero (the smaller of the two when both are), until every bin clears
    the threshold or a single bin remains.
    """
    obs = [float(x) for x in observed]
    exp = [float(x) for x in expected]
    names = [str(x) for x in (labels if labels is not None else range(len(obs)))]
    while len(exp) > 1 and min(exp) < min_expected:
        i = int(np.argmin(exp))
        candidates = [j for j in (i - 1, i + 1) if 0 <= j < len(exp)]
        nonzero = [j for j in candidates if exp[j] > 0] or candidates
        j = min(nonzero, key=lambda k: (exp[k], k))
        lo, hi = min(i, j), max(i, j)
        obs[lo:hi + 1] = [obs[lo] + obs[hi]]
        exp[lo:hi + 1] = [exp[lo] + exp[hi]]
        names[lo:hi + 1] = [f"{names[lo]} + {names[hi]}"]
    return np.array(obs), np.array(exp), tuple(names)


def chi_square_gof(observed, expected) -> tuple[float, int, float]:
    observed = np.asarray(observed, dtype=float)
    expected = np.asarray(expected, dtype=float)
    if expected.sum() <= 0:
        raise DomainError("expected frequencies are all zero")
    if np.any((expected == 0) & (observed > 0)):
        return float("inf"), len(expected) - 1, 0.0
    nz = expected > 0
    stat = float(np.sum((observed[nz] - expected[nz]) ** 2 / expected[nz]))
    df = int(nz.sum()) - 1
    p = 1.0 if df < 1 else float(stats.chi2.sf(stat, df))
    return stat, df, p


def _expected_shares(table: MarginalTable) -> tuple[tuple[str, ...], np.ndarray]:
    cats, counts = table.categories, np.asarray(table.counts, dtype=float)
    if table.dimension_name == "age_group":
        keep = [is_adult(c) for c in cats]
        cats = tuple(c for c, k in zip(cats, keep) if k)
        counts = counts[keep]
    if counts.sum() <= 0:
        raise DomainError(f"{table.dimension_name}: expected frequencies are all zero")
    return cats, counts / counts.sum()


def verify_population(agents: Sequence[AgentProfile], targets: Sequence[MarginalTable], alpha: float = 0.05,
                      min_expected: float = 5.0) -> list[FitReport]:
    """One chi-square goodness-of-fit test per target dimension."""
    n = len(agents)
    if n < 30:
        raise PreconditionError(f"chi-square verification needs at least 30 agents, got {n}")
    reports = []
    for table in targets:
        cats, shares = _expected_shares(table)
        position = {c: i for i, c in enumerate(cats)}
        observed = np.zeros(len(cats))
        for agent in agents:
            value = getattr(agent, table.dimension_name)
            if value not in position:
                raise DomainError(f"{agent.agent_id}: {table.dimension_name} {value!r} is not a target category")
            observed[position[value]] += 1
        obs, exp, bins = merge_small_bins(observed, shares * n, cats, min_expected)
        stat, df, p = chi_square_gof(obs, exp)
        reports.append(FitReport(table.dimension_name, stat, df, p, alpha, bins))
    order = {d: i for i, d in enumerate(REPORT_ORDER)}
    return sorted(reports, key=lambda r: order.get(r.dimension, len(order)))


@dataclass(frozen=True)
class CensusTargets:
    """The marginal tables needed for synthesis, sorted by role."""

    ipf: tuple[MarginalTable, ...]
    marital: Mapping[str, MarginalTable]
    enrollment: MarginalTable
    attainment: MarginalTable

    @classmethod
    def from_tables(cls, tables: Iterable[MarginalTable]) -> "CensusTargets":
        by_dim: dict[str, list[MarginalTable]] = {}
        for t in tables:
            by_dim.setdefault(t.dimension_name, []).append(t)
        missing = [d for d in AGENT_FIELDS if d not in by_dim]
        if missing:
            raise ConfigError(f"missing marginal tables for {missing}")
        ipf = []
        for dim in IPF_DIMENSIONS:
            table = by_dim[dim][0]
            if dim == "age_group" and TEEN_BRACKET in table.categories:
                table = partition_age_bracket(table)
            ipf.append(table)
        marital = {t.condition: t for t in by_dim["marital_status"]}
        education = by_dim["education_level"]
        enrollment = [t for t in education if tuple(t.categories) == ENROLLMENT_CATEGORIES]
        attainment = [t for t in education if tuple(t.categories) != ENROLLMENT_CATEGORIES]
        if not enrollment or not attainment:
            raise ConfigError("education needs both an enrollment and an attainment table")
        return cls(tuple(ipf), marital, enrollment[0], attainment[0])

    def to_dict(self) -> dict:
        return {
            "ipf": [t.to_dict() for t in self.ipf],
            "marital": {k: v.to_dict() for k, v in sorted(self.marital.items())},
            "enrollment": self.enrollment.to_dict(),
            "attainment": self.attainment.to_dict(),
        }


@dataclass
class Synthesis:
    agents: list[AgentProfile]
    reports: list[FitReport]
    seed: int
    attempts: int
    joint: JointDistribution
    config_hash: str
    history: list[list[FitReport]] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.reports)


def synthesis_hash(targets: CensusTargets, config: IpfConfig, n: int, alpha: float, max_retries: int,
                   multipliers: Mapping) -> str:
    blob = json.dumps({
        "targets": targets.to_dict(),
        "ipf": asdict(config),
        "n": n,
        "alpha": alpha,
        "max_retries": max_retries,
        "multipliers": {k: dict(v) for k, v in sorted(multipliers.items())},
    }, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()


def synthesize(tables, config: IpfConfig, n: int, *, max_retries: int = 5, alpha: float = 0.05,
               multipliers: Mapping[str, Mapping[str, float]] = DEFAULT_MARITAL_MULTIPLIERS,
               path=None) -> Synthesis:
    """Fit, sample, post-adjust and verify; resample with seed+1 on any failed dimension.

    ``tables`` is either a :class:`CensusTargets` or the flat list returned by
    :func:`census.fetch_marginals`. When ``path`` is given the accepted
    population is written there.
    """
    targets = tables if isinstance(tables, CensusTargets) else CensusTargets.from_tables(tables)
    joint = ipf_fit(targets.ipf, config)
    if not joint.converged:
        log.warning("IPF stopped at %d iterations with deviation %.3g", joint.iterations, joint.max_deviation)
    config_hash = synthesis_hash(targets, config, n, alpha, max_retries, multipliers)
    history = []
    for attempt in range(max_retries + 1):
        seed = int(config.seed) + attempt
        agents = sample_agents(joint, n, [seed, 0])
        agents = assign_marital_status(agents, targets.marital, [seed, 1], multipliers)
        agents = assign_education(agents, targets.enrollment, targets.attainment, [seed, 2])
        reports = verify_population(agents, targets.ipf, alpha)
        history.append(reports)
        if all(r.passed for r in reports):
            result = Synthesis(agents, reports, seed, attempt + 1, joint, config_hash, history)
            if path is not None:
                write_population(path, agents, seed, config_hash)
            return result
        failed = [r.dimension for r in reports if not r.passed]
        log.info("seed %d rejected on %s; regenerating", seed, ", ".join(failed))
    raise SynthesisError(f"no population passed verification after {max_retries} retries",
                         [r for attempt in history for r in attempt])


def write_population(path, agents: Sequence[AgentProfile], seed: int, config_hash: str) -> None:
    """Write one JSON record per line after a header line; replaced atomically."""
    path = Path(path)
    for agent in agents:
        agent.check()
    header = {"format": POPULATION_FORMAT, "config_hash": config_hash, "seed": int(seed),
              "n": len(agents), "fields": ["agent_id", *AGENT_FIELDS]}
    lines = [json.dumps(header, ensure_ascii=False)]
    for agent in agents:
        record = {"agent_id": agent.agent_id, **{name: getattr(agent, name) for name in AGENT_FIELDS}}
        lines.append(json.dumps(record, ensure_ascii=False))
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
    os.replace(tmp, path)


def read_population(path) -> tuple[dict, list[AgentProfile]]:
    with open(path, encoding="utf-8") as fh:
        header = json.loads(fh.readline())
        if header.get("format") != POPULATION_FORMAT:
            raise DomainError(f"{path}: not a population file")
        names = {f.name for f in fields(AgentProfile)}
        agents = [AgentProfile(**{k: v for k, v in json.loads(line).items() if k in names})
                  for line in fh if line.strip()]
    return header, agents
