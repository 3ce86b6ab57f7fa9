"""ACS 5-year Data Profile ingestion: marginal tables and county profiles.

Every request is cached as the verbatim JSON payload the Census API returned,
one file per request, named by a hash of (year, state, county, codes). A cache
directory populated ahead of time therefore doubles as a fixture set, and the
client can run fully offline against it.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import requests

from .errors import FetchError, SchemaError

log = logging.getLogger(__name__)

API_URL = "https://api.census.gov/data/{year}/acs/acs5/profile"
DEFAULT_YEAR = 2023
CODE_PATTERN = re.compile(r"^DP\d{2}_\d{4}E$")
GROUPS = ("demographic", "social", "economic", "housing")

# Agent attributes in the order the census categories table lists them:
# social, economic, housing, demographic.
AGENT_ATTRIBUTES = (
    "education_level",
    "marital_status",
    "language_at_home",
    "citizenship",
    "employment_status",
    "household_income",
    "housing",
    "vehicles",
    "age_group",
    "sex",
    "race",
    "ethnicity",
)
IPF_DIMENSIONS = tuple(a for a in AGENT_ATTRIBUTES if a not in ("education_level", "marital_status"))

TEEN_BRACKET = "15 to 19 years"
ADULT_TEEN_BRACKET = "18 to 19 years"
MINOR_AGE_GROUPS = frozenset({"Under 5 years", "5 to 9 years", "10 to 14 years", TEEN_BRACKET})
YOUNG_ADULT_AGE_GROUPS = frozenset({ADULT_TEEN_BRACKET, "20 to 24 years"})

ENROLLMENT_CATEGORIES = ("Attending some college or graduate school", "Not attending any college")


@dataclass(frozen=True)
class AcsVariableSet:
    """An ordered list of profile codes and the categories they populate.

    ``kind`` is ``"direct"`` when each code is one category. The
    ``"college_enrollment"`` kind derives a two-category table for ages 18-24
    from the college enrollment count and the two age brackets it overlaps.
    """

    dimension: str
    group_id: str
    variable_codes: tuple[str, ...]
    category_labels: tuple[str, ...]
    condition: str | None = None
    kind: str = "direct"

    def __post_init__(self):
        if self.group_id not in GROUPS:
            raise ValueError(f"unknown group {self.group_id!r}")
        if not self.variable_codes or len(self.variable_codes) != len(self.category_labels):
            raise ValueError(
                f"{self.dimension}: codes and labels must have equal nonzero length "
                f"({len(self.variable_codes)} vs {len(self.category_labels)})"
            )
        for code in self.variable_codes:
            if not CODE_PATTERN.match(code):
                raise ValueError(f"{self.dimension}: malformed ACS profile code {code!r}")


@dataclass(frozen=True)
class MarginalTable:
    dimension_name: str
    categories: tuple[str, ...]
    counts: tuple[int, ...]
    total: int
    condition: str | None = None
    flags: tuple[str, ...] = ()

    def __post_init__(self):
        if len(self.categories) != len(self.counts):
            raise ValueError(f"{self.dimension_name}: {len(self.categories)} categories, {len(self.counts)} counts")
        if len(set(self.categories)) != len(self.categories):
            raise ValueError(f"{self.dimension_name}: duplicate category names")
        if any(c < 0 for c in self.counts):
            raise ValueError(f"{self.dimension_name}: negative count")
        if sum(self.counts) != self.total:
            raise ValueError(f"{self.dimension_name}: total {self.total} != sum of counts {sum(self.counts)}")

    @classmethod
    def from_counts(cls, dimension_name, categories, counts, condition=None, flags=()):
        counts = tuple(int(c) for c in counts)
        return cls(dimension_name, tuple(categories), counts, sum(counts), condition, tuple(flags))

    def count(self, category: str) -> int:
        return self.counts[self.categories.index(category)]

    def probabilities(self) -> list[float]:
        if self.total == 0:
            raise ValueError(f"{self.dimension_name}: cannot normalize an empty table")
        return [c / self.total for c in self.counts]

    def to_dict(self) -> dict:
        return {
            "dimension_name": self.dimension_name,
            "condition": self.condition,
            "categories": list(self.categories),
            "counts": list(self.counts),
            "total": self.total,
            "flags": list(self.flags),
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "MarginalTable":
        return cls(
            data["dimension_name"],
            tuple(data["categories"]),
            tuple(int(c) for c in data["counts"]),
            int(data["total"]),
            data.get("condition"),
            tuple(data.get("flags", ())),
        )


def _codes(table: str, start: int, stop: int) -> tuple[str, ...]:
    return tuple(f"{table}_{i:04d}E" for i in range(start, stop + 1))


AGE_LABELS = (
    "Under 5 years", "5 to 9 years", "10 to 14 years", "15 to 19 years", "20 to 24 years",
    "25 to 34 years", "35 to 44 years", "45 to 54 years", "55 to 59 years", "60 to 64 years",
    "65 to 74 years", "75 to 84 years", "85 years and over",
)
MARITAL_LABELS = ("Never Married", "Married", "Separated", "Widowed", "Divorced")
INDUSTRY_LABELS = (
    "Agriculture, forestry, fishing and hunting, and mining",
    "Construction",
    "Manufacturing",
    "Wholesale trade",
    "Retail trade",
    "Transportation and warehousing, and utilities",
    "Information",
    "Finance and insurance, and real estate and rental and leasing",
    "Professional, scientific, and management, and administrative and waste management services",
    "Educational services, and health care and social assistance",
    "Arts, entertainment, and recreation, and accommodation and food services",
    "Other services, except public administration",
    "Public administration",
)
ATTAINMENT_LABELS = (
    "Less than 9th grade",
    "9th to 12th grade, no diploma",
    "High school graduate (includes equivalency)",
    "Some college, no degree",
    "Associate's degree",
    "Bachelor's degree",
    "Graduate or professional degree",
)

AGENT_VARIABLE_SETS: tuple[AcsVariableSet, ...] = (
    AcsVariableSet("education_level", "social", ("DP02_0058E", "DP05_0008E", "DP05_0009E"),
                   ("College or graduate school", "15 to 19 years", "20 to 24 years"),
                   condition="age 18 to 24", kind="college_enrollment"),
    AcsVariableSet("education_level", "social", _codes("DP02", 60, 66), ATTAINMENT_LABELS,
                   condition="age 25 and over"),
    AcsVariableSet("marital_status", "social", _codes("DP02", 26, 30), MARITAL_LABELS, condition="Male"),
    AcsVariableSet("marital_status", "social", _codes("DP02", 32, 36), MARITAL_LABELS, condition="Female"),
    AcsVariableSet("language_at_home", "social", ("DP02_0113E", "DP02_0116E", "DP02_0118E", "DP02_0120E", "DP02_0122E"),
                   ("English only", "Spanish", "Other Indo-European languages",
                    "Asian and Pacific Island languages", "Other languages")),
    AcsVariableSet("citizenship", "social", ("DP02_0091E", "DP02_0092E", "DP02_0093E", "DP02_0096E", "DP02_0097E"),
                   ("Native - born in state of residence", "Native - born in different state",
                    "Native - born outside the US to American parents",
                    "Foreign born - naturalized citizen", "Foreign born - not a citizen")),
    AcsVariableSet("employment_status", "economic", _codes("DP03", 33, 45) + _codes("DP03", 5, 7),
                   INDUSTRY_LABELS + ("Unemployed", "Armed Forces", "Not in labor force")),
    AcsVariableSet("household_income", "economic", _codes("DP03", 52, 61),
                   ("Less than $10,000", "$10,000 to $14,999", "$15,000 to $24,999", "$25,000 to $34,999",
                    "$35,000 to $49,999", "$50,000 to $74,999", "$75,000 to $99,999", "$100,000 to $149,999",
                    "$150,000 to $199,999", "$200,000 or more")),
    AcsVariableSet("housing", "housing", _codes("DP04", 81, 88) + _codes("DP04", 127, 133) + ("DP04_0135E",),
                   ("Owner-occupied: Less than $50,000", "Owner-occupied: $50,000 to $99,999",
                    "Owner-occupied: $100,000 to $149,999", "Owner-occupied: $150,000 to $199,999",
                    "Owner-occupied: $200,000 to $299,999", "Owner-occupied: $300,000 to $499,999",
                    "Owner-occupied: $500,000 to $999,999", "Owner-occupied: $1,000,000 or more",
                    "Rent: Less than $500", "Rent: $500 to $999", "Rent: $1,000 to $1,499",
                    "Rent: $1,500 to $1,999", "Rent: $2,000 to $2,499", "Rent: $2,500 to $2,999",
                    "Rent: $3,000 or more", "Rent: No rent paid")),
    AcsVariableSet("vehicles", "housing", _codes("DP04", 58, 61),
                   ("No vehicles", "1 vehicle", "2 vehicles", "3 or more vehicles")),
    AcsVariableSet("age_group", "demographic", _codes("DP05", 5, 17), AGE_LABELS),
    AcsVariableSet("sex", "demographic", ("DP05_0002E", "DP05_0003E"), ("Male", "Female")),
    AcsVariableSet("race", "demographic",
                   ("DP05_0037E", "DP05_0038E", "DP05_0039E", "DP05_0045E", "DP05_0046E", "DP05_0047E",
                    "DP05_0048E", "DP05_0049E", "DP05_0050E", "DP05_0051E", "DP05_0052E", "DP05_0057E",
                    "DP05_0058E"),
                   ("White", "Black or African American", "American Indian and Alaska Native", "Asian Indian",
                    "Chinese", "Filipino", "Japanese", "Korean", "Vietnamese", "Other Asian",
                    "Native Hawaiian and Other Pacific Islander", "Some Other Race", "Two or More Races")),
    AcsVariableSet("ethnicity", "demographic", ("DP05_0076E", "DP05_0081E"),
                   ("Hispanic or Latino", "Not Hispanic or Latino")),
)

PROFILE_CODES: dict[str, str] = {
    "population": "DP05_0001E",
    "male": "DP05_0002E",
    "female": "DP05_0003E",
    "median_age": "DP05_0018E",
    "white": "DP05_0069E",
    "black": "DP05_0070E",
    "american_indian": "DP05_0071E",
    "asian": "DP05_0072E",
    "pacific_islander": "DP05_0073E",
    "other_race": "DP05_0074E",
    "hispanic": "DP05_0076E",
    "not_hispanic": "DP05_0081E",
    "households": "DP02_0001E",
    "avg_household_size": "DP02_0016E",
    "households_with_computer": "DP02_0153E",
    "civilian_labor_force": "DP03_0008E",
    "armed_forces": "DP03_0006E",
    "median_household_income": "DP03_0062E",
    "per_capita_income": "DP03_0088E",
    "occupied_units": "DP04_0045E",
    "owner_occupied": "DP04_0046E",
    "renter_occupied": "DP04_0047E",
    "median_home_value": "DP04_0089E",
    "median_rent": "DP04_0134E",
}
PROFILE_EDUCATION_CODES = _codes("DP02", 60, 66)
PROFILE_INDUSTRY_CODES = _codes("DP03", 33, 45)


def profile_code_list() -> tuple[str, ...]:
    return tuple(PROFILE_CODES.values()) + PROFILE_EDUCATION_CODES + PROFILE_INDUSTRY_CODES


def _pct(part, whole):
    if part is None or whole is None:
        return None
    return 100.0 * part / whole


@dataclass(frozen=True)
class CountyProfile:
    """County-level summary statistics used in the regional context.

    Counts are stored as the API reports them; percentages are derived
    properties. A field set to None is treated as unavailable.
    """

    population: int | None
    male: int | None
    female: int | None
    median_age: float | None
    white: int | None
    black: int | None
    american_indian: int | None
    asian: int | None
    pacific_islander: int | None
    other_race: int | None
    hispanic: int | None
    not_hispanic: int | None
    households: int | None
    avg_household_size: float | None
    households_with_computer: int | None
    civilian_labor_force: int | None
    armed_forces: int | None
    median_household_income: int | None
    per_capita_income: int | None
    occupied_units: int | None
    owner_occupied: int | None
    renter_occupied: int | None
    median_home_value: int | None
    median_rent: int | None
    education: tuple[tuple[str, int], ...] = ()
    industries: tuple[tuple[str, int], ...] = ()

    def __post_init__(self):
        for name in ("population", "households", "occupied_units"):
            value = getattr(self, name)
            if value is not None and value <= 0:
                raise SchemaError(f"invalid census payload: {name} must be positive, got {value}")
        for name in ("female_pct", "male_pct", "white_pct", "asian_pct", "black_pct", "hispanic_pct",
                     "bachelor_or_higher_pct", "graduate_pct", "computer_pct", "homeownership_rate"):
            value = getattr(self, name)
            if value is not None and not 0.0 <= value <= 100.0:
                raise SchemaError(f"invalid census payload: {name} = {value:.2f} is outside [0, 100]")

    @property
    def female_pct(self):
        return _pct(self.female, self.population)

    @property
    def male_pct(self):
        return _pct(self.male, self.population)

    @property
    def white_pct(self):
        return _pct(self.white, self.population)

    @property
    def asian_pct(self):
        return _pct(self.asian, self.population)

    @property
    def black_pct(self):
        return _pct(self.black, self.population)

    @property
    def hispanic_pct(self):
        return _pct(self.hispanic, self.population)

    @property
    def adults_25_plus(self):
        return sum(c for _, c in self.education) if self.education else None

    @property
    def bachelor_or_higher_pct(self):
        if not self.education:
            return None
        counts = dict(self.education)
        return _pct(counts["Bachelor's degree"] + counts["Graduate or professional degree"], self.adults_25_plus)

    @property
    def graduate_pct(self):
        if not self.education:
            return None
        return _pct(dict(self.education)["Graduate or professional degree"], self.adults_25_plus)

    @property
    def computer_pct(self):
        return _pct(self.households_with_computer, self.households)

    @property
    def homeownership_rate(self):
        return _pct(self.owner_occupied, self.occupied_units)

    def top_industries(self, k: int = 3) -> list[tuple[str, float]]:
        """The k largest employment sectors with their share of employed civilians."""
        if not self.industries:
            return []
        employed = sum(c for _, c in self.industries)
        ranked = sorted(self.industries, key=lambda item: (-item[1], INDUSTRY_LABELS.index(item[0])))
        return [(name, 100.0 * count / employed) for name, count in ranked[:k]]

    def to_dict(self) -> dict:
        data = {name: getattr(self, name) for name in PROFILE_CODES}
        data["education"] = [list(item) for item in self.education]
        data["industries"] = [list(item) for item in self.industries]
        return data

    @classmethod
    def from_dict(cls, data: Mapping) -> "CountyProfile":
        kwargs = {name: data.get(name) for name in PROFILE_CODES}
        kwargs["education"] = tuple((k, int(v)) for k, v in data.get("education", ()))
        kwargs["industries"] = tuple((k, int(v)) for k, v in data.get("industries", ()))
        return cls(**kwargs)


def request_key(year: int, state_fips: str, county_fips: str, codes: Sequence[str]) -> str:
    blob = json.dumps({"year": int(year), "state": state_fips, "county": county_fips, "codes": list(codes)},
                      sort_keys=True, separators=(",", ":"))
    digest = hashlib.sha256(blob.encode()).hexdigest()[:16]
    return f"acs5-profile-{year}-{state_fips}{county_fips}-{digest}.json"


def packaged_fixture_dir() -> Path:
    return Path(str(resources.files("communitypoll") / "data" / "fixtures" / "acs"))


def _atomic_write_bytes(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class AcsClient:
    """Cached client for the ACS 5-year Data Profile endpoint.

    Lookup order is ``cache_dir`` then each of ``fixture_dirs``; a miss in all
    of them goes to the live API unless ``offline`` is set. Live responses are
    written to ``cache_dir`` byte-for-byte.
    """

    def __init__(self, cache_dir=None, *, year: int = DEFAULT_YEAR, api_key: str | None = None,
                 offline: bool = False, fixture_dirs: Iterable = (), session=None, timeout: float = 30.0):
        self.cache_dir = Path(cache_dir) if cache_dir is not None else None
        self.year = int(year)
        self.api_key = api_key if api_key is not None else os.environ.get("CENSUS_API_KEY")
        self.offline = offline
        self.fixture_dirs = [Path(p) for p in fixture_dirs]
        self.session = session if session is not None else requests.Session()
        self.timeout = timeout

    def _cached_payload(self, name: str) -> bytes | None:
        for directory in ([self.cache_dir] if self.cache_dir else []) + self.fixture_dirs:
            path = directory / name
            if path.is_file():
                return path.read_bytes()
        return None

    def _live_payload(self, state_fips, county_fips, codes) -> bytes:
        if self.offline:
            raise FetchError(f"cache miss for state {state_fips} county {county_fips} in offline mode")
        if not self.api_key:
            raise FetchError("cache miss and CENSUS_API_KEY is not set")
        params = {
            "get": ",".join(codes),
            "for": f"county:{county_fips}",
            "in": f"state:{state_fips}",
            "key": self.api_key,
        }
        url = API_URL.format(year=self.year)
        try:
            response = self.session.get(url, params=params, timeout=self.timeout)
        except requests.RequestException as exc:
            raise FetchError(f"census API unreachable: {exc}") from exc
        if response.status_code == 400:
            match = re.search(r"unknown variable '([^']+)'", response.text)
            if match:
                raise SchemaError(f"unknown ACS variable {match.group(1)}", code=match.group(1))
        if response.status_code != 200:
            raise FetchError(f"census API returned HTTP {response.status_code}: {response.text[:200]}")
        return response.content

    def get_values(self, state_fips: str, county_fips: str, codes: Sequence[str]) -> dict[str, str]:
        """Return the raw string value for each requested code."""
        codes = list(codes)
        name = request_key(self.year, state_fips, county_fips, codes)
        payload = self._cached_payload(name)
        if payload is None:
            payload = self._live_payload(state_fips, county_fips, codes)
            if self.cache_dir is not None:
                _atomic_write_bytes(self.cache_dir / name, payload)
        return parse_payload(payload, codes)


def parse_payload(payload: bytes, codes: Sequence[str]) -> dict[str, str]:
    try:
        rows = json.loads(payload)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"census payload is not JSON: {exc}") from exc
    if not isinstance(rows, list) or len(rows) < 2 or not all(isinstance(r, list) for r in rows[:2]):
        raise SchemaError("census payload is not an array of rows with a header")
    header, values = rows[0], rows[1]
    out = {}
    for code in codes:
        if code not in header:
            raise SchemaError(f"variable {code} absent from census response", code=code)
        out[code] = values[header.index(code)]
    return out


def _as_count(code: str, raw) -> int:
    try:
        value = float(raw)
    except (TypeError, ValueError):
        raise SchemaError(f"variable {code} has non-numeric value {raw!r}", code=code) from None
    if value < 0:
        # the API encodes suppressed estimates as large negative sentinels
        raise SchemaError(f"variable {code} is unavailable (value {raw})", code=code)
    return int(round(value))


def _as_float(code: str, raw) -> float:
    try:
        value = float(raw)
    except (TypeError, ValueError):
        raise SchemaError(f"variable {code} has non-numeric value {raw!r}", code=code) from None
    if value < 0:
        raise SchemaError(f"variable {code} is unavailable (value {raw})", code=code)
    return value


def round_half_up_fraction(count: int, numerator: int, denominator: int) -> int:
    return (2 * count * numerator + denominator) // (2 * denominator)


def _build_table(vs: AcsVariableSet, values: Mapping[str, str]) -> MarginalTable:
    counts = [_as_count(code, values[code]) for code in vs.variable_codes]
    if vs.kind == "direct":
        return MarginalTable.from_counts(vs.dimension, vs.category_labels, counts, vs.condition)
    if vs.kind == "college_enrollment":
        enrolled, teens, twenties = counts
        young_adults = round_half_up_fraction(teens, 2, 5) + twenties
        attending = min(enrolled, young_adults)
        return MarginalTable.from_counts(vs.dimension, ENROLLMENT_CATEGORIES,
                                         (attending, young_adults - attending), vs.condition)
    raise ValueError(f"unknown variable set kind {vs.kind!r}")


def fetch_marginals(state_fips: str, county_fips: str, variable_sets: Sequence[AcsVariableSet] = AGENT_VARIABLE_SETS,
                    client: AcsClient | None = None, max_workers: int = 4) -> list[MarginalTable]:
    """Fetch one MarginalTable per variable set, in the order given."""
    client = client or AcsClient()

    def one(vs):
        return _build_table(vs, client.get_values(state_fips, county_fips, vs.variable_codes))

    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        return list(pool.map(one, variable_sets))


def fetch_county_profile(state_fips: str, county_fips: str, client: AcsClient | None = None) -> CountyProfile:
    client = client or AcsClient()
    values = client.get_values(state_fips, county_fips, profile_code_list())
    kwargs = {}
    for name, code in PROFILE_CODES.items():
        if name in ("median_age", "avg_household_size"):
            kwargs[name] = _as_float(code, values[code])
        else:
            kwargs[name] = _as_count(code, values[code])
    kwargs["education"] = tuple(
        (label, _as_count(code, values[code])) for label, code in zip(ATTAINMENT_LABELS, PROFILE_EDUCATION_CODES))
    kwargs["industries"] = tuple(
        (label, _as_count(code, values[code])) for label, code in zip(INDUSTRY_LABELS, PROFILE_INDUSTRY_CODES))
    return CountyProfile(**kwargs)


def partition_age_bracket(table: MarginalTable) -> MarginalTable:
    """Keep only the 18-19 share of the ACS 15-19 bracket.

    The bracket is assumed uniform over its five single years, so two fifths
    (rounded half-up) become "18 to 19 years" and the rest leaves the table.
    """
    if TEEN_BRACKET not in table.categories:
        log.warning("%s: no %r bracket to partition", table.dimension_name, TEEN_BRACKET)
        return MarginalTable(table.dimension_name, table.categories, table.counts, table.total,
                             table.condition, table.flags + ("age_bracket_absent",))
    i = table.categories.index(TEEN_BRACKET)
    adult = round_half_up_fraction(table.counts[i], 2, 5)
    categories = table.categories[:i] + (ADULT_TEEN_BRACKET,) + table.categories[i + 1:]
    counts = table.counts[:i] + (adult,) + table.counts[i + 1:]
    return MarginalTable(table.dimension_name, categories, counts, sum(counts), table.condition, table.flags)


def is_adult(age_group: str) -> bool:
    return age_group not in MINOR_AGE_GROUPS
