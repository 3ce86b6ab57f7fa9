"""Energy, water, carbon, pollutant and economic figures for a proposed data center,
and the regional context text built from them."""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from importlib import resources
from typing import Mapping

from .census import CountyProfile
from .errors import DomainError, RenderError

HOURS_PER_YEAR = 8760
POLLUTANTS = ("NOx", "VOCs", "PM2.5", "SO2")
PLACEHOLDER = re.compile(r"\[([A-Z][A-Z0-9_]*)\]")


@dataclass(frozen=True)
class EconomicFigures:
    """Case-study economics passed through to the prompt unchanged."""

    construction_duration_months: str = "18-24"
    construction_jobs: int = 1700
    construction_activity_musd: float = 240
    construction_tax_musd: float = 10
    operational_jobs: int = 160
    salary_kusd: float = 50
    operational_activity_musd: float = 32
    operational_tax_musd: float = 1.1


@dataclass(frozen=True)
class ProjectSpec:
    rated_capacity_mw: float = 100.0
    capacity_factor: float = 0.70
    pue: float = 1.1
    wue_l_per_kwh: float = 0.36
    ewif_l_per_kwh: float = 3.14
    state_emission_factor: float = 0.0  # short tons CO2 per MWh
    pollutant_intensities: Mapping[str, float] = field(default_factory=lambda: dict.fromkeys(POLLUTANTS, 0.0))
    economics: EconomicFigures = EconomicFigures()

    def __post_init__(self):
        if not self.rated_capacity_mw > 0:
            raise DomainError("rated_capacity_mw must be positive")
        if not 0 < self.capacity_factor <= 1:
            raise DomainError("capacity_factor must be in (0, 1]")
        if not self.pue >= 1:
            raise DomainError("pue must be at least 1")
        for name in ("wue_l_per_kwh", "ewif_l_per_kwh", "state_emission_factor"):
            if not getattr(self, name) >= 0:
                raise DomainError(f"{name} must be nonnegative")
        missing = set(POLLUTANTS) - set(self.pollutant_intensities)
        if missing:
            raise DomainError(f"pollutant intensities missing for {sorted(missing)}")
        for name, value in self.pollutant_intensities.items():
            if not value >= 0:
                raise DomainError(f"pollutant intensity for {name} must be nonnegative")


@dataclass(frozen=True)
class ProjectImpactProfile:
    annual_energy_mwh: float
    it_energy_mwh: float
    onsite_water_l: float
    offsite_water_l: float
    carbon_mst: float
    pollutants_st: Mapping[str, float]
    economics: EconomicFigures

    @property
    def onsite_water_ml(self) -> float:
        """On-site water in million liters."""
        return self.onsite_water_l / 1e6

    @property
    def offsite_water_ml(self) -> float:
        return self.offsite_water_l / 1e6

    def to_dict(self) -> dict:
        return {
            "annual_energy_mwh": self.annual_energy_mwh,
            "it_energy_mwh": self.it_energy_mwh,
            "onsite_water_l": self.onsite_water_l,
            "offsite_water_l": self.offsite_water_l,
            "carbon_mst": self.carbon_mst,
            "pollutants_st": dict(self.pollutants_st),
            "economics": vars(self.economics).copy(),
        }


@dataclass(frozen=True)
class StateContext:
    name: str
    year: int
    dc_energy_mwh: float


@dataclass(frozen=True)
class RegionalContext:
    state_name: str
    state_dc_energy_mwh: float
    county_name: str
    county_profile: CountyProfile
    impact: ProjectImpactProfile
    rendered_text: str


def annual_energy(spec: ProjectSpec) -> float:
    """Total facility energy in MWh: capacity x capacity factor x hours x PUE."""
    return spec.rated_capacity_mw * spec.capacity_factor * HOURS_PER_YEAR * spec.pue


def water_consumption(spec: ProjectSpec) -> tuple[float, float]:
    """(on-site, off-site) liters per year.

    On-site cooling water scales with IT energy, off-site generation water
    with total facility energy.
    """
    energy_kwh = annual_energy(spec) * 1000
    onsite = spec.wue_l_per_kwh * (energy_kwh / spec.pue)
    offsite = spec.ewif_l_per_kwh * energy_kwh
    return onsite, offsite


def carbon_emissions(spec: ProjectSpec) -> float:
    """Million short tons of CO2 per year."""
    return annual_energy(spec) * spec.state_emission_factor / 1e6


def pollutant_emissions(spec: ProjectSpec) -> dict[str, float]:
    energy = annual_energy(spec)
    return {name: energy * spec.pollutant_intensities[name] for name in POLLUTANTS}


def derive_pollutant_intensities(permitted_st: Mapping[str, float], regional_energy_mwh: float,
                                 actual_fraction: float = 0.10) -> dict[str, float]:
    """Short tons per MWh from regional permit limits.

    Actual emissions are taken as ``actual_fraction`` of the permitted totals
    and spread over the region's annual data center energy use.
    """
    if not regional_energy_mwh > 0:
        raise DomainError("regional_energy_mwh must be positive")
    return {name: permitted_st[name] * actual_fraction / regional_energy_mwh for name in permitted_st}


def project_impact(spec: ProjectSpec) -> ProjectImpactProfile:
    energy = annual_energy(spec)
    onsite, offsite = water_consumption(spec)
    return ProjectImpactProfile(
        annual_energy_mwh=energy,
        it_energy_mwh=energy / spec.pue,
        onsite_water_l=onsite,
        offsite_water_l=offsite,
        carbon_mst=carbon_emissions(spec),
        pollutants_st=pollutant_emissions(spec),
        economics=spec.economics,
    )


def format_quantity(x: float, significant: int = 4) -> str:
    """Thousands separators, at least ``significant`` figures, never scientific notation."""
    if x == 0:
        return "0"
    decimals = max(0, significant - 1 - math.floor(math.log10(abs(x))))
    return f"{x:,.{decimals}f}"


def format_plain(x) -> str:
    """Integers with separators; other numbers with trailing zeros trimmed."""
    if isinstance(x, str):
        return x
    if float(x).is_integer():
        return f"{int(x):,}"
    return f"{x:,.6f}".rstrip("0").rstrip(".")


def _pct(x):
    return None if x is None else f"{x:.1f}"


def _int(x):
    return None if x is None else f"{int(x):,}"


def _industries(profile: CountyProfile) -> str | None:
    top = profile.top_industries(3)
    if not top:
        return None
    parts = [f"{name} ({share:.1f}%)" for name, share in top]
    if len(parts) == 1:
        return parts[0]
    return "; ".join(parts[:-1]) + "; and " + parts[-1]


def template_text(name: str = "regional_context.txt") -> str:
    return (resources.files("communitypoll") / "data" / "templates" / name).read_text(encoding="utf-8")


def render_template(template: str, values: Mapping[str, str | None]) -> str:
    def sub(match):
        key = match.group(1)
        value = values.get(key)
        if value is None:
            raise RenderError(f"no value for placeholder [{key}]", placeholder=key)
        return value

    text = PLACEHOLDER.sub(sub, template)
    leftover = [m for m in PLACEHOLDER.findall(text) if m in set(PLACEHOLDER.findall(template))]
    if leftover:
        raise RenderError(f"unresolved placeholder [{leftover[0]}]", placeholder=leftover[0])
    return text


def context_values(state: StateContext, county_name: str, profile: CountyProfile,
                   impact: ProjectImpactProfile) -> dict[str, str | None]:
    econ = impact.economics
    values = {
        "STATE_NAME": state.name,
        "YEAR": str(state.year),
        "ENERGY_CONSUMPTION": format_quantity(state.dc_energy_mwh),
        "COUNTY_NAME": county_name,
        "POPULATION": _int(profile.population),
        "FEMALE_PCT": _pct(profile.female_pct),
        "MALE_PCT": _pct(profile.male_pct),
        "MEDIAN_AGE": None if profile.median_age is None else f"{profile.median_age:.1f}",
        "WHITE_PCT": _pct(profile.white_pct),
        "ASIAN_PCT": _pct(profile.asian_pct),
        "BLACK_PCT": _pct(profile.black_pct),
        "HISPANIC_PCT": _pct(profile.hispanic_pct),
        "TOTAL_HOUSEHOLDS": _int(profile.households),
        "AVG_HOUSEHOLD_SIZE": None if profile.avg_household_size is None else f"{profile.avg_household_size:.2f}",
        "BACHELOR_OR_HIGHER_PCT": _pct(profile.bachelor_or_higher_pct),
        "GRADUATE_PCT": _pct(profile.graduate_pct),
        "COMPUTER_PCT": _pct(profile.computer_pct),
        "MEDIAN_HOUSEHOLD_INCOME": _int(profile.median_household_income),
        "PER_CAPITA_INCOME": _int(profile.per_capita_income),
        "TOP_INDUSTRIES": _industries(profile),
        "HOMEOWNERSHIP_RATE": _pct(profile.homeownership_rate),
        "MEDIAN_HOME_VALUE": _int(profile.median_home_value),
        "MEDIAN_RENT": _int(profile.median_rent),
        "YEARLY_ENERGY_CONSUMPTION": format_quantity(impact.annual_energy_mwh),
        "CONSTRUCTION_DURATION": format_plain(econ.construction_duration_months),
        "CONSTRUCTION_JOBS": format_plain(econ.construction_jobs),
        "CONSTRUCTION_ECONOMIC_ACTIVITY": format_plain(econ.construction_activity_musd),
        "CONSTRUCTION_TAX": format_plain(econ.construction_tax_musd),
        "OPERATIONAL_JOBS": format_plain(econ.operational_jobs),
        "SALARY": format_plain(econ.salary_kusd),
        "OPERATIONAL_ECONOMIC_ACTIVITY": format_plain(econ.operational_activity_musd),
        "OPERATIONAL_TAX": format_plain(econ.operational_tax_musd),
        "ONSITE_WATER": format_quantity(impact.onsite_water_ml),
        "OFFSITE_WATER": format_quantity(impact.offsite_water_ml),
        "CARBON_EMISSIONS": format_quantity(impact.carbon_mst),
        "NOX": format_quantity(impact.pollutants_st["NOx"]),
        "VOCS": format_quantity(impact.pollutants_st["VOCs"]),
        "PM25": format_quantity(impact.pollutants_st["PM2.5"]),
        "SO2": format_quantity(impact.pollutants_st["SO2"]),
    }
    return values


def build_regional_context(spec: ProjectSpec, county_profile: CountyProfile, state_data: StateContext,
                           county_name: str, template: str | None = None) -> RegionalContext:
    impact = project_impact(spec)
    text = render_template(template if template is not None else template_text(),
                           context_values(state_data, county_name, county_profile, impact))
    return RegionalContext(state_data.name, state_data.dc_energy_mwh, county_name, county_profile, impact, text)
