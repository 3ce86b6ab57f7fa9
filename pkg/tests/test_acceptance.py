"""Exit criteria for the build, each checked at its stated tolerance and time budget."""

import hashlib
import math
import time
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest
import yaml

from communitypoll.analytics import aggregate, net_support, summary_lines
from communitypoll.calibration import (
    calibrate_scores,
    coverage_bound,
    coverage_simulation,
    predict_interval,
)
from communitypoll.cli import main
from communitypoll.config import default_config_text
from communitypoll.impact import ProjectSpec, StateContext, annual_energy, build_regional_context, water_consumption
from communitypoll.ipf import IpfConfig, fit_arrays
from communitypoll.polling import PollConfig, reprocess_raw, run_poll
from communitypoll.population import synthesize
from communitypoll.providers import BehaviorProfile, MockProvider
from communitypoll.survey import MULTI, SINGLE, render_user_prompt

GOLDEN = Path(__file__).parent / "golden"
FAST_POLL = PollConfig(poll_interval=0, backoff_base=0, seed=7)
TAYLOR_Q12 = {"Strongly Support": 0.036, "Support": 0.400, "Neutral": 0.542, "Oppose": 0.020,
              "Strongly Oppose": 0.002}


def sha(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def agents(taylor_tables):
    return synthesize(taylor_tables, IpfConfig(seed=0), 1000).agents


# 1 ---------------------------------------------------------------------------

@pytest.mark.acceptance(1, "IPF correctness on 100 random 2-D/3-D problems")
def test_ipf_random_problems():
    rng = np.random.default_rng(20240601)
    start = time.perf_counter()
    for i in range(100):
        dims = 2 if i < 50 else 3
        shape = rng.integers(2, 8, size=dims)
        targets = [rng.random(n) + 0.01 for n in shape]
        targets = [t / t.sum() for t in targets]

        uniform = fit_arrays(targets, IpfConfig())
        for d, t in enumerate(targets):
            assert np.max(np.abs(uniform.marginal(d) - t)) < 1e-9
        if dims == 2:
            assert np.max(np.abs(uniform.to_dense() - np.outer(*targets))) < 1e-9

        # A random positive seed needs more sweeps than the default cap allows.
        seed = rng.random(tuple(shape)) + 0.05
        fitted = fit_arrays(targets, IpfConfig(max_iterations=200), initial=seed)
        assert fitted.converged
        for d, t in enumerate(targets):
            assert np.max(np.abs(fitted.marginal(d) - t)) < 1e-9
    assert time.perf_counter() - start < 10


# 2 ---------------------------------------------------------------------------

@pytest.mark.acceptance(2, "Population fidelity, n=1000 Taylor agents")
def test_population_fidelity(taylor_tables, tmp_path):
    start = time.perf_counter()
    first = synthesize(taylor_tables, IpfConfig(seed=0), 1000, max_retries=5, path=tmp_path / "a.jsonl")
    elapsed = time.perf_counter() - start
    synthesize(taylor_tables, IpfConfig(seed=0), 1000, max_retries=5, path=tmp_path / "b.jsonl")
    assert first.passed and len(first.reports) == 10
    assert all(r.p_value > 0.05 for r in first.reports)
    assert first.attempts <= 6  # the first draw plus at most 5 regenerations
    assert sha(tmp_path / "a.jsonl") == sha(tmp_path / "b.jsonl")
    assert elapsed < 30


# 3 ---------------------------------------------------------------------------

@pytest.mark.acceptance(3, "Impact formulas on the baseline spec")
def test_impact_formulas():
    spec = ProjectSpec(rated_capacity_mw=100, capacity_factor=0.70, pue=1.1, wue_l_per_kwh=0.36,
                       ewif_l_per_kwh=3.14)
    energy = annual_energy(spec)
    onsite, offsite = water_consumption(spec)
    assert round(energy) == 674_520 and math.isclose(energy, 674_520, rel_tol=1e-6)
    assert math.isclose(onsite, 220_752_000, rel_tol=1e-6)
    assert math.isclose(offsite, 2_117_992_800, rel_tol=1e-6)


# 4 ---------------------------------------------------------------------------

@pytest.mark.acceptance(4, "Prompt fidelity against golden files")
def test_prompt_fidelity(taylor_profile, fixture_agent, questionnaire):
    spec = ProjectSpec(state_emission_factor=0.42, pollutant_intensities={
        "NOx": 5.0e-05, "VOCs": 5.384615384615385e-06, "PM2.5": 2.3076923076923077e-06,
        "SO2": 1.9230769230769231e-07})
    system = build_regional_context(spec, taylor_profile, StateContext("Texas", 2023, 21_000_000), "Taylor")
    user = render_user_prompt(fixture_agent, questionnaire)
    assert system.rendered_text.encode() == (GOLDEN / "system_prompt_taylor.txt").read_bytes()
    assert user.encode() == (GOLDEN / "user_prompt_fixture_agent.txt").read_bytes()
    assert user.startswith("ASSUME THE ROLE of this resident")
    lines = system.rendered_text.splitlines()
    for header in ("State Data Center Context", "Community Profile",
                   "Proposed Data Center Project and Its Estimated Impact", "Survey Instructions"):
        assert header in lines


# 5 ---------------------------------------------------------------------------

@pytest.mark.acceptance(5, "End-to-end mock run, 1000 agents")
def test_end_to_end(agents, questionnaire, tmp_path):
    start = time.perf_counter()
    provider = MockProvider(questionnaire, 7, BehaviorProfile(other_rate=0.05, quotas={"q12": TAYLOR_Q12}))
    result = run_poll(agents, "SYSTEM", questionnaire, provider, FAST_POLL, tmp_path / "poll")
    assert result.n_ok == 1000
    for agg in aggregate(result.responses, questionnaire):
        if agg.kind == SINGLE:
            assert sum(Fraction(100 * c, agg.n_ok) for c in agg.counts) == 100
    for r in result.responses:
        for q in questionnaire:
            if q.kind == MULTI:
                assert 1 <= len(r.answers[q.id].selections) <= 3

    data = yaml.safe_load(default_config_text())
    data["paths"]["offline"] = True
    cfg = tmp_path / "run.yaml"
    cfg.write_text(yaml.safe_dump(data))
    bundles = []
    for name in ("out1", "out2"):
        assert main(["run", "--config", str(cfg), "--out", str(tmp_path / name)]) == 0
        report = tmp_path / name / "report"
        bundles.append({p.relative_to(report).as_posix(): sha(p) for p in sorted(report.rglob("*")) if p.is_file()})
    assert bundles[0] == bundles[1] and len(bundles[0]) >= 18
    assert time.perf_counter() - start < 60


# 6 ---------------------------------------------------------------------------

@pytest.mark.acceptance(6, "Aggregation oracle: hand tally and Neutral 54.2%")
def test_aggregation_oracle(agents, questionnaire):
    from test_analytics import TALLY_Q01, TALLY_Q02, TALLY_Q12, load_ten
    res = {r.question_id: r for r in aggregate(load_ten(questionnaire), questionnaire)}
    assert dict(zip(res["q01"].options, res["q01"].counts)) == TALLY_Q01
    assert dict(zip(res["q02"].options, res["q02"].counts)) == TALLY_Q02
    assert dict(zip(res["q12"].options, res["q12"].counts)) == TALLY_Q12

    provider = MockProvider(questionnaire, 7, BehaviorProfile(quotas={"q12": TAYLOR_Q12}))
    result = run_poll(agents, "SYSTEM", questionnaire, provider, FAST_POLL)
    aggs = aggregate(result.responses, questionnaire)
    q12 = next(a for a in aggs if a.question_id == "q12")
    assert q12.count("Neutral") == 542 and q12.percentage("Neutral") == 54.2
    assert "  Neutral: 54.2%" in summary_lines(aggs, questionnaire, None)
    assert net_support(q12) == pytest.approx(41.4)


# 7 ---------------------------------------------------------------------------

@pytest.mark.acceptance(7, "Conformal coverage grid and quantile edge cases")
@pytest.mark.parametrize("alpha", [0.05, 0.1])
@pytest.mark.parametrize("n_cal", [19, 49, 99])
def test_conformal_coverage(alpha, n_cal):
    start = time.perf_counter()
    coverage = coverage_simulation(alpha, n_cal, 10_000, seed=n_cal)
    assert coverage >= coverage_bound(alpha, 10_000)
    assert time.perf_counter() - start < 5


@pytest.mark.acceptance(7, "Conformal coverage grid and quantile edge cases")
def test_conformal_edge_cases():
    assert calibrate_scores([0.02, 0.05, 0.07], 0.25).q_hat == 0.07
    vacuous = calibrate_scores([0.02, 0.05, 0.07], 0.05)
    assert math.isinf(vacuous.q_hat) and predict_interval(vacuous, 0.4) == (0.0, 1.0)
    assert calibrate_scores([0.0] * 20, 0.1).q_hat == 0.0
    lo, hi = predict_interval(calibrate_scores([0.02, 0.05, 0.07], 0.25), 0.40)
    assert (round(lo, 12), round(hi, 12)) == (0.33, 0.47)


# 8 ---------------------------------------------------------------------------

@pytest.mark.acceptance(8, "Fault tolerance: malformed retry and over-selection exclusion")
def test_fault_tolerance(agents, questionnaire, tmp_path):
    malformed = MockProvider(questionnaire, 7, BehaviorProfile(malformed_first_attempts=1))
    recovered = run_poll(agents, "SYSTEM", questionnaire, malformed, FAST_POLL, tmp_path / "malformed")
    assert recovered.n_ok == 1000 and recovered.n_failed == 0
    assert all(r.retry_count == 1 for r in recovered.responses)

    over = MockProvider(questionnaire, 7, BehaviorProfile(over_select_questions=("q03",), over_select_every=4))
    result = run_poll(agents, "SYSTEM", questionnaire, over, FAST_POLL, tmp_path / "over")
    assert result.n_failed == 250 and result.n_ok == 750
    assert all("OverSelectionError" in r.error and r.retry_count == FAST_POLL.max_retries
               for r in result.responses if not r.ok)
    q03 = next(a for a in aggregate(result.responses, questionnaire) if a.question_id == "q03")
    assert q03.n_ok == 750 and q03.n_failed == 250
    assert reprocess_raw(tmp_path / "over", questionnaire) == result.responses
