import pytest

from communitypoll.census import AcsClient, fetch_county_profile, fetch_marginals, packaged_fixture_dir
from communitypoll.population import AgentProfile
from communitypoll.survey import load_questionnaire

TAYLOR = ("48", "441")


@pytest.fixture(scope="session")
def fixture_client():
    return AcsClient(offline=True, fixture_dirs=[packaged_fixture_dir()])


@pytest.fixture(scope="session")
def taylor_tables(fixture_client):
    return fetch_marginals(*TAYLOR, client=fixture_client)


@pytest.fixture(scope="session")
def taylor_profile(fixture_client):
    return fetch_county_profile(*TAYLOR, client=fixture_client)


@pytest.fixture(scope="session")
def questionnaire():
    return load_questionnaire()


@pytest.fixture
def fixture_agent():
    return AgentProfile(
        agent_id="agent-0042",
        language_at_home="Spanish",
        citizenship="Native - born in state of residence",
        employment_status="Educational services, and health care and social assistance",
        household_income="$50,000 to $74,999",
        housing="Owner-occupied: $150,000 to $199,999",
        vehicles="2 vehicles",
        age_group="35 to 44 years",
        sex="Female",
        race="White",
        ethnicity="Hispanic or Latino",
        marital_status="Married",
        education_level="Bachelor's degree",
    )


# Acceptance reporting: one line per criterion at the end of the session.
_criteria: dict[int, dict] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None or (report.when != "call" and report.passed):
        return
    number, label = marker.args
    entry = _criteria.setdefault(number, {"label": label, "ok": True, "seconds": 0.0})
    entry["ok"] &= report.passed
    entry["seconds"] += report.duration if report.when == "call" else 0.0


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        e = _criteria[number]
        verdict = "PASS" if e["ok"] else "FAIL"
        terminalreporter.write_line(f"criterion {number}: {verdict}  {e['label']} ({e['seconds']:.2f} s)")
