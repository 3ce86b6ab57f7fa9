import json
from dataclasses import replace

import pytest

from communitypoll.errors import MissingAnswerError, ParseError, ProviderError, RunError, UnknownKeyError
from communitypoll.polling import (
    MANIFEST_FILE,
    RAW_FILE,
    REQUESTS_FILE,
    RESPONSES_FILE,
    Batcher,
    PollConfig,
    Progress,
    first_json_object,
    parse_response,
    read_responses,
    reprocess_raw,
    run_poll,
)
from communitypoll.providers import BehaviorProfile, MockProvider, ProviderRequest

FAST = PollConfig(poll_interval=0, backoff_base=0, batch_size=40, concurrency=3, seed=1)


def no_sleep(_):
    pass


@pytest.fixture
def agents(fixture_agent):
    return [replace(fixture_agent, agent_id=f"agent-{i:04d}") for i in range(100)]


def valid_body(questionnaire, **overrides):
    body = {q.id: q.options[0] for q in questionnaire}
    body.update(overrides)
    return body


def test_parse_plain_and_fenced(questionnaire):
    body = json.dumps(valid_body(questionnaire))
    assert parse_response(body, questionnaire)["q12"].selections == ("Strongly Support",)
    fenced = f"Here you go:\n```json\n{body}\n```\nThanks"
    assert parse_response(fenced, questionnaire) == parse_response(body, questionnaire)


def test_parse_accepts_numbered_keys(questionnaire):
    body = {f"question_{i + 1}_id": q.options[0] for i, q in enumerate(questionnaire)}
    assert set(parse_response(json.dumps(body), questionnaire)) == set(questionnaire.ids)


def test_parse_errors(questionnaire):
    body = valid_body(questionnaire)
    del body["q13"]
    with pytest.raises(MissingAnswerError) as err:
        parse_response(json.dumps(body), questionnaire)
    assert err.value.question_id == "q13"
    with pytest.raises(UnknownKeyError):
        parse_response(json.dumps(valid_body(questionnaire, q99="x")), questionnaire)
    with pytest.raises(ParseError):
        parse_response('{"q01": "Positive", "q02": ', questionnaire)
    with pytest.raises(ParseError):
        parse_response("", questionnaire)


def test_first_json_object_skips_noise():
    assert first_json_object('noise {bad} then {"a": 1}') == {"a": 1}


def test_default_run(agents, questionnaire, tmp_path):
    result = run_poll(agents, "SYSTEM", questionnaire, MockProvider(questionnaire, 2), FAST, tmp_path, sleep=no_sleep)
    assert result.n_ok == 100 and result.n_failed == 0
    assert [r.agent_id for r in result.responses] == [a.agent_id for a in agents]
    for name in (REQUESTS_FILE, RAW_FILE, RESPONSES_FILE, MANIFEST_FILE):
        assert (tmp_path / name).exists()
    manifest = json.loads((tmp_path / MANIFEST_FILE).read_text())
    assert manifest["status"] == "complete" and manifest["n_ok"] == 100
    assert read_responses(tmp_path / RESPONSES_FILE) == result.responses
    assert reprocess_raw(tmp_path, questionnaire) == result.responses


def test_results_do_not_depend_on_batching(agents, questionnaire):
    a = run_poll(agents, "S", questionnaire, MockProvider(questionnaire, 2), FAST, sleep=no_sleep)
    b = run_poll(agents, "S", questionnaire, MockProvider(questionnaire, 2),
                 replace(FAST, batch_size=7, concurrency=1), sleep=no_sleep)
    assert a.responses == b.responses


def test_malformed_once_recovers(agents, questionnaire, tmp_path):
    mock = MockProvider(questionnaire, behavior=BehaviorProfile(malformed_first_attempts=1, fenced=True))
    result = run_poll(agents, "S", questionnaire, mock, FAST, tmp_path, sleep=no_sleep)
    assert result.n_ok == 100
    assert {r.retry_count for r in result.responses} == {1}
    assert reprocess_raw(tmp_path, questionnaire) == result.responses


def test_persistent_malformed_fails_after_retries(agents, questionnaire):
    mock = MockProvider(questionnaire, behavior=BehaviorProfile(malformed_first_attempts=10))
    result = run_poll(agents, "S", questionnaire, mock, replace(FAST, max_retries=2), sleep=no_sleep)
    assert result.n_failed == 100
    assert all(r.retry_count == 2 and "ParseError" in r.error for r in result.responses)


def test_over_selection_is_excluded_with_exact_count(agents, questionnaire, tmp_path):
    behavior = BehaviorProfile(over_select_questions=("q03",), over_select_every=3)
    result = run_poll(agents, "S", questionnaire, MockProvider(questionnaire, behavior=behavior), FAST, tmp_path,
                      sleep=no_sleep)
    assert result.n_failed == 34 and result.n_ok == 66
    failed = [r for r in result.responses if not r.ok]
    assert all("OverSelectionError" in r.error for r in failed)
    assert [int(r.agent_id.split("-")[1]) % 3 for r in failed] == [0] * 34
    assert reprocess_raw(tmp_path, questionnaire) == result.responses


def test_transient_provider_statuses_are_retried(agents, questionnaire):
    behavior = BehaviorProfile(timeout_rate=0.2, provider_error_rate=0.2)
    result = run_poll(agents, "S", questionnaire, MockProvider(questionnaire, behavior=behavior),
                      replace(FAST, max_retries=6), sleep=no_sleep)
    assert result.n_ok == 100
    assert any(r.retry_count > 0 for r in result.responses)


def test_submit_failures_back_off(agents, questionnaire):
    sleeps = []
    mock = MockProvider(questionnaire, behavior=BehaviorProfile(submit_failures=2))
    config = replace(FAST, batch_size=1000, backoff_base=1.0, backoff_cap=60)
    result = run_poll(agents, "S", questionnaire, mock, config, sleep=sleeps.append)
    assert result.n_ok == 100
    assert len(sleeps) == 2
    assert 0.5 <= sleeps[0] <= 1.0 and 1.0 <= sleeps[1] <= 2.0


class FailOnRetry:
    """Mock wrapper whose submissions fail once retries start."""

    name = "fail-on-retry"

    def __init__(self, inner):
        self.inner = inner

    def submit(self, requests):
        if any(r.metadata["attempt"] > 0 for r in requests):
            raise ProviderError("service down")
        return self.inner.submit(requests)

    def poll(self, handle):
        return self.inner.poll(handle)

    def fetch(self, handle):
        return self.inner.fetch(handle)


def test_hard_failure_keeps_partial_results(agents, questionnaire, tmp_path):
    behavior = BehaviorProfile(over_select_questions=("q02",), over_select_every=2)
    provider = FailOnRetry(MockProvider(questionnaire, behavior=behavior))
    with pytest.raises(RunError) as err:
        run_poll(agents, "S", questionnaire, provider, replace(FAST, submit_attempts=2), tmp_path, sleep=no_sleep)
    assert len(err.value.partial) == 50 and all(r.ok for r in err.value.partial)
    assert json.loads((tmp_path / MANIFEST_FILE).read_text())["status"] == "partial"


def test_batch_wait_limit_times_out(questionnaire):
    class Slow:
        name = "slow"

        def submit(self, requests):
            return "h"

        def poll(self, handle):
            return "in_progress"

        def fetch(self, handle):
            raise AssertionError("not reached")

    batcher = Batcher(Slow(), PollConfig(poll_interval=1, max_wait=3), sleep=no_sleep)
    out = batcher.run([ProviderRequest("a", "s", "u")], Progress(1))
    assert out[0].status == "timeout"


def test_missing_results_are_filled(questionnaire):
    class Lossy(MockProvider):
        def fetch(self, handle):
            return super().fetch(handle)[1:]

    batcher = Batcher(Lossy(questionnaire), FAST, sleep=no_sleep)
    out = batcher.run([ProviderRequest("a", "s", "u"), ProviderRequest("b", "s", "u")], Progress(2))
    assert [r.status for r in out] == ["provider_error", "ok"]


def test_duplicate_agent_ids_rejected(fixture_agent, questionnaire):
    with pytest.raises(ValueError):
        run_poll([fixture_agent, fixture_agent], "S", questionnaire, MockProvider(questionnaire), FAST)
