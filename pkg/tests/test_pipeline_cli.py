import hashlib
import json

import pytest
import yaml

from communitypoll.cli import main
from communitypoll.config import default_config_text

REPORT_FILES = ["aggregates.csv", "aggregates.json", "topics.json", "summary.txt", "charts/net_support.csv",
                "charts/themes.csv"] + [f"charts/q{i:02d}.csv" for i in range(1, 14)]


def write_config(tmp_path, name="run.yaml", **changes):
    data = yaml.safe_load(default_config_text())
    data["paths"]["offline"] = True
    for dotted, value in changes.items():
        section, key = dotted.split("__")
        data[section][key] = value
    path = tmp_path / name
    path.write_text(yaml.safe_dump(data, sort_keys=False))
    return path


def digest_tree(root):
    return {p.relative_to(root).as_posix(): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def full_run(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("run")
    cfg = write_config(tmp)
    assert main(["run", "--config", str(cfg), "--out", str(tmp / "out1")]) == 0
    return tmp, cfg


def test_happy_path_emits_bundle(full_run, capsys):
    tmp, _ = full_run
    report = tmp / "out1" / "report"
    for name in REPORT_FILES:
        assert (report / name).is_file(), name
    aggs = json.loads((report / "aggregates.json").read_text())
    assert [a["question_id"] for a in aggs] == [f"q{i:02d}" for i in range(1, 14)]
    summary = (report / "summary.txt").read_text()
    assert "  Neutral: 54.2%" in summary and "  Net support: +41.4%" in summary
    assert "Conformal intervals: not configured" in summary
    manifest = json.loads((tmp / "out1" / "manifest.json").read_text())
    for entry in manifest["stages"].values():
        assert all((tmp / "out1" / a).exists() for a in entry["artifacts"])


def test_rerun_is_a_noop(full_run, capsys):
    tmp, cfg = full_run
    before = (tmp / "out1" / "manifest.json").read_bytes()
    capsys.readouterr()
    assert main(["analyze", "--config", str(cfg), "--out", str(tmp / "out1")]) == 0
    assert capsys.readouterr().out.strip() == "analyze: skipped"
    assert (tmp / "out1" / "manifest.json").read_bytes() == before


def test_identical_runs_give_identical_bundles(full_run):
    tmp, cfg = full_run
    assert main(["run", "--config", str(cfg), "--out", str(tmp / "out2")]) == 0
    assert digest_tree(tmp / "out1" / "report") == digest_tree(tmp / "out2" / "report")
    pop = "population/population.jsonl"
    assert (tmp / "out1" / pop).read_bytes() == (tmp / "out2" / pop).read_bytes()


def test_force_reruns(full_run, capsys):
    tmp, cfg = full_run
    capsys.readouterr()
    assert main(["report", "--config", str(cfg), "--out", str(tmp / "out1"), "--force"]) == 0
    assert capsys.readouterr().out.startswith("report: ran")


def test_config_change_marks_downstream_stale(full_run, tmp_path, capsys):
    tmp, _ = full_run
    out = tmp / "out1"
    changed = write_config(tmp_path, **{"topics__max_themes": 3})
    assert main(["report", "--config", str(changed), "--out", str(out)]) == 3
    assert "stale" in capsys.readouterr().err


def test_stage_order_error(tmp_path, capsys):
    cfg = write_config(tmp_path)
    assert main(["poll", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 3
    assert "population artifact missing; run 'synthesize' first" in capsys.readouterr().err


def test_topics_disabled_summary(tmp_path, capsys):
    cfg = write_config(tmp_path, **{"topics__enabled": False, "population__agent_count": 200})
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
    assert "Open-text themes: topic analysis skipped" in capsys.readouterr().out
    assert not (tmp_path / "o" / "report" / "charts" / "themes.csv").exists()


def test_calibrated_report(tmp_path, capsys):
    pairs = tmp_path / "pairs.csv"
    rows = ["community_id,question_id,option_id,y_hat,y"] + [
        f"c{i},q12,Neutral,0.5,{0.45 + i / 200}" for i in range(40)]
    pairs.write_text("\n".join(rows) + "\n")
    cfg = write_config(tmp_path, **{"calibration__pairs_csv": "pairs.csv", "population__agent_count": 200})
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
    text = (tmp_path / "o" / "report" / "intervals.csv").read_text().splitlines()
    assert text[0] == "question_id,option,y_hat,lo,hi" and len(text) > 10
    assert "Conformal intervals: alpha 0.1" in capsys.readouterr().out


def test_config_error_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text(default_config_text().replace("agent_count: 1000", "agent_count: 0"))
    assert main(["ingest", "--config", str(bad)]) == 2
    assert "population.agent_count" in capsys.readouterr().err


def test_provider_error_exit_code(tmp_path, capsys):
    data = yaml.safe_load(default_config_text())
    data["paths"]["offline"] = True
    data["population"]["agent_count"] = 50
    data["poll"].update(submit_attempts=2, backoff_base=0)
    data["poll"]["mock"]["submit_failures"] = 100
    cfg = tmp_path / "run.yaml"
    cfg.write_text(yaml.safe_dump(data))
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 4
    assert "provider error" in capsys.readouterr().err


def test_offline_cache_miss_is_generic_error(tmp_path, capsys, monkeypatch):
    monkeypatch.delenv("CENSUS_API_KEY", raising=False)
    data = yaml.safe_load(default_config_text())
    data["region"]["county_fips"] = "001"
    data["paths"]["offline"] = True
    cfg = tmp_path / "run.yaml"
    cfg.write_text(yaml.safe_dump(data))
    assert main(["ingest", "--config", str(cfg)]) == 1


def test_default_config_command(capsys):
    assert main(["default-config"]) == 0
    assert capsys.readouterr().out == default_config_text()


def test_busy_output_directory(tmp_path):
    import filelock
    from communitypoll.config import parse_config
    from communitypoll.errors import CommunityPollError
    from communitypoll.pipeline import Pipeline
    cfg = parse_config(default_config_text(), base_dir=tmp_path)
    pipe = Pipeline(cfg)
    pipe.out.mkdir(parents=True)
    with filelock.FileLock(str(pipe.out / ".lock")):
        with pytest.raises(CommunityPollError, match="in use"):
            pipe.run("ingest")
