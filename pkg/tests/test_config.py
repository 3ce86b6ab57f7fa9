import pytest
import yaml

from communitypoll.config import default_config_text, load_config, parse_config
from communitypoll.errors import ConfigError


def base():
    return yaml.safe_load(default_config_text())


def dumped(data):
    return yaml.safe_dump(data, sort_keys=False)


def line_of(text, needle):
    return next(i for i, line in enumerate(text.splitlines(), 1) if needle in line)


def test_default_config_parses():
    cfg = parse_config(default_config_text())
    assert cfg.agent_count == 1000 and cfg.seed == 0
    assert cfg["poll"]["mock"]["quotas"]["q12"]["Neutral"] == 0.542
    assert cfg["population"]["alpha"] == 0.05
    assert cfg["poll"]["temperature"] is None


def test_hash_is_stable_and_sensitive():
    a = parse_config(default_config_text())
    b = parse_config(default_config_text())
    assert a.hash() == b.hash()
    data = base()
    data["population"]["seed"] = 1
    c = parse_config(dumped(data))
    assert c.hash() != a.hash()
    assert c.hash(["region"]) == a.hash(["region"])


@pytest.mark.parametrize("section, key, value, needle, message", [
    ("population", "agent_count", 0, "agent_count", "must be at least 1"),
    ("population", "alpha", 1.5, "alpha: 1.5", "must be in (0, 1)"),
    ("region", "state_fips", 48, "state_fips", "quote numeric codes"),
    ("project", "pue", 0.9, "pue", "must be at least 1"),
    ("poll", "provider", "carrier-pigeon", "provider", "must be one of"),
    ("population", "seed", "zero", "seed", "expected an integer"),
    ("poll", "bogus", 1, "bogus", "unknown key"),
])
def test_errors_name_the_line(section, key, value, needle, message):
    data = base()
    data[section][key] = value
    text = dumped(data)
    with pytest.raises(ConfigError) as err:
        parse_config(text, "run.yaml")
    assert f"run.yaml:{line_of(text, needle)}:" in str(err.value)
    assert message in str(err.value)
    assert f"{section}.{key}" in str(err.value)


def test_missing_required_section_and_key():
    data = base()
    del data["population"]
    with pytest.raises(ConfigError, match="population: required section is missing"):
        parse_config(dumped(data))
    data = base()
    del data["population"]["seed"]
    with pytest.raises(ConfigError, match="population.seed: required key is missing"):
        parse_config(dumped(data))


def test_unknown_section_pollutant_and_economics():
    data = base()
    data["extras"] = {}
    with pytest.raises(ConfigError, match="unknown section"):
        parse_config(dumped(data))
    data = base()
    data["project"]["pollutant_intensities"]["CO"] = 1.0
    with pytest.raises(ConfigError, match="unknown pollutant"):
        parse_config(dumped(data))
    data = base()
    del data["project"]["pollutant_intensities"]["SO2"]
    with pytest.raises(ConfigError, match="SO2"):
        parse_config(dumped(data))
    data = base()
    data["project"]["economics"]["stadiums"] = 2
    with pytest.raises(ConfigError, match="unknown economic figure"):
        parse_config(dumped(data))


def test_mock_behavior_and_http_checks():
    data = base()
    data["poll"]["mock"]["telepathy"] = True
    with pytest.raises(ConfigError, match="poll.mock"):
        parse_config(dumped(data))
    data = base()
    data["poll"]["provider"] = "http_batch"
    with pytest.raises(ConfigError, match="base_url"):
        parse_config(dumped(data))


def test_invalid_yaml_reports_line():
    with pytest.raises(ConfigError, match=r"x.yaml:2: invalid YAML"):
        parse_config("region:\n\tstate_fips: 1\n", "x.yaml")
    with pytest.raises(ConfigError, match="must be a mapping"):
        parse_config("- 1\n- 2\n")


def test_paths_resolve_against_config_dir(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text(default_config_text())
    cfg = load_config(path)
    assert cfg.out_dir == tmp_path / "out"
    assert cfg.with_overrides(out_dir="/abs/out").out_dir.as_posix() == "/abs/out"
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(tmp_path / "missing.yaml")


def test_marital_multiplier_validation():
    data = base()
    data["population"]["marital_multipliers"] = {"10 to 14 years": {"Widowed": 2.0}}
    with pytest.raises(ConfigError, match="not an adult age group"):
        parse_config(dumped(data))
    data["population"]["marital_multipliers"] = {"20 to 24 years": {"Eloped": 2.0}}
    with pytest.raises(ConfigError, match="unknown marital status"):
        parse_config(dumped(data))
    data["population"]["marital_multipliers"] = {"20 to 24 years": {"Married": -1}}
    with pytest.raises(ConfigError, match="nonnegative"):
        parse_config(dumped(data))
    data["population"]["marital_multipliers"] = None
    assert parse_config(dumped(data))["population"]["marital_multipliers"] is None
