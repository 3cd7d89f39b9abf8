from pathlib import Path

import pytest
from hypothesis import given, settings as hypothesis_settings, strategies as st

from krflow.config import (
    ConfigError,
    apply_overrides,
    config_hash,
    dump_scenario,
    load_scenario,
    parse_scenario,
    settings,
)

SCENARIOS = Path(__file__).resolve().parent.parent / "scenarios"

REFERENCE = """\
[grid]
n = 128

[flow]
t_end = 0.5
ladder_depth = 3
levels = [4, 6]

[[pole]]
x = 0.5
y = 0.5
nu = 0.8
sign = "minus"
"""


def test_parse_reference_scenario():
    """Test a complete scenario parses with defaults filled in"""
    config = parse_scenario(REFERENCE)
    assert config.grid.n == 128
    assert config.flow.levels == [4, 6]
    assert config.checks.names == "all"
    assert [p.location for p in config.poles_of("minus")] == [(0.5, 0.5)]
    assert config.poles_of("plus") == []


def test_missing_grid_size_reports_line():
    """Test a missing grid.n names the key and the section line"""
    with pytest.raises(ConfigError) as error:
        parse_scenario("[grid]\n\n[flow]\nt_end = 0.5\n")
    assert "missing key 'grid.n'" in str(error.value)
    assert error.value.line == 1


def test_invalid_grid_size():
    """Test grid sizes that are not powers of two are rejected at the n line"""
    with pytest.raises(ConfigError, match="power of two") as error:
        parse_scenario("[grid]\nn = 100\n")
    assert error.value.line == 2


def test_syntax_error_carries_line():
    """Test TOML syntax errors keep their line number"""
    with pytest.raises(ConfigError, match="syntax error") as error:
        parse_scenario("[grid]\nn = = 64\n")
    assert error.value.line == 2


def test_cusp_scenario_is_rejected():
    """Test a minus pole with nu >= 2 fails at load with a cusp message"""
    text = REFERENCE.replace("nu = 0.8", "nu = 2.1")
    with pytest.raises(ConfigError, match="cusp") as error:
        parse_scenario(text)
    assert error.value.line == text.splitlines().index("nu = 2.1") + 1


def test_poles_too_close():
    """Test poles closer than 8h are rejected"""
    text = REFERENCE + '\n[[pole]]\nx = 0.52\ny = 0.5\nnu = 0.5\nsign = "minus"\n'
    with pytest.raises(ConfigError, match="apart"):
        parse_scenario(text)


def test_shared_location_of_opposite_signs():
    """Test plus and minus poles may not share a location"""
    text = REFERENCE + '\n[[pole]]\nx = 0.5\ny = 0.5\nnu = 0.5\nsign = "plus"\n'
    with pytest.raises(ConfigError, match="share location"):
        parse_scenario(text)


def test_counterexample_level_resolution():
    """Test counterexample levels finer than n allows are rejected"""
    text = "[grid]\nn = 64\n\n[checks]\ncounterexample_levels = [2, 5]\n"
    with pytest.raises(ConfigError, match="4h"):
        parse_scenario(text)


def test_invalid_sign():
    """Test pole signs other than plus/minus are rejected"""
    text = REFERENCE.replace('sign = "minus"', 'sign = "neutral"')
    with pytest.raises(ConfigError, match="pole.0.sign"):
        parse_scenario(text)


def test_dump_round_trip():
    """Test dump_scenario output parses back to the same config"""
    config = parse_scenario(REFERENCE)
    assert parse_scenario(dump_scenario(config)) == config


@hypothesis_settings(max_examples=30, deadline=None)
@given(st.integers(min_value=0, max_value=2 ** 40), st.integers(min_value=0, max_value=2 ** 40))
def test_config_hash_tracks_content(seed_a, seed_b):
    """Test the config hash is stable and changes with the seed"""
    base = parse_scenario(REFERENCE)
    first = base.model_copy(update={"sampling": base.sampling.model_copy(update={"seed": seed_a})})
    second = base.model_copy(update={"sampling": base.sampling.model_copy(update={"seed": seed_b})})
    assert config_hash(first) == config_hash(first.model_copy())
    assert len(config_hash(first)) == 64
    assert (config_hash(first) == config_hash(second)) == (seed_a == seed_b)


def test_load_scenario_files():
    """Test the shipped scenarios load, and the cusp scenario does not"""
    for name in ("flat", "reference", "cone", "near_cusp"):
        load_scenario(SCENARIOS / f"{name}.toml")
    with pytest.raises(ConfigError, match="cusp"):
        load_scenario(SCENARIOS / "cusp.toml")


def test_apply_overrides(monkeypatch):
    """Test CLI overrides land in the settings"""
    monkeypatch.setattr(settings, "threads", 1)
    monkeypatch.setattr(settings, "strict", False)
    apply_overrides(threads=0, strict=True)
    assert settings.threads == 1
    assert settings.strict is True
    apply_overrides(threads=4)
    assert settings.threads == 4


if __name__ == "__main__":
    pytest.main([__file__])
