import json

import pytest

from noma_deepsic.config import (
    OUT_ENV,
    ConfigValueError,
    RunConfig,
    UnknownKey,
    apply_overrides,
    config_from_dict,
    parse_config,
)


def write(tmp_path, text):
    p = tmp_path / "run.cfg"
    p.write_text(text)
    return p


def test_empty_file_gives_defaults(tmp_path):
    cfg = parse_config(write(tmp_path, ""))
    assert cfg == RunConfig()
    assert (cfg.channel.num_users, cfg.channel.num_antennas, cfg.channel.time_steps) == (4, 4, 1000)
    assert cfg.transformer.seq_len == 10


def test_override_value(tmp_path):
    cfg = parse_config(write(tmp_path, "[channel]\nvelocity_kmh = 90\n"))
    assert cfg.channel.velocity_kmh == 90.0


def test_cli_overrides_file(tmp_path):
    cfg = parse_config(write(tmp_path, "[run]\nseed = 3\n"), {"run.seed": 9})
    assert cfg.seed == 9


def test_tuple_and_bool(tmp_path):
    cfg = parse_config(write(tmp_path, "[sweep]\nvelocities = 0, 60 120\n[run]\nstrict = yes\n"))
    assert cfg.sweep.velocities == (0.0, 60.0, 120.0)
    assert cfg.run.strict is True


def test_unknown_key(tmp_path):
    with pytest.raises(UnknownKey, match="channel.speed"):
        parse_config(write(tmp_path, "[channel]\nspeed = 3\n"))


def test_unknown_section(tmp_path):
    with pytest.raises(UnknownKey, match="radio"):
        parse_config(write(tmp_path, "[radio]\nx = 1\n"))


def test_malformed_value_names_key(tmp_path):
    with pytest.raises(ConfigValueError, match="handover.ttt_steps"):
        parse_config(write(tmp_path, "[handover]\nttt_steps = three\n"))


def test_invalid_combination(tmp_path):
    with pytest.raises(ConfigValueError, match=r"\[handover\]"):
        parse_config(write(tmp_path, "[handover]\nttt_steps = 30\n"))


def test_unknown_scenario():
    with pytest.raises(ConfigValueError):
        apply_overrides(RunConfig(), {"run.scenario": "plot"})


def test_output_dir_fallback(monkeypatch):
    monkeypatch.setenv(OUT_ENV, "/tmp/somewhere")
    assert str(RunConfig().resolved_output_dir()) == "/tmp/somewhere"
    cfg = apply_overrides(RunConfig(), {"run.output_dir": "here"})
    assert str(cfg.resolved_output_dir()) == "here"
    monkeypatch.delenv(OUT_ENV)
    assert str(RunConfig().resolved_output_dir()) == "noma_deepsic_out"


def test_dict_round_trip():
    cfg = apply_overrides(RunConfig(), {"run.seed": 5, "sweep.velocities": "10 20", "transformer.d_model": "16"})
    back = config_from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert back == cfg
