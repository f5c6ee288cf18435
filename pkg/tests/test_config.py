import pytest

from speechseek.config import (RunConfig, config_hash, format_config, load_config,
                               parse_config, save_config)
from speechseek.errors import ConfigError, ParseError


def test_defaults_match_documented_values():
    cfg = RunConfig()
    assert cfg.learning_rate == 5e-5
    assert cfg.loss_alpha == pytest.approx(1 / 3)
    assert cfg.loss_beta == pytest.approx(1 / 3)
    assert cfg.quant_gamma == 0.1
    assert cfg.tau == 0.05
    assert cfg.ce_weight == 1.0
    assert cfg.n_mwer == 4
    assert cfg.sampler_lambda == 0.75
    assert cfg.fire_threshold == 1.0
    assert cfg.window == 200
    assert cfg.d_model == 64 and cfg.n_heads == 4
    assert (cfg.speech_layers, cfg.text_layers, cfg.decoder_layers) == (2, 2, 2)


def test_roundtrip_through_text():
    cfg = RunConfig(pairs=77, learning_rate=3e-3, sampler=False, stage="joint")
    assert parse_config(format_config(cfg)) == cfg


def test_roundtrip_through_file(tmp_path):
    cfg = RunConfig(seed=99, noise_sigma=0.25)
    path = tmp_path / "run.cfg"
    save_config(path, cfg)
    assert load_config(path) == cfg


def test_unknown_key_rejected():
    with pytest.raises(ConfigError, match="unknown config key"):
        parse_config("pairs = 10\nmystery_knob = 3\n")


def test_bad_value_reports_line():
    with pytest.raises(ParseError) as exc:
        parse_config("pairs = 10\nepochs = soon\n")
    assert exc.value.line == 2


def test_missing_equals_reports_line():
    with pytest.raises(ParseError) as exc:
        parse_config("pairs 10\n")
    assert exc.value.line == 1


def test_comments_and_blanks_ignored():
    cfg = parse_config("# comment\n\npairs = 12\n")
    assert cfg.pairs == 12


def test_bools_parse_both_ways():
    assert parse_config("sampler = false\n").sampler is False
    assert parse_config("sampler = TRUE\n").sampler is True


def test_hash_tracks_content():
    a, b = RunConfig(), RunConfig(seed=1)
    assert config_hash(a) != config_hash(b)
    assert config_hash(a) == config_hash(RunConfig())
