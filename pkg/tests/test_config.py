import pytest

from artgauss.config import ConfigError, config_to_dict, load_config, parse_config, with_overrides
from artgauss.pipeline import PipelineConfig


def test_defaults_when_empty():
    assert parse_config({}) == PipelineConfig()


def test_load_file(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text('[pipeline]\nlambda_geom = 0.02\nk_mobile = 5\nkind = "prismatic"\nskip_phases = ["mobile-only"]\n')
    cfg = load_config(p)
    assert cfg.lambda_geom == 0.02 and cfg.k_mobile == 5 and cfg.kind == "prismatic"
    assert cfg.skip_phases == ("mobile-only",)


def test_integer_for_float_field():
    assert parse_config({"pipeline": {"rel_tol": 1}}).rel_tol == 1.0


@pytest.mark.parametrize("doc", [
    {"pipeline": {"nope": 1}},
    {"other": {}},
    {"pipeline": {"k_mobile": 1.5}},
    {"pipeline": {"k_mobile": True}},
    {"pipeline": {"lambda_geom": "big"}},
    {"pipeline": {"lambda_geom": -1.0}},
    {"pipeline": {"skip_phases": ["mobile-only", "cross-mobile"]}},
    {"pipeline": {"skip_phases": [3]}},
    {"pipeline": 3},
])
def test_rejects(doc):
    with pytest.raises(ConfigError):
        parse_config(doc)


def test_bad_toml(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text("[pipeline\n")
    with pytest.raises(ConfigError):
        load_config(p)
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.toml")


def test_overrides_layer_on_file(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text("[pipeline]\nk_cross = 7\nseed = 3\n")
    cfg = with_overrides(load_config(p), {"seed": 9, "skip_phases": "cross-mobile"})
    assert (cfg.k_cross, cfg.seed, cfg.skip_phases) == (7, 9, ("cross-mobile",))


def test_dict_round_trip():
    cfg = PipelineConfig(k_mobile=4, skip_phases=("mobile-only",))
    assert parse_config({"pipeline": config_to_dict(cfg)}) == cfg
