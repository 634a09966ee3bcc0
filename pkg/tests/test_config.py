import json

import pytest

from telelora.config import ConfigError, RunConfig


def test_defaults_round_trip():
    cfg = RunConfig()
    assert RunConfig.from_json(json.loads(json.dumps(cfg.to_json()))) == cfg
    assert cfg.digest() == RunConfig.from_json({}).digest()


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError, match="stpes"):
        RunConfig.from_json({"train": {"stpes": 3}})
    with pytest.raises(ConfigError):
        RunConfig.from_json({"trian": {}})


@pytest.mark.parametrize("doc", [{"train": {"steps": "10"}}, {"train": {"steps": 1.5}},
                                 {"train": {"include_clean": 1}}, {"zoo": {"widths": 32}},
                                 {"eval": {"alpha": "x"}}, {"generator": []}])
def test_type_errors(doc):
    with pytest.raises(ConfigError):
        RunConfig.from_json(doc)


def test_overrides_and_train_config():
    cfg = RunConfig().with_overrides(train={"steps": 7}, eval={"alpha": 0.5})
    tc = cfg.train_config(2)
    assert tc.steps == 7 and tc.alpha == 0.5 and tc.seed == 2
    assert cfg.digest() != RunConfig().digest()
    with pytest.raises(ConfigError):
        RunConfig().with_overrides(nope={})


def test_load_invalid_json(tmp_path):
    p = tmp_path / "c.json"
    p.write_text("{not json")
    with pytest.raises(ConfigError):
        RunConfig.load(str(p))
