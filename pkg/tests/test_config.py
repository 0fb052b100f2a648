import json

import pytest

from hicontrast.config import ConfigError, ExperimentConfig


def _doc(**over):
    doc = {"seed": 3, "dataset": {"sources": [{"n_samples": 4}], "seed": 1},
           "train": {"stage1_epochs": 1, "stage2_epochs": 0, "loss": {"tau_g": 0.1}},
           "transfer": {"steps": 2, "contrastive": "global"}}
    doc.update(over)
    return doc


def test_json_round_trip_is_lossless():
    cfg = ExperimentConfig.from_dict(_doc())
    again = ExperimentConfig.from_json(cfg.to_json())
    assert again == cfg
    assert again.to_json() == cfg.to_json()
    assert cfg.train.loss.tau_g == 0.1 and cfg.transfer.contrastive == "global"


def test_missing_key_is_named():
    doc = _doc()
    del doc["train"]
    with pytest.raises(ConfigError) as info:
        ExperimentConfig.from_dict(doc)
    assert info.value.key == "train"


@pytest.mark.parametrize("path", [("bogus",), ("train", "bogus"), ("train", "loss", "bogus"),
                                  ("dataset", "sources", 0, "bogus")])
def test_unknown_keys_rejected_with_path(path):
    doc = _doc()
    node = doc
    for p in path[:-1]:
        node = node[p]
    node[path[-1]] = 1
    with pytest.raises(ConfigError) as info:
        ExperimentConfig.from_dict(doc)
    assert info.value.key == ".".join(str(p) if not isinstance(p, int) else f"[{p}]" for p in path).replace(".[", "[")


def test_type_errors_name_the_key():
    with pytest.raises(ConfigError, match="train.batch_size"):
        ExperimentConfig.from_dict(_doc(train={"batch_size": "16"}))
    with pytest.raises(ConfigError, match="transfer"):
        ExperimentConfig.from_dict(_doc(transfer={"contrastive": "sometimes"}))


def test_invalid_json():
    with pytest.raises(ConfigError):
        ExperimentConfig.from_json("{not json")


def test_seed_override_reaches_sections():
    cfg = ExperimentConfig.from_dict(_doc()).resolved(11)
    assert cfg.seed == cfg.train.seed == cfg.transfer.seed == 11
    base = ExperimentConfig.from_dict(_doc()).resolved()
    assert base.train.seed == 3


def test_default_config_serialises():
    text = ExperimentConfig().to_json()
    assert set(json.loads(text)) >= {"seed", "dataset", "train", "transfer"}
    assert ExperimentConfig.from_json(text) == ExperimentConfig()
