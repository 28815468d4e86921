import json
from dataclasses import replace

import pytest
import yaml

from hybridasr.config import (
    ConfigError,
    ExperimentConfig,
    dump_config,
    from_dict,
    load_config,
    override,
    to_dict,
)
from hybridasr.experiment import desk_config
from hybridasr.optim import ADADELTA, SGD


def test_defaults_follow_reference_settings():
    cfg = ExperimentConfig()
    assert (cfg.arch.elayers, cfg.arch.eunits, cfg.arch.eprojs) == (5, 320, 320)
    assert (cfg.arch.dunits, cfg.arch.aconv_chans, cfg.arch.aconv_width) == (300, 10, 100)
    assert cfg.train.mol_lambda == 0.5 and cfg.train.batch_size == 30
    assert (cfg.decode.beam, cfg.decode.alpha, cfg.decode.beta) == (20, 0.3, 0.0)
    s0 = cfg.optimizers.stage0
    assert (s0.kind, s0.lr, s0.adadelta_eps, s0.adadelta_eps_decay) == (ADADELTA, 1.0, 1e-8, 1e-2)
    assert (cfg.optimizers.stage1.kind, cfg.optimizers.stage1.lr) == (SGD, 1e-4)
    assert (cfg.optimizers.stage2.kind, cfg.optimizers.stage2.lr) == (SGD, 1e-2)
    assert cfg.optimizers.stage1.sgd_decay_factor == 0.1
    assert cfg.subset_sizes == [50, 100, 200, 400]
    assert cfg.lm_betas == [0.1, 0.3, 0.5]


@pytest.mark.parametrize("suffix", [".yaml", ".json"])
def test_dump_load_round_trip(tmp_path, suffix):
    cfg = desk_config(seed=7)
    dump_config(cfg, tmp_path / f"c{suffix}")
    assert load_config(tmp_path / f"c{suffix}") == cfg


def test_unknown_keys_rejected_at_any_depth(tmp_path):
    for doc in ({"bogus": 1}, {"arch": {"eunits": 4, "wat": 2}}, {"optimizers": {"stage1": {"momentum": 0.9}}}):
        (tmp_path / "c.yaml").write_text(yaml.safe_dump(doc))
        with pytest.raises(ConfigError):
            load_config(tmp_path / "c.yaml")


def test_type_and_range_errors_become_config_errors():
    for doc in ({"seed": "x"}, {"decode": {"beam": 0}}, {"train": {"mol_lambda": 2.0}}, {"arch": []}, {"subset_sizes": 5}):
        with pytest.raises(ConfigError):
            from_dict(doc)


def test_partial_document_keeps_defaults():
    cfg = from_dict({"decode": {"beam": 5}})
    assert cfg.decode.beam == 5 and cfg.decode.alpha == 0.3
    assert cfg.arch == ExperimentConfig().arch


def test_override_nested_field():
    cfg = desk_config()
    new = override(cfg, "decode.beam", 3)
    assert new.decode.beam == 3 and cfg.decode.beam == 20
    assert override(cfg, "optimizers.stage0.adadelta_eps", 1e-8).optimizers.stage0.adadelta_eps == 1e-8
    assert override(cfg, "subset_sizes", [10, 20]).subset_sizes == [10, 20]
    assert override(cfg, "optimizers.stage0.adadelta_eps", yaml.safe_load("1e-6")).optimizers.stage0.adadelta_eps == 1e-6
    with pytest.raises(ConfigError):
        override(cfg, "decode.nope", 1)
    with pytest.raises(ConfigError):
        override(cfg, "decode.beam", -1)


def test_to_dict_is_plain_data():
    d = to_dict(desk_config())
    json.dumps(d)
    assert from_dict(d) == desk_config()
    assert replace(desk_config(), seed=3) != desk_config()
