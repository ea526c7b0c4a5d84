import pytest

from m3p.config import RunConfig

TOML = """
[data]
dir = "toy"
batch_size = 16

[model]
precision = "fp64"

[model.decoder]
layers = 3

[loss]
lambda = 0.5

[train]
lr = 1e-3
mdropnet = [0.5, 0.0, 0.5]
"""


def test_toml_round_trip(tmp_path):
    path = tmp_path / "run.toml"
    path.write_text(TOML)
    cfg = RunConfig.load(path)
    assert cfg.data.batch_size == 16
    assert cfg.model.decoder.layers == 3 and cfg.model.text_encoder.layers == 2
    assert cfg.loss.lam == 0.5
    assert cfg.train.schedule.p_image == 0.0
    assert cfg.data_paths()[0] == tmp_path / "toy" / "train"
    assert cfg.to_dict()["loss"]["lambda"] == 0.5
    assert RunConfig.from_dict(cfg.to_dict()).config_hash() == cfg.config_hash()


def test_defaults():
    cfg = RunConfig()
    assert cfg.train.lr == 3e-4 and cfg.train.warmup_steps == 200
    assert (cfg.train.beta1, cfg.train.beta2) == (0.9, 0.98)
    assert cfg.train.mdropnet == [0.25, 0.25, 0.50]
    assert cfg.loss.lam == 1.0 and cfg.loss.lambda_ramp == 0.1
    assert cfg.align.tau == 0.1 and cfg.align.text_text == "off"
    e = cfg.model.text_encoder
    assert (e.layers, e.d, e.heads, e.ffn, e.max_positions) == (2, 64, 4, 128, 64)


def test_hash_ignores_base_dir_but_tracks_values():
    a = RunConfig.from_dict({}, base_dir="/x")
    b = RunConfig.from_dict({}, base_dir="/y")
    c = RunConfig.from_dict({"train": {"seed": 1}})
    assert a.config_hash() == b.config_hash() != c.config_hash()
    assert len(a.config_hash()) == 64


@pytest.mark.parametrize("raw", [
    {"bogus": {}},
    {"train": {"learning_rate": 1.0}},
    {"model": {"decoder": {"width": 3}}},
    {"train": {"lr": -1.0}},
    {"loss": {"lambda": -0.1}},
    {"train": {"mdropnet": [0.5, 0.5, 0.5]}},
    {"train": {"source_mask_max": 1.5}},
    {"align": {"tau": 0.0}},
    {"align": {"text_text": "maybe"}},
    {"augment": {"text_mask_fraction": 2.0}},
])
def test_invalid_configs_raise(raw):
    with pytest.raises(ValueError):
        RunConfig.from_dict(raw)
