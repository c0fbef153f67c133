import pytest
import yaml

from modmed.config import ARCHITECTURES, ConfigError, ModelConfig, config_from_dict, emit_config, parse_config


def test_minimal_config_is_fully_defaulted():
    cfg = parse_config("architecture: sem\nencoder: {backbone: conv, rank: 2}\n")
    assert cfg.encoder.num_down == 2 and cfg.encoder.num_middle == 2
    assert cfg.train.lr == 3e-4 and cfg.train.epochs == 500 and cfg.train.optimizer == "adam"
    assert cfg.loss.pyramid_weight == 1.0 and cfg.out_channels == cfg.num_classes == 2
    echoed = yaml.safe_load(emit_config(cfg))
    assert echoed["encoder"]["channel_schedule"] == [32, 64, 128]
    assert echoed["diffusion"]["T"] == 1000 and echoed["data"]["undersample_center"] == 0.04
    assert parse_config("encoder: {rank: 3}").encoder.num_down == 3


def test_ddpm_hierarchical_rejected():
    with pytest.raises(ConfigError, match="not recommended for diffusion"):
        parse_config("architecture: ddpm\nhierarchical: true\n")


@pytest.mark.parametrize("arch", ARCHITECTURES)
def test_round_trip(arch):
    cfg = config_from_dict({"architecture": arch, "encoder": {"backbone": "swin", "channels": 8}})
    assert parse_config(emit_config(cfg)) == cfg
    assert emit_config(parse_config(emit_config(cfg))) == emit_config(cfg)


def test_hierarchical_flag_upgrades_architecture():
    assert parse_config("architecture: sem\nhierarchical: true").architecture == "h_sem"
    assert parse_config("architecture: h_ae").hierarchical is True
    assert parse_config("architecture: ddpm").context.time_embedding is True


@pytest.mark.parametrize("text,match", [
    ("colour: red", "unknown key"),
    ("train: {lr: 1e-3, momentum: 0.9}", r"unknown key\(s\) in train: momentum"),
    ("architecture: gan", "architecture must be"),
    ("architecture: vae\nhierarchical: true", "sem and ae only"),
    ("architecture: h_sem\nhierarchical: false", "hierarchical: false"),
    ("architecture: ddpm\ncontext: {time_embedding: false}", "time_embedding"),
    ("encoder: {backbone: lstm}", "backbone"),
    ("encoder: {num_down: 2, channel_schedule: [8, 16]}", "channel_schedule"),
    ("loss: {recon: huber}", "recon"),
    ("diffusion: {eta: 1.5}", "eta"),
    ("train: {optimizer: sgd}", "adam"),
    ("[1, 2]", "mapping"),
    ("a: [", "malformed"),
])
def test_rejections_name_the_rule(text, match):
    with pytest.raises(ConfigError, match=match):
        parse_config(text)


def test_exponent_floats_and_types():
    cfg = parse_config("train: {lr: 1e-3, epochs: 3}\nloss: {pyramid_weight: 1}")
    assert cfg.train.lr == 1e-3 and isinstance(cfg.loss.pyramid_weight, float)
    assert cfg.encoder.channel_schedule is None or all(isinstance(c, int) for c in cfg.encoder.channel_schedule)


@pytest.mark.parametrize("text,match", [
    ("train: {epochs: ten}", r"train\.epochs must be an integer"),
    ("train: {epochs: 2.5}", "integer"),
    ("train: {lr: fast}", r"train\.lr must be a number"),
    ("encoder: {u_shaped: 1}", "true or false"),
    ("data: {synthetic_dims: 64}", "list"),
])
def test_type_errors_name_the_field(text, match):
    with pytest.raises(ConfigError, match=match):
        parse_config(text)


def test_config_error_is_value_error():
    assert issubclass(ConfigError, ValueError)
    assert isinstance(ModelConfig().to_dict()["encoder"], dict)
