import pytest

import hyperdit as hd
from hyperdit.config import (
    PRESETS,
    RunConfig,
    apply_overrides,
    clone,
    dump_config,
    parse_config_text,
)


def test_nano_defaults_are_valid():
    config = hd.ModelConfig()
    config.validate()
    assert config.head_dim == 32
    assert config.anchor_stride == 2
    assert config.patch_dim_large == 192
    assert config.patch_dim_small == 48


def test_patch_ratio_must_divide():
    # both patch sizes divide the image but do not nest in each other
    config = hd.ModelConfig(img_size=24, patch_large=8, patch_small=6)
    with pytest.raises(hd.ConfigError, match="must divide model.patch_large"):
        config.validate()


def test_image_must_divide_by_patch():
    config = hd.ModelConfig(img_size=30)
    with pytest.raises(hd.ConfigError, match="img_size"):
        config.validate()


def test_head_dim_multiple_of_four():
    hd.ModelConfig(hidden_dim=120, num_heads=6).validate()  # head_dim 20 ok
    config = hd.ModelConfig(hidden_dim=108, num_heads=6)  # head_dim 18 bad
    with pytest.raises(hd.ConfigError, match="divisible by 4"):
        config.validate()


def test_connector_spacing_must_divide():
    config = hd.ModelConfig(dit_blocks=4, num_connectors=3)
    with pytest.raises(hd.ConfigError, match="num_connectors"):
        config.validate()


def test_parameterization_whitelist():
    config = hd.ModelConfig(parameterization="eps")
    with pytest.raises(hd.ConfigError, match="parameterization"):
        config.validate()


def test_sampler_guard_zero_is_allowed():
    hd.SamplerConfig(t_guard=0.0).validate()
    with pytest.raises(hd.ConfigError, match="t_guard"):
        hd.SamplerConfig(t_guard=-0.1).validate()


def test_cfg_policy_interval():
    policy = hd.CfgPolicy(w=2.0, t_min=0.25, t_max=0.75)
    assert not policy.active(0.2)
    assert policy.active(0.25)
    assert policy.active(0.75)
    assert not policy.active(0.8)
    with pytest.raises(hd.ConfigError, match="t_min"):
        hd.CfgPolicy(w=1.0, t_min=0.8, t_max=0.2).validate()
    with pytest.raises(hd.ConfigError, match="w"):
        hd.CfgPolicy(w=0.5).validate()


def test_run_config_cross_validation():
    run = RunConfig()
    run.sampler.parameterization = "x_pred"
    with pytest.raises(hd.ConfigError, match="parameterization"):
        run.validate()


def test_presets_all_validate():
    for name, factory in PRESETS.items():
        factory().validate()


def test_preset_shapes():
    xl = PRESETS["xl"]().model
    assert xl.hidden_dim == 1152
    assert xl.dit_blocks == 24
    assert xl.img_size == 256
    assert xl.num_registers == 256
    nano = PRESETS["nano"]().model
    assert nano.hidden_dim == 128
    assert nano.img_size == 32


def test_dump_parse_round_trip():
    run = PRESETS["nano"]()
    run.train.lr = 3e-4
    run.sampler.steps = 17
    run.cfg.w = 2.5
    run.model.vfm_dim = None
    text = dump_config(run)
    back = parse_config_text(text)
    assert back == run


def test_dump_covers_every_section():
    text = dump_config(RunConfig())
    lines = [l for l in text.splitlines() if l and not l.startswith("#")]
    keys = [l.split("=")[0].strip() for l in lines]
    assert keys[0] == "schema_version"
    assert "seed" in keys
    prefixes = {k.split(".")[0] for k in keys if "." in k}
    assert prefixes == {"model", "train", "sampler", "cfg", "paths"}
    assert len(keys) == len(set(keys))


def test_overrides():
    run = RunConfig()
    apply_overrides(
        run, {"model.hidden_dim": "256", "train.lr": "1e-3", "cfg.w": "2", "seed": "7"}
    )
    assert run.model.hidden_dim == 256
    assert run.train.lr == pytest.approx(1e-3)
    assert run.cfg.w == 2.0
    assert run.seed == 7


def test_override_unknown_key():
    with pytest.raises(hd.ConfigError, match="unknown config key"):
        apply_overrides(RunConfig(), {"model.depth": "4"})
    with pytest.raises(hd.ConfigError, match="unknown config key"):
        apply_overrides(RunConfig(), {"optimizer": "adam"})


def test_override_bad_value():
    with pytest.raises(hd.ConfigError, match="model.hidden_dim"):
        apply_overrides(RunConfig(), {"model.hidden_dim": "big"})
    with pytest.raises(hd.ConfigError, match="finite"):
        apply_overrides(RunConfig(), {"train.lr": "inf"})


def test_override_none_handling():
    run = RunConfig()
    apply_overrides(run, {"model.vfm_dim": "none"})
    assert run.model.vfm_dim is None
    apply_overrides(run, {"model.vfm_dim": "64"})
    assert run.model.vfm_dim == 64


def test_override_bool_parsing():
    run = RunConfig()
    apply_overrides(run, {"model.connector_mlp": "false"})
    assert run.model.connector_mlp is False
    apply_overrides(run, {"model.connector_mlp": "true"})
    assert run.model.connector_mlp is True
    with pytest.raises(hd.ConfigError, match="connector_mlp"):
        apply_overrides(run, {"model.connector_mlp": "2"})


def test_schema_version_mismatch_rejected():
    text = dump_config(RunConfig()).replace("schema_version = 1", "schema_version = 99")
    with pytest.raises(hd.ConfigError, match="schema_version"):
        parse_config_text(text)


def test_missing_schema_version_rejected():
    text = "\n".join(
        l for l in dump_config(RunConfig()).splitlines() if not l.startswith("schema_version")
    )
    with pytest.raises(hd.ConfigError, match="schema_version"):
        parse_config_text(text)


def test_parse_ignores_comments_and_blanks():
    text = dump_config(RunConfig()) + "\n# trailing comment\n\n"
    parse_config_text(text)


def test_parse_rejects_garbage_line():
    text = dump_config(RunConfig()) + "\nnot a key value pair\n"
    with pytest.raises(hd.ConfigError, match="line"):
        parse_config_text(text)


def test_clone_is_deep():
    run = RunConfig()
    copy = clone(run)
    copy.model.hidden_dim = 999
    assert run.model.hidden_dim == 128
    assert copy != run
