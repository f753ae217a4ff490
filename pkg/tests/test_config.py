import pytest

from radarsparse.config import (
    Config, ConfigError, config_from_ini, config_to_ini, desk_preset, load_config, paper_preset, preset,
    save_config,
)


def test_paper_preset_values():
    cfg = paper_preset()
    spec = cfg.grid_spec()
    assert (spec.x_min, spec.x_max, spec.y_min, spec.y_max, spec.cell_size) == (-60, 60, -60, 60, 0.5)
    assert spec.shape == (240, 240)
    r = cfg.render
    assert (r.mode, r.f_out, r.K, r.radius) == ("skpp", 32, 15, 1.5)
    b = cfg.backbone
    assert b.encoder_channels == [72, 96, 128, 146, 160] and b.kp_radius == 3.75 and b.block_type == "dpvc"
    assert cfg.train.rcs_sigma == 0.7 and cfg.train.epochs == 30
    assert cfg.head.classes["car"].level > cfg.head.classes["vru"].level


def test_desk_preset_values():
    cfg = desk_preset()
    assert cfg.grid_spec().shape == (64, 64)
    assert cfg.backbone.encoder_channels == [16, 24, 32] and cfg.backbone.stages == 3
    assert cfg.render.f_out == 16


@pytest.mark.parametrize("name", ["paper", "desk"])
def test_ini_round_trip(name, tmp_path):
    cfg = preset(name)
    text = config_to_ini(cfg)
    assert config_from_ini(text, base=paper_preset()) == cfg
    save_config(cfg, tmp_path / "c.ini")
    assert load_config(tmp_path / "c.ini") == cfg


def test_partial_override():
    cfg = config_from_ini("[render]\nmode = spp\n[backbone]\nblock_type = sscn\n[run]\nseed = 9\n", desk_preset())
    assert cfg.render.mode == "spp" and cfg.backbone.block_type == "sscn" and cfg.seed == 9
    assert cfg.grid == desk_preset().grid
    assert config_from_ini("[render]\nsigma = 0.5\n").render.sigma == 0.5


@pytest.mark.parametrize("text,location", [
    ("[render]\nmode = dense\n", "render.mode"),
    ("[render]\ncolour = red\n", "render.colour"),
    ("[nope]\nx = 1\n", "nope"),
    ("[train]\nlr = fast\n", "train.lr"),
    ("[train]\nepochs = 0\n", "train.epochs"),
    ("[run]\nseed = x\n", "run.seed"),
    ("[run]\nother = 1\n", "run.other"),
    ("[head.truck]\nlevel = 1\n", "head.truck"),
    ("[head.car]\nlevel = 3\n", "backbone.head_levels"),
    ("[head.car]\nscore_threshold = 2\n", "head.car"),
    ("[grid]\ncell_size = 0.7\n", "grid"),
    ("[backbone]\nencoder_channels = 8,16,32,48,64,80\n", "backbone.encoder_channels"),
    ("[backbone]\nblock_type = resnet\n", "backbone"),
    ("no section header\n", "<config>"),
])
def test_error_locations(text, location):
    with pytest.raises(ConfigError) as err:
        config_from_ini(text)
    assert err.value.location == location
    assert str(err.value).startswith(location)


def test_with_overrides():
    cfg = desk_preset().with_overrides(mode="skpbev", block_type="sscn")
    assert cfg.render.mode == "skpbev" and cfg.backbone.block_type == "sscn"
    assert desk_preset().render.mode == "skpp"
    with pytest.raises(ConfigError):
        desk_preset().with_overrides(mode="bogus")


def test_unknown_preset_and_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="preset"):
        preset("huge")
    with pytest.raises(ConfigError) as err:
        load_config(tmp_path / "missing.ini")
    assert "missing.ini" in err.value.location


def test_default_config_is_paper_preset():
    assert Config().validate() == paper_preset()
