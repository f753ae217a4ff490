"""Run configuration: an INI file with sections, two presets, strict validation."""
from __future__ import annotations

import configparser
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .backbone import BLOCK_TYPES, BackboneCfg
from .detection import ClassHeadCfg, HeadCfg
from .grid import GridSpec
from .points import CLASS_NAMES
from .render import RENDER_MODES

PRESETS = ("paper", "desk")


class ConfigError(ValueError):
    """Invalid configuration; ``location`` is ``section.key`` when known."""

    def __init__(self, message: str, location: str | None = None):
        self.location = location
        super().__init__(f"{location}: {message}" if location else message)


@dataclass
class GridCfg:
    x_min: float = -60.0
    x_max: float = 60.0
    y_min: float = -60.0
    y_max: float = 60.0
    cell_size: float = 0.5


@dataclass
class RenderCfg:
    mode: str = "skpp"
    f_out: int = 32
    K: int = 15
    radius: float = 1.5
    sigma: float | None = None
    use_coords: bool = False


@dataclass
class TrainCfg:
    lr: float = 0.01
    epochs: int = 30
    reg_weight: float = 1.0
    rcs_sigma: float = 0.7
    max_distance: float = 2.0
    clip_norm: float = 0.0


@dataclass
class Config:
    grid: GridCfg = field(default_factory=GridCfg)
    render: RenderCfg = field(default_factory=RenderCfg)
    backbone: BackboneCfg = field(default_factory=BackboneCfg)
    head: HeadCfg = field(default_factory=HeadCfg)
    train: TrainCfg = field(default_factory=TrainCfg)
    seed: int = 0

    def grid_spec(self) -> GridSpec:
        g = self.grid
        return GridSpec(g.x_min, g.x_max, g.y_min, g.y_max, g.cell_size)

    def validate(self) -> "Config":
        try:
            spec = self.grid_spec()
        except ValueError as exc:
            raise ConfigError(str(exc), "grid") from None
        if self.render.mode not in RENDER_MODES:
            raise ConfigError(f"unknown mode {self.render.mode!r}, expected one of {RENDER_MODES}", "render.mode")
        if self.render.f_out < 1:
            raise ConfigError("must be >= 1", "render.f_out")
        if self.render.K < 1:
            raise ConfigError("must be >= 1", "render.K")
        if not self.render.radius > 0:
            raise ConfigError("must be positive", "render.radius")
        f = 2 ** (self.backbone.stages - 1)
        if spec.nx % f or spec.ny % f:
            raise ConfigError(f"grid {spec.nx}x{spec.ny} not divisible by {f} for "
                              f"{self.backbone.stages} stages", "backbone.encoder_channels")
        levels = {c.level for c in self.head.classes.values()}
        if set(self.backbone.head_levels) != levels:
            raise ConfigError(f"head levels {sorted(levels)} disagree with backbone.head_levels "
                              f"{self.backbone.head_levels}", "backbone.head_levels")
        if set(self.head.classes) != set(CLASS_NAMES):
            raise ConfigError(f"head needs exactly the classes {CLASS_NAMES}", "head")
        t = self.train
        if not t.lr >= 0:
            raise ConfigError("must be >= 0", "train.lr")
        if t.epochs < 1:
            raise ConfigError("must be >= 1", "train.epochs")
        if not t.rcs_sigma >= 0:
            raise ConfigError("must be >= 0", "train.rcs_sigma")
        if not t.max_distance > 0:
            raise ConfigError("must be positive", "train.max_distance")
        return self

    def with_overrides(self, mode: str | None = None, block_type: str | None = None) -> "Config":
        cfg = self
        if mode is not None:
            cfg = replace(cfg, render=replace(cfg.render, mode=mode))
        if block_type is not None:
            cfg = replace(cfg, backbone=replace(cfg.backbone, block_type=block_type))
        return cfg.validate()


def paper_preset() -> Config:
    return Config().validate()


def desk_preset() -> Config:
    """3 stages on a 64x64 grid with small channel counts."""
    return Config(
        grid=GridCfg(-16.0, 16.0, -16.0, 16.0, 0.5),
        render=RenderCfg(mode="skpp", f_out=16),
        backbone=BackboneCfg(encoder_channels=[16, 24, 32], decoder_channels=16, head_levels=[2, 1]),
        head=HeadCfg({"car": ClassHeadCfg(level=2), "vru": ClassHeadCfg(level=1)}),
        train=TrainCfg(lr=0.1, epochs=300, rcs_sigma=0.0, clip_norm=5.0),
    ).validate()


def preset(name: str) -> Config:
    if name == "paper":
        return paper_preset()
    if name == "desk":
        return desk_preset()
    raise ConfigError(f"unknown preset {name!r}, expected one of {PRESETS}", "--preset")


# --------------------------------------------------------------------------
# INI round trip


def _fmt(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (list, tuple)):
        return ",".join(_fmt(x) for x in v)
    return str(v)


def _parse(text: str, like, location: str):
    text = text.strip()
    try:
        if isinstance(like, bool):
            low = text.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(f"not a boolean: {text!r}")
        if isinstance(like, int):
            return int(text)
        if isinstance(like, float) or like is None:
            return None if text.lower() == "none" else float(text)
        if isinstance(like, list):
            return [int(x) for x in text.split(",") if x.strip()]
        return text
    except ValueError as exc:
        raise ConfigError(str(exc), location) from None


def _parser() -> configparser.ConfigParser:
    cp = configparser.ConfigParser()
    cp.optionxform = str  # keys such as K are case sensitive
    return cp


def config_to_ini(cfg: Config) -> str:
    cp = _parser()
    cp["run"] = {"seed": _fmt(cfg.seed)}
    for section in ("grid", "render", "backbone", "train"):
        cp[section] = {k: _fmt(v) for k, v in asdict(getattr(cfg, section)).items()}
    for name, c in sorted(cfg.head.classes.items()):
        cp[f"head.{name}"] = {k: _fmt(v) for k, v in asdict(c).items()}
    lines = []
    for section in cp.sections():
        lines.append(f"[{section}]")
        lines.extend(f"{k} = {v}" for k, v in cp[section].items())
        lines.append("")
    return "\n".join(lines)


def _apply(obj, items, section: str):
    known = {f.name: f for f in fields(obj)}
    updates = {}
    for key, text in items:
        if key not in known:
            raise ConfigError("unknown key", f"{section}.{key}")
        updates[key] = _parse(text, getattr(obj, key), f"{section}.{key}")
    try:
        return replace(obj, **updates)
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc), section) from None


def config_from_ini(text: str, base: Config | None = None, source: str = "<config>") -> Config:
    """Parse INI text over ``base`` (paper preset by default); unknown sections
    and keys are errors."""
    cp = _parser()
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(str(exc).splitlines()[0], source) from None
    cfg = base or paper_preset()
    grid, render, backbone, train = cfg.grid, cfg.render, cfg.backbone, cfg.train
    classes = dict(cfg.head.classes)
    seed = cfg.seed
    for section in cp.sections():
        items = list(cp[section].items())
        if section == "run":
            for key, val in items:
                if key != "seed":
                    raise ConfigError("unknown key", f"run.{key}")
                seed = _parse(val, 0, "run.seed")
        elif section == "grid":
            grid = _apply(grid, items, section)
        elif section == "render":
            render = _apply(render, items, section)
        elif section == "backbone":
            backbone = _apply(backbone, items, section)
        elif section == "train":
            train = _apply(train, items, section)
        elif section.startswith("head."):
            name = section[5:]
            if name not in CLASS_NAMES:
                raise ConfigError(f"unknown class {name!r}", section)
            classes[name] = _apply(classes.get(name, ClassHeadCfg(level=1)), items, section)
        else:
            raise ConfigError("unknown section", section)
    return Config(grid, render, backbone, HeadCfg(classes), train, seed).validate()


def load_config(path: str | Path | None = None, preset_name: str | None = None) -> Config:
    base = preset(preset_name) if preset_name else paper_preset()
    if path is None:
        return base
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", str(path)) from None
    return config_from_ini(text, base, str(path))


def save_config(cfg: Config, path: str | Path) -> None:
    Path(path).write_text(config_to_ini(cfg), encoding="utf-8")


__all__ = ["BLOCK_TYPES", "Config", "ConfigError", "GridCfg", "PRESETS", "RenderCfg", "TrainCfg",
           "config_from_ini", "config_to_ini", "desk_preset", "load_config", "paper_preset",
           "preset", "save_config"]
