"""Run configuration: typed sections, presets, and an INI-style file format.

File format (schema version 1)::

    [meta]
    schema = 1

    [data]
    motions = 8
    ...

    [train]
    stage1_steps = 1500

Every key is ``section.name`` on the command line (``--set train.seed=3``).
Unknown sections or keys, and values that do not parse as the field's type,
raise ``ConfigError`` naming the offending key.
"""

import configparser
import io
from dataclasses import asdict, dataclass, field, fields, replace

from .errors import DomainError
from .loss import LossWeights
from .synthdata import SceneSpec

SCHEMA_VERSION = 1


class ConfigError(DomainError):
    pass


@dataclass
class DataConfig:
    scene: SceneSpec = field(default_factory=SceneSpec)
    motions: int = 8
    frames: int = 20
    views: int = 4
    train_views: int = 3
    resolution: int = 64
    elevation: float = 15.0
    radius: float = 2.0
    fov: float = 33.9
    heldout_motions: int = 2
    seed: int = 0


@dataclass
class ModelConfig:
    n_k: int = 32
    latent_dim: int = 8
    width: int = 128
    depth: int = 8
    pos_freqs: int = 6
    time_freqs: int = 4
    graph_degree: int = 6
    n_g: int = 64
    embed_dim: int = 64
    projector_hidden: int = 64


@dataclass
class TrainConfig:
    stage1_steps: int = 1500
    stage2_steps: int = 4000
    batch_motions: int = 4
    batch_views: int = 3
    batch_frames: int = 2
    lr_decoder: float = 1e-3
    lr_latent: float = 1e-2
    lr_keypoints: float = 1e-3
    lr_radii: float = 1e-3
    lr_centers: float = 1e-3
    lr_opacity: float = 5e-2
    lr_color: float = 2.5e-3
    lr_scale: float = 5e-3
    densify_interval: int = 100
    densify_grad: float = 2e-4
    prune_opacity: float = 0.05
    anneal_interval: int = 500
    reassign_interval: int = 100
    keypoint_init_radius: float = 0.5
    keypoint_init_scale: float = 0.06
    keypoint_init_opacity: float = 0.5
    gaussian_scale_factor: float = 0.5
    gaussian_init_opacity: float = 0.3
    latent_init_std: float = 0.5
    latent_init_log_var: float = -4.0
    # KL weight ramps linearly from 0 over this fraction of stage 1
    kl_warmup: float = 0.5
    arap_intervals: str = "1,2,4"
    stage1_resolution: int = 32
    # "fraction:resolution" milestones through stage 2
    stage2_resolutions: str = "0:32,0.4:64"
    projector_steps: int = 1500
    lr_projector: float = 3e-3
    recon_steps: int = 300
    lr_recon: float = 5e-2
    recon_frames: int = 4
    seed: int = 0

    @property
    def dt_choices(self) -> list[int]:
        return [int(x) for x in self.arap_intervals.split(",") if x.strip()]

    def kl_scale(self, stage: int, step: int) -> float:
        if stage != 1 or self.kl_warmup <= 0 or self.stage1_steps == 0:
            return 1.0
        return min(1.0, step / (self.kl_warmup * self.stage1_steps))

    def resolution_at(self, fraction: float) -> int:
        res = None
        for item in self.stage2_resolutions.split(","):
            start, value = item.split(":")
            if fraction >= float(start):
                res = int(value)
        if res is None:
            raise ConfigError("train.stage2_resolutions must start at 0")
        return res


@dataclass
class Config:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossWeights = field(default_factory=LossWeights)

    def validate(self) -> "Config":
        d, m, t = self.data, self.model, self.train
        checks = [
            (d.motions >= 1, "data.motions"), (d.frames >= 2, "data.frames"), (d.views >= 1, "data.views"),
            (1 <= d.train_views <= d.views, "data.train_views"), (d.resolution >= 8, "data.resolution"),
            (d.radius > 0, "data.radius"), (0 < d.fov < 180, "data.fov"), (d.heldout_motions >= 0, "data.heldout_motions"),
            (m.n_k >= 1, "model.n_k"), (m.latent_dim >= 1, "model.latent_dim"), (m.depth >= 2, "model.depth"),
            (0 <= m.graph_degree < max(m.n_k, 1), "model.graph_degree"), (m.n_g >= 1, "model.n_g"),
            (t.stage1_steps >= 0, "train.stage1_steps"), (t.stage2_steps >= 0, "train.stage2_steps"),
            (t.batch_motions >= 1, "train.batch_motions"), (t.batch_views >= 1, "train.batch_views"),
            (t.batch_frames >= 1, "train.batch_frames"), (t.densify_interval >= 0, "train.densify_interval"),
            (t.anneal_interval >= 0, "train.anneal_interval"), (bool(t.dt_choices), "train.arap_intervals"),
            (d.resolution % t.stage1_resolution == 0, "train.stage1_resolution"),
            (0.0 <= t.kl_warmup <= 1.0, "train.kl_warmup"),
        ]
        for ok, key in checks:
            if not ok:
                raise ConfigError(f"invalid value for {key}")
        try:
            for item in t.stage2_resolutions.split(","):
                start, value = item.split(":")
                if d.resolution % int(value) or not 0.0 <= float(start) <= 1.0:
                    raise ValueError(item)
        except ValueError as exc:
            raise ConfigError(f"invalid value for train.stage2_resolutions: {exc}") from exc
        try:
            d.scene.validate()
        except DomainError as exc:
            raise ConfigError(str(exc)) from exc
        return self


def preset(name: str) -> Config:
    if name == "desk":
        return Config()
    if name == "paper":
        return Config(
            data=DataConfig(motions=50, frames=21, views=9, train_views=8, resolution=512),
            model=ModelConfig(n_k=512, latent_dim=32),
            train=TrainConfig(stage1_steps=2800, stage2_steps=8000, stage1_resolution=128,
                              stage2_resolutions="0:128,0.3:256,0.6:512"),
        )
    raise ConfigError(f"unknown preset {name!r}")


def _sections(cfg: Config) -> dict:
    return {"data": cfg.data, "scene": cfg.data.scene, "model": cfg.model, "train": cfg.train, "loss": cfg.loss}


def _coerce(key: str, current, text: str):
    kind = type(current)
    try:
        if kind is bool:
            low = text.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        return text.strip()
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {text!r} as {kind.__name__}") from exc


def apply_override(cfg: Config, key: str, value: str) -> Config:
    if "." not in key:
        raise ConfigError(f"{key}: overrides must look like section.name=value")
    section, name = key.split(".", 1)
    target = _sections(cfg).get(section)
    if target is None:
        raise ConfigError(f"{key}: unknown section {section!r}")
    if name not in {f.name for f in fields(target)} or name == "scene":
        raise ConfigError(f"{key}: unknown key")
    setattr(target, name, _coerce(key, getattr(target, name), value))
    return cfg


def loads(text: str, base: Config | None = None) -> Config:
    cfg = base if base is not None else Config()
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"unreadable config: {exc}") from exc
    if parser.has_section("meta"):
        schema = parser.get("meta", "schema", fallback=str(SCHEMA_VERSION))
        if schema != str(SCHEMA_VERSION):
            raise ConfigError(f"meta.schema: unsupported schema version {schema}")
    for section in parser.sections():
        if section == "meta":
            continue
        for name, value in parser.items(section):
            apply_override(cfg, f"{section}.{name}", value)
    return cfg.validate()


def load(path, base: Config | None = None) -> Config:
    with open(path) as fh:
        return loads(fh.read(), base)


def dumps(cfg: Config) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    parser["meta"] = {"schema": str(SCHEMA_VERSION)}
    for section, obj in _sections(cfg).items():
        parser[section] = {f.name: str(getattr(obj, f.name)) for f in fields(obj) if f.name != "scene"}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def to_dict(cfg: Config) -> dict:
    return asdict(cfg)


def from_dict(d: dict) -> Config:
    data = dict(d["data"])
    data["scene"] = SceneSpec(**data["scene"])
    return Config(DataConfig(**data), ModelConfig(**d["model"]), TrainConfig(**d["train"]), LossWeights(**d["loss"]))


def copy(cfg: Config) -> Config:
    return from_dict(to_dict(cfg))


__all__ = ["Config", "DataConfig", "ModelConfig", "TrainConfig", "ConfigError", "preset", "load", "loads",
           "dumps", "apply_override", "to_dict", "from_dict", "copy", "replace"]
