"""Run configuration: YAML-serializable, strictly validated, with
defaults reproducing the published training schedule and the C3 setup."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import yaml

from .losses import LossWeights
from .nets import AutoencoderConfig, ClassifierConfig, ConfigError, VNetConfig
from .phantom import DomainSpec, builtin_domains
from .training import OptimSpec, TrainStage, default_stages


@dataclass
class Config:
    seed: int = 1234
    deterministic: bool = True
    threads: int = 1
    target_size: int = 64
    data_dir: str = "data"
    run_dir: str = "runs"
    source: str = "A"
    target: str = "B"
    preset: str = "c3"
    segnet: VNetConfig = None
    autoencoder: AutoencoderConfig = None
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    loss_weights: LossWeights = field(default_factory=LossWeights)
    stages: dict = field(default_factory=default_stages)
    domains: list = field(default_factory=builtin_domains)

    def __post_init__(self):
        if self.segnet is None:
            self.segnet = VNetConfig(input_size=self.target_size)
        if self.autoencoder is None:
            self.autoencoder = AutoencoderConfig(input_size=self.target_size)

    def domain(self, name):
        for d in self.domains:
            if d.name == name:
                return d
        raise ConfigError(f"unknown domain {name!r}")


_TUPLE_FIELDS = {"azimuth_deg", "elevation_deg", "resolution_mm", "split", "spacing_mm"}


def _build(cls, data, where):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {sorted(unknown)}")
    kwargs = {}
    for key, value in data.items():
        if key in _TUPLE_FIELDS and isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def config_from_dict(data):
    if not isinstance(data, dict):
        raise ConfigError("config root: expected a mapping")
    data = dict(data)
    sub = {}
    if "segnet" in data:
        sub["segnet"] = _build(VNetConfig, data.pop("segnet"), "segnet")
    if "autoencoder" in data:
        sub["autoencoder"] = _build(AutoencoderConfig, data.pop("autoencoder"), "autoencoder")
    if "classifier" in data:
        sub["classifier"] = _build(ClassifierConfig, data.pop("classifier"), "classifier")
    if "loss_weights" in data:
        sub["loss_weights"] = _build(LossWeights, data.pop("loss_weights"), "loss_weights")
    if "domains" in data:
        doms = data.pop("domains")
        if not isinstance(doms, list):
            raise ConfigError("domains: expected a list")
        sub["domains"] = [_build(DomainSpec, d, f"domains[{i}]") for i, d in enumerate(doms)]
    if "stages" in data:
        stages = default_stages()
        raw = data.pop("stages")
        if not isinstance(raw, dict):
            raise ConfigError("stages: expected a mapping")
        for sid, overrides in raw.items():
            if sid not in stages:
                raise ConfigError(f"stages: unknown stage {sid!r}")
            stages[sid] = _merge_stage(stages[sid], overrides, f"stages.{sid}")
        sub["stages"] = stages
    cfg = _build(Config, {**data, **sub}, "config")
    return cfg


def _merge_stage(stage, overrides, where):
    if not isinstance(overrides, dict):
        raise ConfigError(f"{where}: expected a mapping")
    stage_names = {f.name for f in dataclasses.fields(TrainStage)}
    optim_names = {f.name for f in dataclasses.fields(OptimSpec)}
    kwargs = {}
    for key, value in overrides.items():
        if key in ("optim", "cls_optim"):
            if value is None:
                kwargs[key] = None
                continue
            base = getattr(stage, key) or OptimSpec("sgd", 1e-4)
            unknown = set(value) - optim_names
            if unknown:
                raise ConfigError(f"{where}.{key}: unknown key(s) {sorted(unknown)}")
            kwargs[key] = dataclasses.replace(base, **value)
        elif key in stage_names:
            kwargs[key] = value
        else:
            raise ConfigError(f"{where}: unknown key {key!r}")
    return dataclasses.replace(stage, **kwargs)


def config_to_dict(cfg):
    def plain(obj):
        if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
            return {k: plain(v) for k, v in dataclasses.asdict(obj).items()}
        if isinstance(obj, tuple):
            return [plain(v) for v in obj]
        if isinstance(obj, dict):
            return {k: plain(v) for k, v in obj.items()}
        if isinstance(obj, list):
            return [plain(v) for v in obj]
        return obj

    out = {}
    for f in dataclasses.fields(Config):
        out[f.name] = plain(getattr(cfg, f.name))
    return out


def load_config(path):
    with open(path) as fh:
        data = yaml.safe_load(fh)
    return config_from_dict(data or {})


def save_config(cfg, path):
    with open(path, "w") as fh:
        yaml.safe_dump(config_to_dict(cfg), fh, sort_keys=False)
