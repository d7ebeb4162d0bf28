"""Experiment configuration: one YAML file holding data, projection, model and training settings."""
from __future__ import annotations

from dataclasses import dataclass, field, asdict
from importlib import resources
from pathlib import Path
from typing import Optional

import yaml

from .network import NetworkConfig
from .point_head import PointHeadConfig
from .projection import ProjectionConfig
from .synthetic import SyntheticConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    root: str = "data"
    train: list = field(default_factory=lambda: ["00"])
    val: list = field(default_factory=lambda: ["00"])
    remap: Optional[str] = None
    cache: Optional[str] = None


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    projection: dict = field(default_factory=lambda: {"height": 64, "width": 256, "fov_up": 3.0, "fov_down": -25.0})
    n_res: int = 8
    network: NetworkConfig = field(default_factory=NetworkConfig)
    point_head: PointHeadConfig = field(default_factory=PointHeadConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    output: str = "runs/toy"
    synthetic: Optional[SyntheticConfig] = None

    def __post_init__(self):
        p = self.projection
        if (p["height"], p["width"]) != (self.network.height, self.network.width):
            raise ConfigError(f"network input {self.network.height}x{self.network.width} does not match "
                              f"projection {p['height']}x{p['width']}")
        if self.network.n_res != self.n_res:
            raise ConfigError(f"network expects {self.network.n_res} residuals, config builds {self.n_res}")

    @property
    def projection_config(self) -> ProjectionConfig:
        return ProjectionConfig.from_degrees(**self.projection)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d or {})
        known = {"data", "projection", "n_res", "network", "point_head", "train", "output", "synthetic"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            proj = {"height": 64, "width": 256, "fov_up": 3.0, "fov_down": -25.0, **d.get("projection", {})}
            n_res = int(d.get("n_res", 8))
            net = {"height": proj["height"], "width": proj["width"], "n_res": n_res, **d.get("network", {})}
            synth = d.get("synthetic")
            return cls(
                data=DataConfig(**d.get("data", {})),
                projection=proj,
                n_res=n_res,
                network=NetworkConfig.from_dict(net),
                point_head=PointHeadConfig(**d.get("point_head", {})),
                train=TrainConfig.from_dict(d.get("train", {})),
                output=str(d.get("output", "runs/toy")),
                synthetic=SyntheticConfig.from_dict(synth) if synth is not None else None,
            )
        except (TypeError, ValueError, KeyError) as e:
            if isinstance(e, ConfigError):
                raise
            raise ConfigError(str(e)) from e

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            raw = yaml.safe_load(Path(path).read_text())
        except yaml.YAMLError as e:
            raise ConfigError(f"{path}: {e}") from e
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        d = {
            "data": asdict(self.data),
            "projection": dict(self.projection),
            "n_res": self.n_res,
            "network": self.network.to_dict(),
            "point_head": self.point_head.to_dict(),
            "train": self.train.to_dict(),
            "output": self.output,
        }
        if self.synthetic is not None:
            d["synthetic"] = self.synthetic.to_dict()
        return d


def builtin_config(name: str) -> Path:
    """Path of a config file shipped with the package (e.g. ``toy.yaml``)."""
    return Path(str(resources.files("lidarmos") / "configs" / name))


def set_path(d: dict, dotted: str, value) -> None:
    """Apply a ``section.key=value`` override in place; the value is parsed as YAML."""
    keys = dotted.split(".")
    node = d
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot override {dotted}: {k} is not a section")
    node[keys[-1]] = yaml.safe_load(value) if isinstance(value, str) else value
