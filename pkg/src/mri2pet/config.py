"""Declarative run configuration.

One YAML document covers network, schedule, loss, training, data, and
sampling settings; unset fields take the published defaults and unknown keys
are rejected rather than ignored. Every run writes its fully resolved
configuration next to its outputs.
"""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field, fields

import yaml

from .conditioning import CLINICAL_DIM
from .errors import ConfigurationError
from .networks import NetConfig
from .training import LossWeights

CONFIG_VERSION = 1


@dataclass
class NetSection:
    base_channels: int = 64
    depth: int = 4
    channel_multipliers: list = field(default_factory=lambda: [1, 2, 3, 4])
    attention_resolutions: list = field(default_factory=lambda: [16, 8, 4])
    attention_heads: int = 4
    in_slices: int = 15
    image_size: list = field(default_factory=lambda: [96, 112])
    group_norm_groups: int = 32
    res_blocks: int = 4
    dropout: float = 0.0
    use_clinical: bool = True
    time_embed_mult: int = 8
    fusion: str = "adagn"
    condition_placement: str = "both"


@dataclass
class ScheduleSection:
    timesteps: int = 1000
    offset: float = 0.008


@dataclass
class LossSection:
    lambda_task: float = 0.1
    lambda_diff: float = 1.0
    lambda_cycle: float = 1.0
    task_metric: str = "l1"
    diff_metric: str = "l1"
    task_target: str = "pet"  # predefined task: "pet" (translation) or "mri" (reconstruction)
    use_roi: bool = True
    roi_inside: float = 3.0
    roi_outside: float = 1.0


@dataclass
class TrainSection:
    steps: int = 72000
    batch_size: int = 6
    lr: float = 5e-4
    weight_decay: float = 1e-6
    ema_decay: float = 0.999
    grad_clip: float = 1.0
    log_interval: int = 100
    val_interval: int = 0  # 0 disables periodic validation
    ckpt_interval: int = 0  # 0 keeps only last/best


@dataclass
class DataSection:
    slice_axis: int = 2  # axial


@dataclass
class SampleSection:
    ddim_steps: int = 1000  # full-length chain by default; lower to sub-sample
    slice_batch: int = 32
    clamp_x0: bool = True


@dataclass
class RunConfig:
    seed: int = 0
    net: NetSection = field(default_factory=NetSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    loss: LossSection = field(default_factory=LossSection)
    train: TrainSection = field(default_factory=TrainSection)
    data: DataSection = field(default_factory=DataSection)
    sample: SampleSection = field(default_factory=SampleSection)

    def net_config(self) -> NetConfig:
        n = self.net
        return NetConfig(
            base_channels=n.base_channels,
            depth=n.depth,
            channel_multipliers=tuple(n.channel_multipliers),
            attention_resolutions=tuple(n.attention_resolutions),
            attention_heads=n.attention_heads,
            in_slices=n.in_slices,
            image_size=tuple(n.image_size),
            group_norm_groups=n.group_norm_groups,
            res_blocks=n.res_blocks,
            dropout=n.dropout,
            clinical_dim=CLINICAL_DIM if n.use_clinical else 0,
            time_embed_mult=n.time_embed_mult,
            fusion=n.fusion,
            condition_placement=n.condition_placement,
        )

    def loss_weights(self) -> LossWeights:
        return LossWeights(
            lambda_task=self.loss.lambda_task,
            lambda_diff=self.loss.lambda_diff,
            lambda_cycle=self.loss.lambda_cycle,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["config_version"] = CONFIG_VERSION
        return d

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        raw = dict(raw)
        raw.pop("config_version", None)
        return _build(cls, raw, path="")

    @classmethod
    def from_yaml(cls, path) -> "RunConfig":
        with open(path) as fh:
            raw = yaml.safe_load(fh) or {}
        if not isinstance(raw, dict):
            raise ConfigurationError(f"{path}: top level must be a mapping")
        return cls.from_dict(raw)

    def write_yaml(self, path) -> None:
        with open(path, "w") as fh:
            yaml.safe_dump(self.to_dict(), fh, sort_keys=True)


_SECTIONS = {
    "net": NetSection,
    "schedule": ScheduleSection,
    "loss": LossSection,
    "train": TrainSection,
    "data": DataSection,
    "sample": SampleSection,
}


def _build(cls, raw: dict, path: str):
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(raw) - set(known))
    if unknown:
        where = path or "top level"
        raise ConfigurationError(f"unknown config key(s) at {where}: {', '.join(unknown)}")
    kwargs = {}
    for name, value in raw.items():
        section = _SECTIONS.get(name) if cls is RunConfig else None
        if section is not None:
            if not isinstance(value, dict):
                raise ConfigurationError(f"config section {name!r} must be a mapping")
            kwargs[name] = _build(section, value, path=f"{name}.")
        else:
            kwargs[name] = value
    return cls(**kwargs)


def patch_config(cfg: RunConfig, updates: dict) -> RunConfig:
    """Return a new config with dotted-path updates applied (strict keys)."""
    d = cfg.to_dict()
    d.pop("config_version", None)
    for dotted, value in updates.items():
        node = d
        *parents, leaf = dotted.split(".")
        for part in parents:
            if part not in node:
                raise ConfigurationError(f"unknown config path {dotted!r}")
            node = node[part]
        if leaf not in node:
            raise ConfigurationError(f"unknown config path {dotted!r}")
        node[leaf] = value
    return RunConfig.from_dict(d)
