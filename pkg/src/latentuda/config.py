"""Experiment configuration: one YAML document mapped onto nested dataclasses.

Unknown keys are rejected with their dotted path. Every default is
materialized by :func:`to_dict`, so a manifest written from a loaded config
fully determines the run.
"""
from __future__ import annotations

import dataclasses
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .data import DomainStyle, ShapeFamily, SplitSpec, SyntheticShiftConfig, hue_rotation_matrix
from .inference import LatentSearchConfig
from .losses import SsimConfig
from .segnet import SegConfig
from .training import RunConfig
from .vae import VaeConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    root: str = "data"
    source: str = "WLI"
    targets: list[str] = field(default_factory=lambda: ["NBI"])
    image_size: tuple[int, int] = (64, 64)
    split: SplitSpec = field(default_factory=SplitSpec)

    def __post_init__(self) -> None:
        self.image_size = tuple(self.image_size)
        self.targets = list(self.targets)
        if not self.targets:
            raise ValueError("data.targets must name at least one target domain")


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    synth: SyntheticShiftConfig = field(default_factory=SyntheticShiftConfig)
    vae: VaeConfig = field(default_factory=VaeConfig)
    seg: SegConfig = field(default_factory=SegConfig)
    search: LatentSearchConfig = field(default_factory=LatentSearchConfig)
    ssim: SsimConfig = field(default_factory=SsimConfig)
    run: RunConfig = field(default_factory=RunConfig)

    def __post_init__(self) -> None:
        sizes = {"data": self.data.image_size, "vae": self.vae.input_size, "seg": self.seg.input_size}
        if len(set(sizes.values())) != 1:
            raise ValueError(f"image sizes disagree across sections: {sizes}")


def _is_dataclass_type(tp) -> bool:
    return isinstance(tp, type) and dataclasses.is_dataclass(tp)


def _convert(tp, value, path: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _convert(inner[0], value, path)
    if _is_dataclass_type(tp):
        return from_dict(tp, value, path)
    if origin in (list, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list, got {type(value).__name__}")
        if origin is tuple and args and args[-1] is not Ellipsis:
            if len(value) != len(args):
                raise ConfigError(f"{path}: expected {len(args)} values, got {len(value)}")
            return tuple(_convert(a, v, f"{path}[{i}]") for i, (a, v) in enumerate(zip(args, value)))
        elem = args[0] if args else Any
        out = [_convert(elem, v, f"{path}[{i}]") for i, v in enumerate(value)]
        return tuple(out) if origin is tuple else out
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    return value


def from_dict(cls, data: dict | None, path: str = ""):
    """Build dataclass ``cls`` from a mapping, recursing into nested dataclasses."""
    data = {} if data is None else data
    if not isinstance(data, dict):
        raise ConfigError(f"{path or '<root>'}: expected a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    unknown = sorted(set(data) - names)
    if unknown:
        where = f"{path}." if path else ""
        raise ConfigError(f"unknown config key {where}{unknown[0]}")
    kwargs = {}
    for name, value in data.items():
        sub = f"{path}.{name}" if path else name
        kwargs[name] = _convert(hints[name], value, sub)
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or '<root>'}: {exc}") from exc


def to_dict(obj) -> dict:
    """Plain-data view with every field materialized; tuples become lists."""

    def plain(v):
        if dataclasses.is_dataclass(v):
            return {f.name: plain(getattr(v, f.name)) for f in dataclasses.fields(v)}
        if isinstance(v, (list, tuple)):
            return [plain(x) for x in v]
        if isinstance(v, dict):
            return {k: plain(x) for k, x in v.items()}
        return v

    return plain(obj)


def _expand_shortcuts(node):
    # `color_matrix: {hue_rotation: 150}` expands to the rotation matrix
    if isinstance(node, dict):
        out = {}
        for k, v in node.items():
            if k == "color_matrix" and isinstance(v, dict) and set(v) == {"hue_rotation"}:
                out[k] = hue_rotation_matrix(float(v["hue_rotation"]))
            else:
                out[k] = _expand_shortcuts(v)
        return out
    if isinstance(node, list):
        return [_expand_shortcuts(v) for v in node]
    return node


def parse_config(text: str, source: str = "<string>") -> ExperimentConfig:
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" line {mark.line + 1}, column {mark.column + 1}" if mark is not None else ""
        raise ConfigError(f"{source}:{where}: malformed YAML: {getattr(exc, 'problem', exc)}") from exc
    try:
        return from_dict(ExperimentConfig, _expand_shortcuts(raw))
    except ConfigError as exc:
        raise ConfigError(f"{source}: {exc}") from exc


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text(), str(path))


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(to_dict(cfg), sort_keys=False)


# pinned desk-scale benchmark: 64x64 images, WLI-like source, NBI-like target
BENCHMARK_STYLE_TARGET = DomainStyle(
    color_matrix=hue_rotation_matrix(150.0),
    gamma=0.8,
    texture_amplitude=0.06,
    texture_frequency=14.0,
    noise_std=0.02,
)


def benchmark_config(seed: int = 0) -> ExperimentConfig:
    """Desk-scale synthetic-shift configuration used by the acceptance suite."""
    return ExperimentConfig(
        data=DataConfig(root="data", source="WLI", targets=["NBI"], image_size=(64, 64), split=SplitSpec(0.8, 0.25, seed)),
        synth=SyntheticShiftConfig(
            n_images=200,
            n_target=100,
            image_size=(64, 64),
            shape_family=ShapeFamily(),
            source_style=DomainStyle(),
            target_style=dataclasses.replace(BENCHMARK_STYLE_TARGET),
            seed=seed,
        ),
        vae=VaeConfig(
            latent_dim=64,
            encoder_channels=[16, 32, 64, 128],
            decoder_channels=[128, 64, 32, 16],
            input_size=(64, 64),
        ),
        seg=SegConfig(backbone="desk", input_size=(64, 64)),
        search=LatentSearchConfig(max_iterations=100, seed=seed),
        ssim=SsimConfig(),
        run=RunConfig(
            epochs=30,
            batch_size=8,
            vae_lr=1e-3,
            seg_lr=1e-3,
            loss_weights=(1.0, 1e-4, 1e-3),
            data_seed=seed,
            init_seed=seed,
            noise_seed=seed,
        ),
    )
