"""Run configuration: YAML in, validated dataclasses out.

Unknown keys are rejected with the line they appear on, since a silently
ignored typo invalidates an experiment.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .datagen import DatasetSpec
from .errors import ConfigError, DFMError
from .net import NetConfig
from .sampler import SamplerConfig
from .search import EarlyStop, SearchConfig
from .train import TrainConfig

NET_KEYS = ("hidden", "depth", "mlp_hidden", "activation")


@dataclass
class RunConfig:
    seed: int = 0
    output_dir: str = "runs/default"
    n_per_condition: int = 50
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    net: dict = field(default_factory=lambda: {"hidden": 64, "depth": 4})
    train: TrainConfig = field(default_factory=lambda: TrainConfig(lr=1e-3))
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    search: SearchConfig = field(default_factory=SearchConfig)
    eval: dict = field(default_factory=lambda: {"max_samples": 512})

    def net_config(self) -> NetConfig:
        spec = self.dataset
        return NetConfig(
            d=spec.d,
            n_classes=spec.n_classes,
            n_pitches=spec.n_pitches,
            n_velocities=spec.n_velocities,
            **self.net,
        )

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["train"]["betas"] = list(self.train.betas)
        return out

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True, default_flow_style=False)


_SECTIONS = {
    "dataset": DatasetSpec,
    "train": TrainConfig,
    "sampler": SamplerConfig,
    "search": SearchConfig,
}
_TOP = {"seed", "output_dir", "n_per_condition", "dataset", "net", "train", "sampler", "search", "eval"}
_EVAL_KEYS = {"max_samples"}


def _key_lines(node, prefix=()) -> dict[tuple, int]:
    lines = {}
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            path = prefix + (k.value,)
            lines[path] = k.start_mark.line + 1
            lines.update(_key_lines(v, path))
    return lines


def _reject_unknown(data: dict, allowed, path: tuple, lines: dict, source: str) -> None:
    for key in data:
        if key not in allowed:
            line = lines.get(path + (key,))
            where = f"{source}:{line}" if line else source
            dotted = ".".join(path + (key,))
            raise ConfigError(f"{where}: unknown config key {dotted!r}")


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    try:
        node = yaml.compose(text)
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{source}: top level must be a mapping")
    lines = _key_lines(node) if node is not None else {}
    _reject_unknown(data, _TOP, (), lines, source)
    cfg = RunConfig()
    try:
        seed = int(data.get("seed", cfg.seed))
        kwargs: dict[str, Any] = {"seed": seed}
        for key in ("output_dir", "n_per_condition"):
            if key in data:
                kwargs[key] = data[key]
        for name, cls in _SECTIONS.items():
            section = data.get(name) or {}
            if not isinstance(section, dict):
                raise ConfigError(f"{source}: section {name!r} must be a mapping")
            allowed = {f.name for f in dataclasses.fields(cls)}
            _reject_unknown(section, allowed, (name,), lines, source)
            section = dict(section)
            if name in ("dataset", "train", "sampler") and "seed" not in section:
                section["seed"] = seed
            if name == "train" and "lr" not in section:
                section["lr"] = cfg.train.lr
            if name == "search" and isinstance(section.get("early_stop"), dict):
                _reject_unknown(section["early_stop"], {"window", "min_delta"}, ("search", "early_stop"), lines, source)
                section["early_stop"] = EarlyStop(**section["early_stop"])
            kwargs[name] = cls(**section)
        net = data.get("net") or {}
        _reject_unknown(net, NET_KEYS, ("net",), lines, source)
        kwargs["net"] = {**cfg.net, **net}
        ev = data.get("eval") or {}
        _reject_unknown(ev, _EVAL_KEYS, ("eval",), lines, source)
        kwargs["eval"] = {**cfg.eval, **ev}
        run = RunConfig(**kwargs)
        run.net_config()
    except ConfigError:
        raise
    except (DFMError, TypeError, ValueError) as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    return run


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return parse_config("")
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc}") from exc
    return parse_config(text, str(p))
