"""Line-oriented ``section.key = value`` configuration.

Blank lines and ``#`` comments are ignored.  Unknown keys are rejected, and
every value is re-validated by the module that owns it when the typed
sub-configs are built.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Any, Callable, Dict, Iterable, Mapping, Optional, Tuple

import numpy as np

from codinet.blocks import NetSpec
from codinet.losses import RegularizerConfig
from codinet.router import GumbelConfig
from codinet.training import TrainConfig


class ConfigError(ValueError):
    """Invalid configuration file or override."""


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _ints(text: str) -> Tuple[int, ...]:
    return tuple(int(p) for p in text.split(",") if p.strip())


def _floats(text: str) -> Tuple[float, ...]:
    return tuple(float(p) for p in text.split(",") if p.strip())


def _opt_int(text: str) -> Optional[int]:
    t = text.strip().lower()
    return None if t in ("", "auto", "none") else int(t)


def _fmt(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_fmt(v) for v in value)
    if value is None:
        return "auto"
    return str(value)


# key -> (parser, default)
SCHEMA: Dict[str, Tuple[Callable[[str], Any], Any]] = {
    "net.kind": (str, "conv"),
    "net.depth": (int, 6),
    "net.channels": (int, 16),
    "net.input_shape": (_ints, (1, 16, 16)),
    "net.num_classes": (int, 8),
    "net.downsample": (int, 2),
    "router.hidden_dim": (int, 16),
    "gumbel.temperature": (float, 1.0),
    "gumbel.variant": (str, "reparameterized"),
    "gumbel.inference_noise": (_bool, False),
    "loss.alpha": (float, 0.2),
    "loss.beta": (float, 0.2),
    "loss.gamma": (float, 0.05),
    "loss.m_c": (float, 0.2),
    "loss.m_d": (float, 0.5),
    "loss.cost_unit": (str, "fraction"),
    "train.lr": (float, 0.1),
    "train.milestones": (_ints, (150, 200)),
    "train.lr_decay": (float, 0.1),
    "train.momentum": (float, 0.9),
    "train.weight_decay": (float, 1e-4),
    "train.epochs_stage1": (int, 30),
    "train.epochs_stage2": (_opt_int, None),
    "train.L": (int, 8),
    "train.M": (int, 4),
    "train.seed": (int, 0),
    "train.precision": (str, "float64"),
    "train.prefetch": (int, 0),
    "train.checkpoint_every": (int, 0),
    "data.source": (str, "synthetic"),
    "data.root": (str, ""),
    "data.per_class": (int, 100),
    "data.noise": (float, 0.05),
    "data.val_fraction": (float, 0.2),
    "data.mean": (_floats, (0.1,)),
    "data.std": (_floats, (0.2,)),
    "data.hflip": (_bool, True),
    "data.seed": (int, 0),
}

PRECISIONS = {"float64": np.float64, "float32": np.float32}
SOURCES = ("synthetic", "cifar10")


@dataclass
class Config:
    values: Dict[str, Any]

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    # -- typed views ------------------------------------------------------------------

    @property
    def net(self) -> NetSpec:
        v = self.values
        return NetSpec(
            kind=v["net.kind"],
            depth=v["net.depth"],
            channels=v["net.channels"],
            input_shape=tuple(v["net.input_shape"]),
            num_classes=v["net.num_classes"],
            downsample=v["net.downsample"],
            router_hidden=v["router.hidden_dim"],
        )

    @property
    def gumbel(self) -> GumbelConfig:
        v = self.values
        return GumbelConfig(v["gumbel.temperature"], v["gumbel.variant"], v["gumbel.inference_noise"])

    @property
    def reg(self) -> RegularizerConfig:
        v = self.values
        return RegularizerConfig(v["loss.alpha"], v["loss.beta"], v["loss.gamma"], v["loss.m_c"], v["loss.m_d"])

    @property
    def dtype(self):
        return PRECISIONS[self.values["train.precision"]]

    @property
    def train(self) -> TrainConfig:
        v = self.values
        return TrainConfig(
            epochs_stage1=v["train.epochs_stage1"],
            epochs_stage2=v["train.epochs_stage2"],
            lr=v["train.lr"],
            milestones=tuple(v["train.milestones"]),
            lr_decay=v["train.lr_decay"],
            momentum=v["train.momentum"],
            weight_decay=v["train.weight_decay"],
            L=v["train.L"],
            M=v["train.M"],
            seed=v["train.seed"],
            reg=self.reg,
            cost_unit=v["loss.cost_unit"],
            hflip=v["data.hflip"],
            mean=tuple(v["data.mean"]),
            std=tuple(v["data.std"]),
            prefetch=v["train.prefetch"],
        )

    def with_overrides(self, overrides: Mapping[str, Any]) -> "Config":
        values = dict(self.values)
        for key, value in overrides.items():
            if key not in SCHEMA:
                raise ConfigError(f"unknown config key {key!r}")
            values[key] = SCHEMA[key][0](value) if isinstance(value, str) else value
        cfg = Config(values)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        builders = (
            ("net.", lambda: self.net),
            ("gumbel.", lambda: self.gumbel),
            ("loss.", lambda: self.reg),
            ("train.", lambda: self.train),
        )
        for prefix, build in builders:
            try:
                build()
            except ValueError as exc:
                raise ConfigError(str(exc) if "." in str(exc) else f"{prefix}*: {exc}") from exc
        v = self.values
        if v["train.precision"] not in PRECISIONS:
            raise ConfigError(f"train.precision must be one of {sorted(PRECISIONS)}")
        if v["data.source"] not in SOURCES:
            raise ConfigError(f"data.source must be one of {SOURCES}")
        if not 0.0 <= v["data.val_fraction"] < 1.0:
            raise ConfigError("data.val_fraction must lie in [0, 1)")
        if v["data.per_class"] < 0:
            raise ConfigError("data.per_class must be non-negative")
        if len(v["data.mean"]) != len(v["data.std"]) or any(s <= 0 for s in v["data.std"]):
            raise ConfigError("data.mean and data.std need equal lengths and positive std")
        if v["net.kind"] == "conv" and len(v["data.mean"]) not in (1, v["net.input_shape"][0]):
            raise ConfigError("data.mean must have one entry or one per input channel")
        if v["train.checkpoint_every"] < 0 or v["train.prefetch"] < 0:
            raise ConfigError("train.checkpoint_every and train.prefetch must be non-negative")

    def to_text(self) -> str:
        return "".join(f"{k} = {_fmt(self.values[k])}\n" for k in SCHEMA)


def defaults() -> Config:
    return Config({k: default for k, (_, default) in SCHEMA.items()})


def _parse_lines(lines: Iterable[str], origin: str) -> Dict[str, str]:
    out: Dict[str, str] = {}
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{lineno}: expected 'key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"{origin}:{lineno}: unknown config key {key!r}")
        out[key] = value
    return out


def parse_overrides(items: Iterable[str]) -> Dict[str, str]:
    """``["train.seed=3", ...]`` -> ``{"train.seed": "3"}`` (unknown keys rejected)."""
    return _parse_lines(items, "--set")


def parse_config(path: "Optional[str | os.PathLike]" = None, overrides: Optional[Mapping[str, str]] = None, text: Optional[str] = None) -> Config:
    """Defaults, then the file (or ``text``), then ``overrides``; validated."""
    raw: Dict[str, str] = {}
    if text is not None:
        raw.update(_parse_lines(text.splitlines(), "<text>"))
    elif path is not None:
        if not os.path.exists(path):
            raise ConfigError(f"config file not found: {path}")
        with open(path, encoding="utf-8") as fh:
            raw.update(_parse_lines(fh, str(path)))
    for key, value in (overrides or {}).items():
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        raw[key] = value
    values = {k: default for k, (_, default) in SCHEMA.items()}
    for key, value in raw.items():
        try:
            values[key] = SCHEMA[key][0](value)
        except ValueError as exc:
            raise ConfigError(f"{key}: cannot parse {value!r} ({exc})") from exc
    cfg = Config(values)
    cfg.validate()
    return cfg
