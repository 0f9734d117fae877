"""Experiment configuration files.

Plain ``key = value`` text in four sections::

    [data]     synthetic domains, representation, split
    [model]    network options
    [trainer]  schedule and optimizer settings
    [method]   method name, seeds, optional mcc / sdat overrides

Unknown sections or keys are rejected.
"""
from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .data import REPRESENTATIONS, SynthDomainSpec
from .experiment import METHODS, method_config
from .trainer import ConfigError, TrainerConfig


@dataclass
class DataSection:
    task: str = "synth"
    fundamentals: tuple[float, ...] = (21.0, 34.0, 47.0, 61.0, 76.0)
    # one row per class separated by "|", or a single row shared by every class
    harmonic_weights: tuple[tuple[float, ...], ...] = ((1.0, 0.5, 0.25),)
    length: int = 1024
    sample_rate: float = 1024.0
    n_per_class: int = 200
    representation: str = "time"
    train_fraction: float = 0.8
    data_seed: int = 0
    source_speed_factor: float = 1.0
    target_speed_factor: float = 1.4
    source_amplitude_factor: float = 1.0
    target_amplitude_factor: float = 1.0
    source_noise_sigma: float = 0.5
    target_noise_sigma: float = 0.5
    data_dir: str = ""

    def domain(self, which: str) -> SynthDomainSpec:
        return SynthDomainSpec(
            fundamentals=tuple(self.fundamentals),
            harmonic_weights=self.class_weights(),
            speed_factor=getattr(self, f"{which}_speed_factor"),
            amplitude_factor=getattr(self, f"{which}_amplitude_factor"),
            noise_sigma=getattr(self, f"{which}_noise_sigma"),
            length=self.length,
            sample_rate=self.sample_rate,
            domain_id=0 if which == "source" else 1,
        )

    def class_weights(self) -> tuple[tuple[float, ...], ...]:
        rows = tuple(tuple(r) for r in self.harmonic_weights)
        return rows * len(self.fundamentals) if len(rows) == 1 else rows


@dataclass
class ModelSection:
    dropout: float = 0.5


@dataclass
class TrainerSection:
    total_epochs: int = 300
    batch_size: int = 64
    t_da: int = 50
    t_pl: int = 50
    t_cal: int = 150
    tau: float = 0.9
    ema_alpha: float = 0.999
    base_lr: float = 1e-3
    lr_drop_epochs: tuple[int, ...] = (150, 250)
    lr_drop_factor: float = 10.0
    weight_decay: float = 1e-5
    mcc_temperature: float = 2.5
    sam_rho: float = 0.05
    n_bins: int = 10
    checkpoint_every: int = 0


@dataclass
class MethodSection:
    name: str = "cat-tempscaling"
    seeds: tuple[int, ...] = (0,)
    mcc: bool | None = None
    sdat: bool | None = None


@dataclass
class ExperimentConfig:
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    trainer: TrainerSection = field(default_factory=TrainerSection)
    method: MethodSection = field(default_factory=MethodSection)

    def trainer_config(self, seed: int) -> TrainerConfig:
        t = dataclasses.asdict(self.trainer)
        base = TrainerConfig(**t, dropout=self.model.dropout, seed=seed, calibrator_kind="identity")
        return method_config(self.method.name, base, self.method.mcc, self.method.sdat)

    def validate(self):
        d = self.data
        if d.representation not in REPRESENTATIONS:
            raise ConfigError(f"data.representation must be one of {REPRESENTATIONS}")
        if not 0.0 < d.train_fraction < 1.0:
            raise ConfigError("data.train_fraction must lie in (0, 1)")
        if len(d.harmonic_weights) not in (1, len(d.fundamentals)):
            raise ConfigError(f"data.harmonic_weights needs 1 or {len(d.fundamentals)} rows, "
                              f"got {len(d.harmonic_weights)}")
        if d.n_per_class < 2:
            raise ConfigError("data.n_per_class must be >= 2")
        if self.method.name not in METHODS:
            raise ConfigError(f"method.name must be one of {', '.join(METHODS)}")
        if not self.method.seeds:
            raise ConfigError("method.seeds must list at least one seed")
        for s in self.method.seeds:
            self.trainer_config(s)


SECTIONS = {"data": DataSection, "model": ModelSection, "trainer": TrainerSection, "method": MethodSection}


def _parse_value(raw: str, annotation: str, key: str):
    raw = raw.strip()
    try:
        if annotation.startswith("tuple[tuple[float"):
            rows = tuple(tuple(float(x) for x in row.split(",") if x.strip()) for row in raw.split("|"))
            if not rows or any(not r for r in rows):
                raise ValueError(raw)
            return rows
        if annotation.startswith("tuple[int"):
            return tuple(int(x) for x in raw.split(",") if x.strip())
        if annotation.startswith("tuple[float"):
            return tuple(float(x) for x in raw.split(",") if x.strip())
        if annotation.startswith("bool"):
            if raw == "" and "None" in annotation:
                return None
            low = raw.lower()
            if low in ("true", "yes", "on", "1"):
                return True
            if low in ("false", "no", "off", "0"):
                return False
            raise ValueError(raw)
        if annotation == "int":
            return int(raw)
        if annotation == "float":
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r} (expected {annotation})") from None


def _format_value(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple) and value and isinstance(value[0], tuple):
        return " | ".join(_format_value(row) for row in value)
    if isinstance(value, tuple):
        return ", ".join(repr(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_config(text: str) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    unknown = set(parser.sections()) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(sorted(unknown))}")
    parts = {}
    for name, cls in SECTIONS.items():
        fields = {f.name: f for f in dataclasses.fields(cls)}
        values = {}
        if parser.has_section(name):
            for key, raw in parser.items(name):
                if key not in fields:
                    raise ConfigError(f"unknown key {name}.{key}")
                values[key] = _parse_value(raw, str(fields[key].type), f"{name}.{key}")
        parts[name] = cls(**values)
    cfg = ExperimentConfig(**parts)
    cfg.validate()
    return cfg


def load_config(path) -> ExperimentConfig:
    return parse_config(Path(path).read_text())


def serialize_config(cfg: ExperimentConfig) -> str:
    lines = []
    for name in SECTIONS:
        lines.append(f"[{name}]")
        for key, value in dataclasses.asdict(getattr(cfg, name)).items():
            lines.append(f"{key} = {_format_value(value)}".rstrip())
        lines.append("")
    return "\n".join(lines)
