"""Typed configuration for the generator, the model, and the trainer.

Configs load from one flat JSON file with three sections::

    {"generator": {...}, "model": {...}, "train": {...}}

Every key must name a known field; unknown keys abort before any work
starts.  Command-line overrides address keys as ``section.field``.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field

from .errors import ValidationError

RNN_VARIANTS = ("fusion", "elman", "gru", "lstm", "none-ffn")


@dataclass
class GeneratorConfig:
    """Synthetic trip generator knobs; defaults give the full-size dataset."""

    num_links: int = 2000
    num_drivers: int = 200
    weeks: int = 20
    trips_per_day: int = 430
    seed: int = 20240101
    start_ts: int = 1704067200  # 2024-01-01 00:00, a Monday
    tz_offset_s: int = 0
    min_links: int = 5
    max_links: int = 60
    # per-link latent distributions
    free_speed_log_mu: float = math.log(12.0)
    free_speed_log_sigma: float = 0.35
    speed_clip_low_mps: float = 3.0
    speed_clip_high_mps: float = 33.0
    length_log_mu: float = math.log(150.0)
    length_log_sigma: float = 0.6
    length_clip_low_m: float = 30.0
    length_clip_high_m: float = 2000.0
    delay_mean_s: float = 8.0
    delay_cap_s: float = 60.0
    # time-of-day congestion profile: two gaussian rush-hour dips
    morning_peak_s: int = 30600  # 08:30
    evening_peak_s: int = 64800  # 18:00
    rush_depth: float = 0.45
    rush_width_s: float = 4500.0
    congestion_floor: float = 0.3
    # noise scales
    driver_sigma: float = 0.1
    trip_noise_sigma: float = 0.05
    obs_noise_sigma: float = 0.1

    def __post_init__(self):
        if self.num_links < 1 or self.num_drivers < 1:
            raise ValidationError("num_links and num_drivers must be >= 1")
        if self.weeks < 1 or self.trips_per_day < 1:
            raise ValidationError("weeks and trips_per_day must be >= 1")
        if not 1 <= self.min_links <= self.max_links:
            raise ValidationError(f"need 1 <= min_links <= max_links, got [{self.min_links}, {self.max_links}]")
        for name in ("free_speed_log_sigma", "length_log_sigma", "delay_mean_s", "delay_cap_s",
                     "rush_width_s", "driver_sigma", "trip_noise_sigma", "obs_noise_sigma"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be >= 0")
        if not 0 <= self.rush_depth <= 1:
            raise ValidationError("rush_depth must lie in [0, 1]")
        if not 0 < self.congestion_floor <= 1:
            raise ValidationError("congestion_floor must lie in (0, 1]")
        if self.speed_clip_low_mps <= 0 or self.speed_clip_high_mps < self.speed_clip_low_mps:
            raise ValidationError("speed clip range must be positive and ordered")
        if self.length_clip_low_m <= 0 or self.length_clip_high_m < self.length_clip_low_m:
            raise ValidationError("length clip range must be positive and ordered")


@dataclass
class EtaModelConfig:
    """Architecture of the trip-time regressor."""

    num_links: int = 2000
    num_drivers: int = 200
    link_embed_dim: int = 20
    driver_embed_dim: int = 8
    timeslice_embed_dim: int = 8
    weekday_embed_dim: int = 4
    mlp_hidden_sizes: list[int] = field(default_factory=lambda: [64, 64])
    rnn_variant: str = "fusion"
    rnn_hidden: int = 128
    regressor_hidden: int = 128
    r: int = 2
    output_scale: float = 1.0

    def __post_init__(self):
        dims = (self.num_links, self.num_drivers, self.link_embed_dim, self.driver_embed_dim,
                self.timeslice_embed_dim, self.weekday_embed_dim, self.rnn_hidden,
                self.regressor_hidden)
        if any(d < 1 for d in dims):
            raise ValidationError("all cardinalities and embedding/hidden dims must be >= 1")
        if not self.mlp_hidden_sizes or any(int(s) < 1 for s in self.mlp_hidden_sizes):
            raise ValidationError("mlp_hidden_sizes must be a non-empty list of sizes >= 1")
        self.mlp_hidden_sizes = [int(s) for s in self.mlp_hidden_sizes]
        if self.rnn_variant not in RNN_VARIANTS:
            raise ValidationError(f"rnn_variant {self.rnn_variant!r} not in {RNN_VARIANTS}")
        if not 0 <= self.r <= 16:
            raise ValidationError(f"r={self.r} outside [0, 16]")
        if self.output_scale <= 0:
            raise ValidationError("output_scale must be > 0")


@dataclass
class TrainConfig:
    max_steps: int = 20000
    batch_size: int = 256
    eval_every: int = 200
    seed: int = 7
    patience: int = 10
    lr: float = 0.0002
    grad_clip_norm: float = 5.0  # 0 disables clipping
    r: int = -1  # >= 0 overrides the model's fusion round count (sweeps)
    deterministic_timing: bool = True

    def __post_init__(self):
        if self.max_steps < 1 or self.batch_size < 1 or self.eval_every < 1 or self.patience < 1:
            raise ValidationError("max_steps, batch_size, eval_every, patience must be >= 1")
        if self.lr <= 0:
            raise ValidationError("lr must be > 0")
        if self.grad_clip_norm < 0:
            raise ValidationError("grad_clip_norm must be >= 0 (0 disables)")


@dataclass
class CliConfig:
    generator: GeneratorConfig
    model: EtaModelConfig
    train: TrainConfig


_SECTIONS = {"generator": GeneratorConfig, "model": EtaModelConfig, "train": TrainConfig}


def section_from_dict(cls, data: dict, section: str):
    """Build one config dataclass, rejecting unknown keys."""
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ValidationError(f"unknown {section} config keys: {', '.join(unknown)}")
    return cls(**data)


def config_from_dict(raw: dict) -> CliConfig:
    unknown = sorted(set(raw) - set(_SECTIONS))
    if unknown:
        raise ValidationError(f"unknown config sections: {', '.join(unknown)} "
                              f"(expected {sorted(_SECTIONS)})")
    parts = {}
    for name, cls in _SECTIONS.items():
        sect = raw.get(name, {})
        if not isinstance(sect, dict):
            raise ValidationError(f"config section {name!r} must be an object")
        parts[name] = section_from_dict(cls, sect, name)
    return CliConfig(**parts)


def load_config(path: str) -> CliConfig:
    with open(path, encoding="utf-8") as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ValidationError("config file must hold a JSON object")
    return config_from_dict(raw)


def apply_overrides(raw: dict, overrides: list[str]) -> dict:
    """Apply ``section.field=value`` strings onto a raw config dict.

    Values parse as JSON when possible, else stay strings.
    """
    out = {k: dict(v) for k, v in raw.items() if isinstance(v, dict)}
    for item in overrides:
        if "=" not in item:
            raise ValidationError(f"override {item!r} is not of the form section.field=value")
        key, value = item.split("=", 1)
        if "." not in key:
            raise ValidationError(f"override key {key!r} must be section.field")
        section, fieldname = key.split(".", 1)
        if section not in _SECTIONS:
            raise ValidationError(f"override section {section!r} not in {sorted(_SECTIONS)}")
        try:
            parsed = json.loads(value)
        except json.JSONDecodeError:
            parsed = value
        out.setdefault(section, {})[fieldname] = parsed
    return out


def config_to_dict(cfg: CliConfig) -> dict:
    return {"generator": dataclasses.asdict(cfg.generator),
            "model": dataclasses.asdict(cfg.model),
            "train": dataclasses.asdict(cfg.train)}
