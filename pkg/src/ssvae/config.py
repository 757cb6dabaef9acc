"""Run configuration: a flat dataclass stored as ``key = value`` text.

Lines starting with ``#`` are comments.  Values are parsed according to the
field's type; ``none`` clears an optional field.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Mapping

from .data import SynthSpec
from .estimators import EstimatorConfig
from .model import DECODER_KINDS, ModelConfig


class ConfigError(ValueError):
    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


@dataclass
class RunConfig:
    # data: a corpus file, or the synthetic recipe when data_path is none
    data_path: str | None = None
    test_path: str | None = None
    synth: bool = True
    synth_classes: int = 2
    synth_keywords: int = 40
    synth_background: int = 120
    synth_styles: int = 4
    synth_min_len: int = 8
    synth_max_len: int = 16
    synth_signal: float = 0.15
    synth_size: int = 5000
    synth_test_size: int = 1000
    labeled_per_class: int | None = 50
    valid_fraction: float = 0.20
    test_fraction: float = 0.0
    max_len: int = 60
    vocab_size: int = 2000
    min_freq: int = 1
    # model (desk profile; the large reference profile is 512 / 300 / 50)
    mode: str = "ssvae"  # ssvae | supervised
    cell: str = "clstm2"
    emb_dim: int = 32
    hidden: int = 64
    latent: int = 16
    dropout: float = 0.0
    # estimator
    estimator: str = "enumerate"
    baseline: str = "none"
    K: int | None = None
    # schedules: linear from start to end over the first `ramp` fraction of epochs
    kl_start: float = 0.0
    kl_end: float = 1.0
    kl_ramp: float = 0.5
    wd_start: float = 0.25
    wd_end: float = 0.5
    wd_ramp: float = 0.5
    alpha_start: float = 1.0
    alpha_end: float = 2.0
    alpha_ramp: float = 0.5
    # optimizer
    lr: float = 4e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 5.0
    # loop
    epochs: int = 20
    batch_size: int = 50
    patience: int = 10
    bucketing: bool = True
    seed: int = 0
    output_dir: str | None = None
    checkpoint_every_epoch: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.mode not in ("ssvae", "supervised"):
            raise ConfigError("mode", f"expected ssvae or supervised, got {self.mode!r}")
        if self.cell not in DECODER_KINDS:
            raise ConfigError("cell", f"expected one of {DECODER_KINDS}, got {self.cell!r}")
        try:
            self.estimator_config()
        except ValueError as e:
            raise ConfigError("estimator", str(e)) from None
        for name in ("epochs", "batch_size", "emb_dim", "hidden", "latent"):
            if getattr(self, name) < 1:
                raise ConfigError(name, "must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout", "must be in [0, 1)")
        if not 0.0 <= self.kl_end <= 1.0 or not 0.0 <= self.kl_start <= 1.0:
            raise ConfigError("kl_end", "KL weights must be in [0, 1]")
        if not self.synth and self.data_path is None:
            raise ConfigError("data_path", "required when synth = false")

    def estimator_config(self) -> EstimatorConfig:
        return EstimatorConfig(self.estimator, self.baseline, self.K)

    def model_config(self, vocab_size: int, n_classes: int) -> ModelConfig:
        return ModelConfig(vocab_size, n_classes, self.emb_dim, self.hidden, self.latent, self.cell, self.dropout)

    def synth_spec(self, test: bool = False) -> SynthSpec:
        return SynthSpec(
            n_classes=self.synth_classes,
            keywords_per_class=self.synth_keywords,
            n_background=self.synth_background,
            n_styles=self.synth_styles,
            length_range=(self.synth_min_len, self.synth_max_len),
            signal=self.synth_signal,
            size=self.synth_test_size if test else self.synth_size,
            seed=self.seed * 2 + 1 if test else self.seed * 2,
        )

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    # -- text form -------------------------------------------------------------

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name} = {'none' if v is None else _fmt(v)}")
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def from_mapping(cls, values: Mapping[str, Any], base: "RunConfig | None" = None) -> "RunConfig":
        known = {f.name: f for f in fields(cls)}
        current = dataclasses.asdict(base) if base is not None else {}
        for key, raw in values.items():
            if key not in known:
                raise ConfigError(key, "unknown configuration key")
            current[key] = _parse(known[key], raw) if isinstance(raw, str) else raw
        return cls(**current)

    @classmethod
    def parse_text(cls, text: str, base: "RunConfig | None" = None) -> "RunConfig":
        values = {}
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, val = line.partition("=")
            if not sep:
                raise ConfigError(f"line {lineno}", "expected key = value")
            values[key.strip()] = val.strip()
        return cls.from_mapping(values, base)

    @classmethod
    def load(cls, path, base: "RunConfig | None" = None) -> "RunConfig":
        return cls.parse_text(Path(path).read_text(), base)


PROFILES = {
    "desk": {},
    "paper": {"hidden": 512, "emb_dim": 300, "latent": 50},
}


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def _parse(f: dataclasses.Field, raw: str):
    t = str(f.type)
    s = raw.strip()
    if s.lower() == "none" and "None" in t:
        return None
    try:
        if t.startswith("bool"):
            if s.lower() in ("true", "1", "yes"):
                return True
            if s.lower() in ("false", "0", "no"):
                return False
            raise ValueError(s)
        if t.startswith("int"):
            return int(s)
        if t.startswith("float"):
            return float(s)
    except ValueError:
        raise ConfigError(f.name, f"cannot parse {s!r} as {t}") from None
    return s
