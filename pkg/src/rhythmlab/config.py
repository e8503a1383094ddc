"""Dataclass configs.  Every experiment is one JSON document merging these sections."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    pass


@dataclass
class SynthSpec:
    n_styles: int = 4
    frame_rate: float = 21.5
    latent_channels: int = 16
    vocal_gain: float = 1.0
    style_gain: float = 0.5
    instr_gain: float = 0.3
    noise_sigma: float = 0.05
    seed: int = 0
    n_songs: int = 200
    min_seconds: float = 30.0
    max_seconds: float = 120.0

    def __post_init__(self):
        if min(self.vocal_gain, self.style_gain, self.instr_gain) < 0:
            raise ConfigError("synth gains must be >= 0")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")
        if self.n_styles < 1 or self.latent_channels < 1 or self.n_songs < 0:
            raise ConfigError("n_styles and latent_channels must be >= 1, n_songs >= 0")
        if not 0 < self.min_seconds <= self.max_seconds:
            raise ConfigError("need 0 < min_seconds <= max_seconds")
        if self.frame_rate <= 0:
            raise ConfigError("frame_rate must be positive")


@dataclass
class NetConfig:
    latent_channels: int = 16
    model_width: int = 64
    n_layers: int = 2
    n_heads: int = 4
    phoneme_embed_dim: int = 32
    style_hidden_dim: int = 32
    max_frames: int = 256
    vocab_size: int = 40
    mlp_ratio: int = 4

    def __post_init__(self):
        dims = (self.latent_channels, self.model_width, self.n_layers, self.n_heads,
                self.phoneme_embed_dim, self.style_hidden_dim, self.max_frames, self.vocab_size, self.mlp_ratio)
        if min(dims) <= 0:
            raise ConfigError("all network dimensions must be positive")
        if self.model_width % self.n_heads:
            raise ConfigError(f"model_width {self.model_width} not divisible by n_heads {self.n_heads}")
        if self.model_width % 2:
            raise ConfigError("model_width must be even for the sinusoidal timestep embedding")

    @property
    def input_width(self) -> int:
        return self.latent_channels + self.phoneme_embed_dim + self.model_width


@dataclass
class TrainConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 0.01
    eps: float = 1e-8
    batch_size: int = 8
    n_steps: int = 20000
    warmup_frac: float = 0.05
    final_lr_frac: float = 0.1
    ema_decay: float = 0.99
    ema_every: int = 100
    cond_dropout: float = 0.2
    L_max: int = 256
    # curriculum: first stage trains on short windows
    stage1_L_max: int = 64
    stage1_frac: float = 0.5
    prompt_len: int = 22
    t_m: float = 0.0
    t_s: float = 1.0
    uniform_t: bool = False
    ablate_align: bool = False
    dtype: str = "float32"
    check_finite: bool = False
    checkpoint_every: int = 2000
    log_every: int = 100
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.cond_dropout < 1:
            raise ConfigError("cond_dropout must be in [0, 1)")
        if not 0 < self.ema_decay < 1:
            raise ConfigError("ema_decay must be in (0, 1)")
        if self.ema_every < 1 or self.batch_size < 1 or self.n_steps < 0:
            raise ConfigError("ema_every and batch_size must be >= 1, n_steps >= 0")
        if self.weight_decay < 0 or self.lr <= 0:
            raise ConfigError("lr must be positive and weight_decay non-negative")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")
        if self.t_s <= 0:
            raise ConfigError("t_s must be positive")
        if not 0 <= self.stage1_frac <= 1 or not 0 <= self.warmup_frac < 1:
            raise ConfigError("stage1_frac in [0, 1], warmup_frac in [0, 1)")


@dataclass
class SampleConfig:
    n_steps: int = 32
    cfg_scale: float = 4.0
    seed: int = 0
    use_ema: bool = True

    def __post_init__(self):
        if self.n_steps < 1:
            raise ConfigError("n_steps must be >= 1")
        if self.cfg_scale < 0:
            raise ConfigError("cfg_scale must be >= 0")


@dataclass
class ExperimentConfig:
    synth: SynthSpec = field(default_factory=SynthSpec)
    net: NetConfig = field(default_factory=NetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sample: SampleConfig = field(default_factory=SampleConfig)
    paths: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.net.latent_channels != self.synth.latent_channels:
            raise ConfigError("net.latent_channels must equal synth.latent_channels")
        if self.train.L_max > self.net.max_frames:
            raise ConfigError("train.L_max exceeds net.max_frames")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, obj: dict[str, Any]) -> ExperimentConfig:
        return _build(cls, obj, "config")

    @classmethod
    def load(cls, path: str | Path) -> ExperimentConfig:
        try:
            obj = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_dict(obj)


def _build(cls, obj, where: str):
    if not isinstance(obj, dict):
        raise ConfigError(f"{where}: expected an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(obj) - set(fields))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {unknown}")
    kwargs = {}
    for name, value in obj.items():
        ftype = fields[name].type
        sub = _SECTIONS.get(ftype) if isinstance(ftype, str) else None
        if sub is not None:
            kwargs[name] = _build(sub, value, f"{where}.{name}")
        else:
            kwargs[name] = _check_scalar(fields[name], value, f"{where}.{name}")
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _check_scalar(f: dataclasses.Field, value, where: str):
    kind = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", "")
    if kind == "bool" and not isinstance(value, bool):
        raise ConfigError(f"{where}: expected a boolean, got {value!r}")
    if kind == "int" and (isinstance(value, bool) or not isinstance(value, int)):
        raise ConfigError(f"{where}: expected an integer, got {value!r}")
    if kind == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if kind == "str" and not isinstance(value, str):
        raise ConfigError(f"{where}: expected a string, got {value!r}")
    return value


_SECTIONS = {
    "SynthSpec": SynthSpec,
    "NetConfig": NetConfig,
    "TrainConfig": TrainConfig,
    "SampleConfig": SampleConfig,
}
