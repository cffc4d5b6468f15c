"""Flat ``key = value`` run configuration.

Blank lines and ``#`` comments are ignored.  Keys and their defaults:

=========================  ===================  ===================================
key                        default              meaning
=========================  ===================  ===================================
manifest                   (required)           dataset manifest path
output_dir                 (required)           directory for outputs
seed                       0                    training / sampling seed
L                          2                    encoder / decoder depth
C                          8                    latent channels
binarizer                  hardtanh             hardtanh|tanh|sigmoid|stochastic|gumbel
tau_initial                1.0                  Gumbel starting temperature
anneal_factor              0.97                 Gumbel per-epoch decay
tau_floor                  0.3                  Gumbel temperature floor
epochs                     50
batch_size                 10
lr                         0.001
lr_halving_period_epochs   5
beta1, beta2               0.9, 0.999
codec                      toy_dct              toy_dct | external
quality                    50                   toy codec quality, or ``auto``
base_bitrate               (none)               bits/s for residual generation when quality=auto
encode_cmd, decode_cmd     (none)               external codec command templates
pix_fmt                    rgb24                external raw format
train_frames               all                  use the first N frames for training
eval_frames                0                    score the last N frames (compare-binarizers, benchmark)
budget_bps                 (none)               total budget for encode
split                      auto                 base share of the budget, or ``auto``
k                          16                   Huffman group size
rate_points                (none)               comma list of total budgets (benchmark)
checkpoints                (none)               comma list, one per rate point (benchmark)
=========================  ===================  ===================================

Paths are resolved relative to the config file.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional

from .autoencoder import AutoencoderConfig, TrainConfig
from .binarizer import BinarizerKind, GumbelConfig
from .codec import ExternalCodec, ToyDCTCodec
from .errors import ConfigError

__all__ = ["RunConfig", "parse_config", "load_config"]

_PATH_KEYS = ("manifest", "output_dir")
_NULL_WORDS = {"quality": "auto", "split": "auto", "train_frames": "all"}


@dataclass
class RunConfig:
    manifest: Optional[Path] = None
    output_dir: Optional[Path] = None
    seed: int = 0
    L: int = 2
    C: int = 8
    binarizer: str = "hardtanh"
    tau_initial: float = 1.0
    anneal_factor: float = 0.97
    tau_floor: float = 0.3
    epochs: int = 50
    batch_size: int = 10
    lr: float = 1e-3
    lr_halving_period_epochs: int = 5
    beta1: float = 0.9
    beta2: float = 0.999
    codec: str = "toy_dct"
    quality: Optional[float] = 50.0
    base_bitrate: Optional[float] = None
    encode_cmd: Optional[str] = None
    decode_cmd: Optional[str] = None
    pix_fmt: str = "rgb24"
    train_frames: Optional[int] = None
    eval_frames: int = 0
    budget_bps: Optional[float] = None
    split: Optional[float] = None
    k: int = 16
    rate_points: List[float] = field(default_factory=list)
    checkpoints: List[Path] = field(default_factory=list)

    def validate(self) -> "RunConfig":
        try:
            BinarizerKind.parse(self.binarizer)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.codec not in ("toy_dct", "external"):
            raise ConfigError(f"codec must be toy_dct or external, got {self.codec!r}")
        if self.codec == "toy_dct" and self.quality is None and self.base_bitrate is None:
            raise ConfigError("quality=auto needs base_bitrate")
        if self.codec == "external" and not (self.encode_cmd and self.decode_cmd):
            raise ConfigError("codec=external needs encode_cmd and decode_cmd")
        if self.codec == "external" and self.base_bitrate is None:
            raise ConfigError("codec=external needs base_bitrate")
        if self.quality is not None and not 0 < self.quality <= 100:
            raise ConfigError(f"quality must be in (0, 100], got {self.quality}")
        if self.split is not None and not 0 < self.split <= 1:
            raise ConfigError(f"split must be in (0, 1], got {self.split}")
        for name in ("L", "C", "epochs", "batch_size", "lr_halving_period_epochs"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        return self

    def autoencoder(self, binarizer: Optional[str] = None) -> AutoencoderConfig:
        return AutoencoderConfig(L=self.L, C=self.C, binarizer=binarizer or self.binarizer,
                                 gumbel=GumbelConfig(self.tau_initial, self.anneal_factor, self.tau_floor))

    def training(self) -> TrainConfig:
        return TrainConfig(lr=self.lr, lr_halving_period_epochs=self.lr_halving_period_epochs,
                           beta1=self.beta1, beta2=self.beta2, batch_size=self.batch_size,
                           epochs=self.epochs, seed=self.seed)

    def base_codec(self, fps: float):
        if self.codec == "toy_dct":
            return ToyDCTCodec(quality=self.quality, fps=fps)
        return ExternalCodec(self.encode_cmd, self.decode_cmd, pix_fmt=self.pix_fmt, fps=fps)

    def dumps(self) -> str:
        """Resolved snapshot; parsing it back yields an equal config."""
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if v is None and f.name in _NULL_WORDS:
                v = _NULL_WORDS[f.name]
            elif v is None or v == []:
                continue
            if isinstance(v, list):
                v = ",".join(str(p) for p in v)
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"


def _convert(key: str, value: str, base: Path):
    ftypes = {f.name: f.type for f in fields(RunConfig)}
    if key not in ftypes:
        raise ConfigError(f"unknown config key {key!r}")
    if key in _PATH_KEYS:
        return (base / value).resolve()
    if key == "checkpoints":
        return [(base / p.strip()).resolve() for p in value.split(",") if p.strip()]
    if key == "rate_points":
        try:
            return [float(p) for p in value.split(",") if p.strip()]
        except ValueError:
            raise ConfigError(f"rate_points: not a list of numbers: {value!r}") from None
    if key in _NULL_WORDS and value.lower() in ("auto", "all", "none"):
        return None
    t = ftypes[key]
    try:
        if "int" in t and "float" not in t:
            return int(value)
        if "float" in t:
            return float(value)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {value!r}") from None
    return value


def parse_config(text: str, base: Path = Path("."), overrides: Optional[Dict[str, str]] = None) -> RunConfig:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key] = _convert(key, value, base)
    for key, value in (overrides or {}).items():
        values[key] = _convert(key, value, Path.cwd())
    return RunConfig(**values).validate()


def load_config(path, overrides: Optional[Dict[str, str]] = None) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text(), path.parent.resolve(), overrides)
