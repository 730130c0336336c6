"""Configuration dataclasses: encoder presets, training hyperparameters, TOML loading."""

from __future__ import annotations

import dataclasses
import sys
from dataclasses import dataclass, field

from .errors import ConfigError

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


@dataclass
class EncoderSpec:
    """Describes a backbone: either the small conv family or a ConvNeXt variant.

    ``channels`` is the final feature-map channel count C, ``stride`` the total
    downsampling factor. For the conv family the stage lists define the layers;
    ConvNeXt variants are built from torchvision and ignore the stage lists.
    """

    name: str = "tiny"
    channels: int = 64
    stride: int = 32
    in_channels: int = 1
    stage_channels: tuple[int, ...] = (16, 32, 64, 64)
    stage_strides: tuple[int, ...] = (4, 2, 2, 2)
    pretrained_path: str | None = None

    def validate(self) -> None:
        if self.name.startswith("convnext"):
            return
        if len(self.stage_channels) != len(self.stage_strides):
            raise ConfigError("stage_channels and stage_strides must have equal length")
        prod = 1
        for s in self.stage_strides:
            prod *= s
        if prod != self.stride:
            raise ConfigError(f"stage strides multiply to {prod}, spec says stride {self.stride}")
        if self.stage_channels[-1] != self.channels:
            raise ConfigError("last stage width must equal the declared channel count")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderSpec":
        d = dict(d)
        d["stage_channels"] = tuple(d.get("stage_channels", ()))
        d["stage_strides"] = tuple(d.get("stage_strides", ()))
        return cls(**d)


_ENCODER_PRESETS = {
    # 4 conv stages, CPU-friendly; 256x256 in -> 64x8x8 out
    "tiny": dict(channels=64, stride=32, in_channels=1,
                 stage_channels=(16, 32, 64, 64), stage_strides=(4, 2, 2, 2)),
    # single stage, used by gradient checks; 16x16 in -> 8x8x8 out
    "micro": dict(channels=8, stride=2, in_channels=1,
                  stage_channels=(8,), stage_strides=(2,)),
    "convnext_tiny": dict(channels=768, stride=32, in_channels=3,
                          stage_channels=(), stage_strides=()),
    "convnext_small": dict(channels=768, stride=32, in_channels=3,
                           stage_channels=(), stage_strides=()),
    "convnext_base": dict(channels=1024, stride=32, in_channels=3,
                          stage_channels=(), stage_strides=()),
}


def encoder_spec(name: str, pretrained_path: str | None = None) -> EncoderSpec:
    """Look up a named encoder preset."""
    if name not in _ENCODER_PRESETS:
        raise ConfigError(f"unknown encoder preset {name!r}; options: {sorted(_ENCODER_PRESETS)}")
    return EncoderSpec(name=name, pretrained_path=pretrained_path, **_ENCODER_PRESETS[name])


@dataclass
class AugmentConfig:
    enabled: bool = True
    pad_fraction: float = 0.125
    flip_prob: float = 0.5


@dataclass
class TrainConfig:
    """Full training hyperparameter record; serializes into checkpoints and TOML.

    Defaults follow the full-scale recipe (340 epochs, SGD warmup + step decay,
    ConvNeXt backbone). ``desk_config`` gives a CPU-scale variant used by the
    test suite and the synthetic experiments.
    """

    epochs: int = 340
    batch_size: int = 8
    lr_backbone: float = 0.0015
    lr_head: float = 0.005
    warmup_epochs: int = 80
    decay_epochs: tuple[int, ...] = (180, 240)
    decay_factor: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 0.0005
    alpha: float = 5.0
    margin: float = 0.3
    input_size: int = 256
    scales: tuple[float, float] = (0.5, 1.0)
    mfi_enabled: bool = True
    mrc_enabled: bool = True
    kl_enabled: bool = True
    triplet_enabled: bool = True
    seed: int = 0

    encoder: str = "convnext_tiny"
    pretrained_path: str | None = None
    embed_dim: int = 512
    dropout: float = 0.5
    cbam_reduction: int = 16
    mining: str = "hard"  # "hard" | "all"
    holdout_fraction: float = 0.30
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    deterministic: bool = False
    checkpoint_every: int = 10

    def validate(self) -> None:
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if not 0.0 < self.holdout_fraction < 1.0:
            raise ConfigError("holdout_fraction must lie in (0, 1)")
        if any(d <= 0 or d >= self.epochs for d in self.decay_epochs):
            raise ConfigError("decay epochs must lie strictly inside (0, epochs)")
        if list(self.decay_epochs) != sorted(set(self.decay_epochs)):
            raise ConfigError("decay epochs must be strictly increasing")
        if self.decay_epochs and self.warmup_epochs >= self.decay_epochs[0]:
            raise ConfigError("warmup must end before the first decay epoch")
        if self.warmup_epochs < 0:
            raise ConfigError("warmup_epochs must be >= 0")
        scales = tuple(self.scales)
        if len(scales) != 2 or len(set(scales)) != 2 or any(s <= 0 for s in scales):
            raise ConfigError("scales must be two distinct positive factors")
        for s in scales:
            sz = self.input_size * s
            if abs(sz - round(sz)) > 1e-9:
                raise ConfigError(f"input_size {self.input_size} * scale {s} is not an integer")
        if self.input_size % 2 != 0:
            raise ConfigError("input_size must be even")
        if self.mining not in ("hard", "all"):
            raise ConfigError("mining must be 'hard' or 'all'")
        if not self.mrc_enabled and not self.triplet_enabled:
            raise ConfigError("with mrc_enabled=false the triplet loss is the only "
                              "objective left and must stay enabled")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        encoder_spec(self.encoder)  # raises on unknown preset

    def sorted_scales(self) -> tuple[float, float]:
        return tuple(sorted(float(s) for s in self.scales))  # type: ignore[return-value]

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["decay_epochs"] = list(self.decay_epochs)
        d["scales"] = list(self.scales)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "decay_epochs" in d:
            d["decay_epochs"] = tuple(int(e) for e in d["decay_epochs"])
        if "scales" in d:
            d["scales"] = tuple(float(s) for s in d["scales"])
        if "augment" in d and isinstance(d["augment"], dict):
            d["augment"] = AugmentConfig(**d["augment"])
        cfg = cls(**d)
        cfg.validate()
        return cfg


def desk_config(**overrides) -> TrainConfig:
    """CPU-scale config: tiny backbone, 30 epochs, warmup 5, decays at 15/25."""
    base = dict(
        encoder="tiny",
        epochs=30,
        warmup_epochs=5,
        decay_epochs=(15, 25),
        input_size=128,
        lr_backbone=0.01,
        lr_head=0.02,
        dropout=0.2,
    )
    base.update(overrides)
    cfg = TrainConfig(**base)
    cfg.validate()
    return cfg


def load_config(path: str, overrides: dict | None = None) -> TrainConfig:
    """Read a TOML config whose keys mirror TrainConfig field names; overrides win."""
    with open(path, "rb") as f:
        try:
            raw = tomllib.load(f)
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"cannot parse {path}: {e}") from e
    preset = raw.pop("preset", None)
    if overrides:
        raw.update(overrides)
    if preset == "desk":
        merged = desk_config().to_dict()
        merged.update(raw)
        raw = merged
    return TrainConfig.from_dict(raw)


def parse_override(text: str) -> tuple[str, object]:
    """Parse a KEY=VALUE command-line override, inferring the value type via TOML."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not KEY=VALUE")
    key, value = text.split("=", 1)
    try:
        parsed = tomllib.loads(f"v = {value}")["v"]
    except tomllib.TOMLDecodeError:
        parsed = value  # bare string
    return key.strip(), parsed
