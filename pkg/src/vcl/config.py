"""Flat ``key=value`` run configuration for the ``train`` subcommand."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

from . import kv
from .data import AugmentConfig, SplitSpec
from .models import CnnConfig, ViTConfig
from .training import TrainConfig

DEFAULT_LR = {"vit": 1e-4, "cnn": 1e-5}
SMOTE_MODES = ("off", "before_split", "train_only")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    model: str = "vit"
    data_root: str = "data"
    out_dir: str = "out"
    seed: int = 0
    image_hw: tuple = (128, 128)
    channels: int = 0  # 0: take from the dataset
    num_classes: int = 0  # 0: take from the dataset
    # ViT
    patch_size: int = 64
    embed_dim: int = 64
    num_layers: int = 8
    num_heads: int = 4
    mlp_head_units: tuple = (2048, 1024)
    transformer_dropout: float = 0.1
    # CNN
    conv_blocks: tuple = ((16, 3, 1), (32, 3, 2), (32, 3, 2))
    residual: bool = True
    head_units: tuple = (1024, 512)
    head_dropout: float = 0.5
    # optimisation; learning_rate <= 0 means the per-model default
    learning_rate: float = 0.0
    epochs: int = 400
    batch_size: int = 256
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-7
    repetitions: int = 5
    average: str = "macro"
    freeze_backbone: bool = False
    # preprocessing
    augment: bool = True
    flip_prob: float = 0.5
    rotation_factor: float = 0.01
    zoom_factor: float = 0.05
    smote: str = "before_split"
    smote_k: int = 5
    train_frac: float = 0.8
    val_frac: float = 0.1
    test_frac: float = 0.1

    def __post_init__(self):
        if self.model not in DEFAULT_LR:
            raise ConfigError(f"model must be 'vit' or 'cnn', got {self.model!r}")
        if self.smote not in SMOTE_MODES:
            raise ConfigError(f"smote must be one of {', '.join(SMOTE_MODES)}, got {self.smote!r}")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")

    def resolved(self) -> "RunConfig":
        if self.learning_rate > 0:
            return self
        return dataclasses.replace(self, learning_rate=DEFAULT_LR[self.model])

    def model_config(self, channels: int, num_classes: int):
        if self.model == "vit":
            return ViTConfig(
                image_hw=self.image_hw,
                channels=channels,
                patch_size=self.patch_size,
                embed_dim=self.embed_dim,
                num_layers=self.num_layers,
                num_heads=self.num_heads,
                mlp_head_units=self.mlp_head_units,
                transformer_dropout=self.transformer_dropout,
                head_dropout=self.head_dropout,
                num_classes=num_classes,
            )
        return CnnConfig(
            image_hw=self.image_hw,
            channels=channels,
            conv_blocks=self.conv_blocks,
            residual=self.residual,
            head_units=self.head_units,
            head_dropout=self.head_dropout,
            num_classes=num_classes,
        )

    def train_config(self) -> TrainConfig:
        r = self.resolved()
        return TrainConfig(
            learning_rate=r.learning_rate,
            epochs=r.epochs,
            batch_size=r.batch_size,
            adam_beta1=r.adam_beta1,
            adam_beta2=r.adam_beta2,
            adam_eps=r.adam_eps,
            repetitions=r.repetitions,
            seed=r.seed,
            average=r.average,
            freeze_backbone=r.freeze_backbone,
        )

    def augment_config(self):
        if not self.augment:
            return None
        return AugmentConfig(self.flip_prob, self.rotation_factor, self.zoom_factor, self.image_hw, self.seed)

    def split_spec(self) -> SplitSpec:
        return SplitSpec(self.train_frac, self.val_frac, self.test_frac, self.seed)

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in kv.to_dict(self).items())


def parse_run_config(text: str, **overrides) -> RunConfig:
    """Parse config text; ``#`` starts a comment, blank lines are ignored.

    Unknown or repeated keys and unparsable values raise ``ConfigError``
    carrying the 1-based line number.
    """
    defaults = RunConfig()
    known = {f.name for f in dataclasses.fields(RunConfig)}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        try:
            values[key] = kv.parse_value(value, getattr(defaults, key))
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from None
    values.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return RunConfig(**values).resolved()
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def load_run_config(path, **overrides) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_run_config(fh.read(), **overrides)
