"""Model / training / data configuration.

Configs are plain dataclasses.  They serialize to a flat text format of
dotted keys, one per line::

    model.embed_dim = 400
    model.cnn_filters = [64, 64, 64, 16]
    train.batch_size = 256

Values are parsed as JSON where possible (numbers, booleans, lists) and fall
back to bare strings.  The same ``section.key=value`` syntax is accepted for
command-line overrides.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields
from typing import Any

from .errors import ConfigurationError, FormatError, UsageError

FUSION_OPS = ("SUM", "MEA", "AUT", "AUT_L1", "AUT_L2", "LIN")

#: Number of panels in one puzzle: 8 context cells + 8 answer candidates.
PANELS_PER_PROBLEM = 16
NUM_CONTEXT = 8
NUM_CANDIDATES = 8

#: The rule extractor flattens pooled features down to this many positions,
#: so the sequence entering it must survive a stride-4 max pool first.
RULE_POOL_STRIDE = 4
RULE_OUTPUT_POSITIONS = 16

#: Both encoders reduce spatial extent by this factor, which ties the CNN's
#: final channel count to the shared embedding width.
ENCODER_DOWNSAMPLE = 16


@dataclass
class ModelConfig:
    """Architecture hyperparameters for the dual-stream network."""

    image_size: int = 80
    patch_size: int = 20
    embed_dim: int = 400
    vit_depth: int = 12
    vit_heads: int = 8
    vit_mlp_ratio: int = 4
    cnn_kernel: int = 7
    cnn_filters: tuple[int, int, int, int] = (64, 64, 64, 16)
    enable_cnn: bool = True
    enable_vit: bool = True
    fusion_op: str = "LIN"
    rule_filters: tuple[int, int, int, int] = (64, 128, 128, 64)
    rule_kernel: int = 7
    classifier_dims: tuple[int, ...] = (512, 256, 1)
    dropout: float = 0.5

    def __post_init__(self) -> None:
        self.cnn_filters = tuple(self.cnn_filters)
        self.rule_filters = tuple(self.rule_filters)
        self.classifier_dims = tuple(self.classifier_dims)

    def validate(self) -> None:
        """Raise ConfigurationError on any inconsistent field combination."""
        if self.image_size <= 0 or self.patch_size <= 0:
            raise ConfigurationError("image_size and patch_size must be positive")
        if not (self.enable_cnn or self.enable_vit):
            raise ConfigurationError(
                "at least one encoder stream must be enabled "
                "(enable_cnn and enable_vit are both false)"
            )
        if self.embed_dim <= 0:
            raise ConfigurationError("embed_dim must be positive")
        if self.embed_dim % RULE_POOL_STRIDE != 0:
            raise ConfigurationError(
                f"embed_dim must be divisible by {RULE_POOL_STRIDE} "
                f"(rule-extractor max pool), got {self.embed_dim}"
            )
        if self.enable_cnn:
            if len(self.cnn_filters) != 4:
                raise ConfigurationError(
                    f"cnn_filters must have 4 entries, got {len(self.cnn_filters)}"
                )
            if any(f <= 0 for f in self.cnn_filters):
                raise ConfigurationError("cnn_filters entries must be positive")
            if self.image_size % ENCODER_DOWNSAMPLE != 0:
                raise ConfigurationError(
                    f"image_size must be divisible by {ENCODER_DOWNSAMPLE} "
                    f"(CNN downsampling), got {self.image_size}"
                )
            grid = self.image_size // ENCODER_DOWNSAMPLE
            flat = self.cnn_filters[3] * grid * grid
            if flat != self.embed_dim:
                raise ConfigurationError(
                    "CNN output does not match embed_dim: "
                    f"cnn_filters[3] * (image_size/{ENCODER_DOWNSAMPLE})^2 = "
                    f"{self.cnn_filters[3]} * {grid}^2 = {flat}, "
                    f"but embed_dim = {self.embed_dim}"
                )
            if self.cnn_kernel <= 0 or self.cnn_kernel % 2 == 0:
                raise ConfigurationError(
                    f"cnn_kernel must be a positive odd integer, got {self.cnn_kernel}"
                )
        if self.enable_vit:
            if self.image_size % self.patch_size != 0:
                raise ConfigurationError(
                    f"image_size ({self.image_size}) must be divisible by "
                    f"patch_size ({self.patch_size})"
                )
            if self.vit_depth <= 0:
                raise ConfigurationError("vit_depth must be positive")
            if self.vit_heads <= 0:
                raise ConfigurationError("vit_heads must be positive")
            if self.embed_dim % self.vit_heads != 0:
                raise ConfigurationError(
                    f"embed_dim ({self.embed_dim}) must be divisible by "
                    f"vit_heads ({self.vit_heads})"
                )
            if self.vit_mlp_ratio <= 0:
                raise ConfigurationError("vit_mlp_ratio must be positive")
        if self.fusion_op not in FUSION_OPS:
            raise ConfigurationError(
                f"unknown fusion_op {self.fusion_op!r}; expected one of {FUSION_OPS}"
            )
        if len(self.rule_filters) != 4:
            raise ConfigurationError(
                f"rule_filters must have 4 entries, got {len(self.rule_filters)}"
            )
        if any(f <= 0 for f in self.rule_filters):
            raise ConfigurationError("rule_filters entries must be positive")
        if self.rule_filters[1] != self.rule_filters[2]:
            raise ConfigurationError(
                "rule_filters[1] must equal rule_filters[2] (block boundary), "
                f"got {self.rule_filters}"
            )
        if self.rule_kernel <= 0 or self.rule_kernel % 2 == 0:
            raise ConfigurationError(
                f"rule_kernel must be a positive odd integer, got {self.rule_kernel}"
            )
        if len(self.classifier_dims) < 1 or self.classifier_dims[-1] != 1:
            raise ConfigurationError(
                "classifier_dims must end in 1 (one score per candidate), "
                f"got {self.classifier_dims}"
            )
        if any(d <= 0 for d in self.classifier_dims):
            raise ConfigurationError("classifier_dims entries must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError(
                f"dropout must lie in [0, 1), got {self.dropout}"
            )

    @property
    def num_patches(self) -> int:
        side = self.image_size // self.patch_size
        return side * side

    @property
    def rule_embed_dim(self) -> int:
        return self.rule_filters[3] * RULE_OUTPUT_POSITIONS


@dataclass
class TrainConfig:
    """Optimization hyperparameters and loop control."""

    batch_size: int = 256
    learning_rate: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 1e-6
    flip_p: float = 0.3
    max_epochs: int = 100
    early_stop_patience: int = 20
    seed: int = 0
    deterministic: bool = False

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigurationError("learning_rate must be positive")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigurationError("betas must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigurationError("weight_decay must be non-negative")
        if not 0.0 <= self.flip_p <= 1.0:
            raise ConfigurationError("flip_p must lie in [0, 1]")
        if self.max_epochs < 1:
            raise ConfigurationError("max_epochs must be >= 1")
        if self.early_stop_patience < 1:
            raise ConfigurationError("early_stop_patience must be >= 1")


def _coerce(dc_field: dataclasses.Field, value: Any, section: str) -> Any:
    """Coerce a parsed config value to the dataclass field's type."""
    name = f"{section}.{dc_field.name}"
    ftype = dc_field.type
    try:
        if ftype == "bool" or isinstance(dc_field.default, bool):
            if isinstance(value, bool):
                return value
            if isinstance(value, str):
                low = value.strip().lower()
                if low in ("true", "1", "yes"):
                    return True
                if low in ("false", "0", "no"):
                    return False
            raise ValueError(f"expected a boolean, got {value!r}")
        if isinstance(dc_field.default, int) and not isinstance(dc_field.default, bool):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(f"expected an integer, got {value!r}")
            return int(value)
        if isinstance(dc_field.default, float):
            return float(value)
        if isinstance(dc_field.default, tuple):
            if isinstance(value, str):
                value = json.loads(value)
            if not isinstance(value, (list, tuple)):
                raise ValueError(f"expected a list, got {value!r}")
            return tuple(int(v) for v in value)
        if isinstance(dc_field.default, str):
            return str(value)
    except (ValueError, TypeError) as exc:
        raise ConfigurationError(f"bad value for {name}: {exc}") from exc
    return value


def _dataclass_from_mapping(cls: type, mapping: dict[str, Any], section: str) -> Any:
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in mapping.items():
        if key not in known:
            raise ConfigurationError(
                f"unknown key {section}.{key}; valid keys: {', '.join(sorted(known))}"
            )
        kwargs[key] = _coerce(known[key], value, section)
    return cls(**kwargs)


def model_config_from_mapping(mapping: dict[str, Any]) -> ModelConfig:
    return _dataclass_from_mapping(ModelConfig, mapping, "model")


def train_config_from_mapping(mapping: dict[str, Any]) -> TrainConfig:
    return _dataclass_from_mapping(TrainConfig, mapping, "train")


def _format_value(value: Any) -> str:
    if isinstance(value, tuple):
        return json.dumps(list(value))
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (list, dict)):
        return json.dumps(value)
    return str(value)


def config_to_text(sections: dict[str, dict[str, Any]]) -> str:
    """Render nested section dicts as dotted key = value lines."""
    lines = []
    for section in sections:
        for key, value in sections[section].items():
            lines.append(f"{section}.{key} = {_format_value(value)}")
    return "\n".join(lines) + "\n"


KNOWN_SECTIONS = ("model", "train", "data")


def parse_config_text(text: str) -> dict[str, dict[str, Any]]:
    """Parse dotted key = value lines back into nested section dicts.

    Blank lines and lines starting with ``#`` are ignored.  Raises
    FormatError on anything else that does not look like ``a.b = v``,
    and on sections other than model/train/data.
    """
    sections: dict[str, dict[str, Any]] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise FormatError(f"line {lineno}: expected 'section.key = value', got {raw!r}")
        key_part, _, value_part = line.partition("=")
        dotted = key_part.strip()
        if "." not in dotted:
            raise FormatError(f"line {lineno}: key must be dotted (section.key), got {dotted!r}")
        section, _, key = dotted.partition(".")
        if not section or not key:
            raise FormatError(f"line {lineno}: malformed key {dotted!r}")
        if section not in KNOWN_SECTIONS:
            raise FormatError(
                f"line {lineno}: unknown section {section!r}"
                f" (expected one of {', '.join(KNOWN_SECTIONS)})"
            )
        value_text = value_part.strip()
        try:
            value = json.loads(value_text)
        except json.JSONDecodeError:
            value = value_text
        sections.setdefault(section, {})[key] = value
    return sections


def apply_overrides(sections: dict[str, dict[str, Any]], overrides: list[str]) -> None:
    """Apply ``section.key=value`` override strings in place.

    Raises UsageError on malformed expressions.  Key existence is checked
    later when the section mapping is turned into a dataclass.
    """
    for expr in overrides:
        if "=" not in expr:
            raise UsageError(f"override must look like section.key=value, got {expr!r}")
        dotted, _, value_text = expr.partition("=")
        dotted = dotted.strip()
        if "." not in dotted:
            raise UsageError(f"override key must be dotted (e.g. model.embed_dim), got {dotted!r}")
        section, _, key = dotted.partition(".")
        if not section or not key:
            raise UsageError(f"malformed override key {dotted!r}")
        try:
            value = json.loads(value_text.strip())
        except json.JSONDecodeError:
            value = value_text.strip()
        sections.setdefault(section, {})[key] = value


def config_fingerprint(config: ModelConfig) -> dict[str, Any]:
    """JSON-friendly snapshot of every architecture field, for checkpoints."""
    out = {}
    for f in fields(config):
        value = getattr(config, f.name)
        if isinstance(value, tuple):
            value = list(value)
        out[f.name] = value
    return out


# ---------------------------------------------------------------------------
# Presets
# ---------------------------------------------------------------------------

def _default_preset() -> ModelConfig:
    return ModelConfig()


def _micro_preset() -> ModelConfig:
    return ModelConfig(
        image_size=32,
        patch_size=8,
        embed_dim=64,
        vit_depth=1,
        vit_heads=4,
        cnn_filters=(8, 8, 8, 16),
    )


def _compact_preset() -> ModelConfig:
    # ~3.6M parameters: same topology as the default, slimmed width/depth.
    return ModelConfig(
        image_size=80,
        patch_size=20,
        embed_dim=200,
        vit_depth=5,
        vit_heads=8,
        cnn_filters=(32, 32, 32, 8),
    )


def _small_preset() -> ModelConfig:
    # ~1M parameters at 32x32 input; sized to train to high accuracy on a
    # two-attribute puzzle distribution within minutes on one CPU core.
    return ModelConfig(
        image_size=32,
        patch_size=8,
        embed_dim=64,
        vit_depth=2,
        vit_heads=4,
        cnn_filters=(16, 16, 16, 16),
    )


PRESETS = {
    "default": _default_preset,
    "micro": _micro_preset,
    "drnet-p": _compact_preset,
    "small": _small_preset,
}


def preset(name: str) -> ModelConfig:
    try:
        factory = PRESETS[name]
    except KeyError:
        raise UsageError(
            f"unknown preset {name!r}; available: {', '.join(sorted(PRESETS))}"
        ) from None
    config = factory()
    config.validate()
    return config
