"""Model and run configuration, plus the ``key = value`` config file format."""

from __future__ import annotations

import dataclasses
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .errors import ConfigError

OUTPUT_DIR_ENV = "RRSIS_OUTPUT_DIR"


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters.

    Defaults are the desk-scale preset; :meth:`full_scale` returns the published
    full-size values, used for shape bookkeeping.
    """

    image_size: int = 64
    channels: tuple[int, int, int, int] = (16, 32, 64, 128)
    text_dim: int = 32
    max_tokens: int = 12
    num_prompts: int = 4
    hidden_dim: int = 64
    pool_size: int = 1
    lambda_ce: float = 0.9
    topk_fraction: float = 0.1
    msda_heads: int = 2
    msda_points: int = 2
    seed: int = 0

    vocab_size: int = 64
    truncate: bool = True
    attn_heads: int = 2
    ffn_dim: int = 128
    comp_dim: int = 64
    comp_heads: int = 2
    dice_eps: float = 1.0

    # literal-formula switches and ablations
    capm_scale: bool = True
    capm_mode: str = "rowstack"
    use_capm: bool = True
    use_compensation: bool = True
    mask_padding: bool = False
    decoder: str = "mutual"
    decoder_rounds: int = 1
    decoder_norm: str = "post"

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if self.image_size <= 0 or self.image_size % 32:
            raise ConfigError(f"image_size must be a positive multiple of 32, got {self.image_size}")
        if len(self.channels) != 4 or min(self.channels) < 1:
            raise ConfigError(f"channels must be four positive widths, got {self.channels}")
        if not 0.0 <= self.lambda_ce <= 1.0:
            raise ConfigError(f"lambda_ce must lie in [0, 1], got {self.lambda_ce}")
        if not 0.0 < self.topk_fraction <= 1.0:
            raise ConfigError(f"topk_fraction must lie in (0, 1], got {self.topk_fraction}")
        if self.pool_size < 1:
            raise ConfigError("pool_size must be >= 1")
        if self.num_prompts < 1:
            raise ConfigError("num_prompts must be >= 1")
        if self.max_tokens < 2:
            raise ConfigError("max_tokens must leave room for the summary token and one word")
        if self.vocab_size < 4:
            raise ConfigError("vocab_size must be >= 4")
        if self.capm_mode not in ("rowstack", "concat"):
            raise ConfigError(f"capm_mode must be 'rowstack' or 'concat', got {self.capm_mode!r}")
        if self.decoder not in ("mutual", "single"):
            raise ConfigError(f"decoder must be 'mutual' or 'single', got {self.decoder!r}")
        if self.decoder_norm not in ("post", "pre"):
            raise ConfigError(f"decoder_norm must be 'post' or 'pre', got {self.decoder_norm!r}")
        if self.decoder_rounds < 1:
            raise ConfigError("decoder_rounds must be >= 1")
        for name, dim, heads in (
            ("text_dim", self.text_dim, self.attn_heads),
            ("hidden_dim", self.hidden_dim, self.attn_heads),
            ("hidden_dim", self.hidden_dim, self.msda_heads),
            ("comp_dim", self.comp_dim, self.comp_heads),
        ):
            if dim % heads:
                raise ConfigError(f"{name}={dim} is not divisible by {heads} heads")
        if self.dice_eps <= 0:
            raise ConfigError("dice_eps must be > 0")

    @classmethod
    def full_scale(cls, **overrides) -> "ModelConfig":
        values = dict(
            image_size=480,
            channels=(128, 256, 512, 1024),
            text_dim=768,
            max_tokens=20,
            num_prompts=4,
            hidden_dim=256,
            pool_size=1,
            lambda_ce=0.9,
            msda_heads=8,
            msda_points=4,
            attn_heads=8,
            ffn_dim=2048,
            comp_dim=256,
            comp_heads=8,
            vocab_size=30522,
        )
        values.update(overrides)
        return cls(**values)

    @property
    def level_sizes(self) -> list[tuple[int, int]]:
        """(H_i, W_i) for the four pyramid levels."""
        return [(self.image_size // 2 ** (i + 2),) * 2 for i in range(4)]

    @property
    def num_visual_tokens(self) -> int:
        return sum(h * w for h, w in self.level_sizes)

    @property
    def context_dim(self) -> int:
        return sum(self.channels)

    @property
    def seq_len(self) -> int:
        """Token-axis length seen by the fusion and decoder modules."""
        return self.max_tokens + self.num_prompts

    @property
    def num_regions(self) -> int:
        """K, the number of compensated cells on the coarsest grid."""
        if not self.use_compensation:
            return 0
        h4, w4 = self.level_sizes[3]
        return math.ceil(self.topk_fraction * h4 * w4)

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)


@dataclass
class RunConfig:
    """Everything a CLI command needs beyond the architecture."""

    model: ModelConfig = field(default_factory=ModelConfig)
    lr: float = 1e-3
    weight_decay: float = 0.01
    steps: int = 500
    batch_size: int = 4
    lr_power: float = 0.9
    manifest: str = ""
    synth_train: int = 8
    synth_val: int = 8
    synth_seed: int = 0
    output_dir: str = "runs/default"
    checkpoint_every: int = 100
    dump_attention: bool = False
    threshold: float = 0.5

    @classmethod
    def full_scale(cls, **overrides) -> "RunConfig":
        values = dict(model=ModelConfig.full_scale(), lr=5e-5, weight_decay=0.01, batch_size=32)
        values.update(overrides)
        return cls(**values)

    def resolved_output_dir(self) -> Path:
        return Path(os.environ.get(OUTPUT_DIR_ENV) or self.output_dir)

    def to_dict(self) -> dict[str, Any]:
        out = {f.name: getattr(self, f.name) for f in dataclasses.fields(self) if f.name != "model"}
        out.update(dataclasses.asdict(self.model))
        return out


def _coerce(name: str, raw: str, default: Any) -> Any:
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(v) for v in raw.replace(" ", "").split(",") if v)
    except ValueError:
        raise ConfigError(f"bad value for {name}: {raw!r}") from None
    return raw


_MODEL_DEFAULTS = {f.name: getattr(ModelConfig(), f.name) for f in dataclasses.fields(ModelConfig)}
_RUN_DEFAULTS = {f.name: getattr(RunConfig(), f.name) for f in dataclasses.fields(RunConfig) if f.name != "model"}


PRESETS = {"desk": RunConfig, "full": RunConfig.full_scale}


def config_from_dict(values: dict[str, Any], preset: str = "desk") -> RunConfig:
    """Build a RunConfig from flat keys; strings are coerced to field types."""
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; expected one of {sorted(PRESETS)}")
    base = PRESETS[preset]()
    model_kw, run_kw = {}, {}
    for key, value in values.items():
        if key in _MODEL_DEFAULTS:
            target, default = model_kw, _MODEL_DEFAULTS[key]
        elif key in _RUN_DEFAULTS:
            target, default = run_kw, _RUN_DEFAULTS[key]
        else:
            raise ConfigError(f"unknown config key {key!r}")
        target[key] = _coerce(key, value, default) if isinstance(value, str) else value
    model = dataclasses.replace(base.model, **model_kw)
    return dataclasses.replace(base, model=model, **run_kw)


def parse_config_text(text: str) -> dict[str, str]:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def load_config(path: str | os.PathLike | None = None, overrides: dict[str, str] | None = None) -> RunConfig:
    values = {}
    if path is not None:
        values.update(parse_config_text(Path(path).read_text(encoding="utf-8")))
    values.update(overrides or {})
    preset = values.pop("preset", "desk")
    return config_from_dict(values, preset=preset)


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for key, value in cfg.to_dict().items():
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"
