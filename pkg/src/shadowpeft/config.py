"""Flat key-value run configuration with strict validation.

Format: one ``key = value`` per line, ``#`` comments. Unknown keys are
rejected (with a suggestion) so programmatically generated ablation
configs fail loudly on typos. Every effective value, defaulted or not,
appears in the echoed config, and the echo re-parses to an identical
RunConfig.
"""

import difflib
import os
from dataclasses import dataclass, fields, replace

from .data import PROFILE_DEFAULTS
from .errors import ConfigError
from .losses import FocalParams
from .sampling import SamplingConfig
from .segmenter import ModelConfig

PROMPT_MODES = {"point": 0, "box": 1, "mask": 2, "none": None}


def _bool(s):
    v = str(s).strip().lower()
    if v in ("true", "1", "yes"):
        return True
    if v in ("false", "0", "no"):
        return False
    raise ConfigError(f"expected a boolean, got {s!r}")


@dataclass
class RunConfig:
    # dataset
    profile: str = "custom"
    root: str = ""
    split: str = "train"
    alpha: float = 8.0 / 9.0
    gamma: float = 2.0
    epochs: int = 40
    # sampling
    strategy: str = "grid"
    grid_size: int = 16
    k: int = 1
    tau: float = 0.5
    n_pos: int = 8
    n_neg: int = 8
    prompt_mode: str = "point"
    # optimizer / training
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    batch_size: int = 4
    seed: int = 0
    coarse_loss_weight: float = 1.0
    final_loss_weight: float = 1.0
    crop_min: float = 0.75
    augment: bool = True
    aggregate: str = "image"  # "image" or "pixel"
    # model
    model: str = "toy"
    input_size: int = 0  # 0 = derive from model preset
    mask_size: int = 0
    backbone: str = ""
    top_channels: int = 0
    adapter_ratio: float = 0.25
    adapter_scale: float = 1.0
    adapter_mha: bool = True
    adapter_ffn: bool = True
    freeze_backbone: bool = True
    # paths
    run_dir: str = "runs/default"

    def focal_params(self):
        return FocalParams(self.alpha, self.gamma)

    def sampling_config(self):
        return SamplingConfig(strategy=self.strategy, k=self.k,
                              grid_size=self.grid_size, tau=self.tau,
                              n_pos=self.n_pos, n_neg=self.n_neg)

    def model_config(self):
        return ModelConfig(
            preset=self.model, input_size=self.input_size,
            mask_size=self.mask_size, backbone=self.backbone,
            top_channels=self.top_channels, adapter_ratio=self.adapter_ratio,
            adapter_scale=self.adapter_scale, adapter_mha=self.adapter_mha,
            adapter_ffn=self.adapter_ffn,
            prompt_mode=PROMPT_MODES[self.prompt_mode], seed=self.seed)

    def to_dict(self):
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                v = "true" if v else "false"
            out[f.name] = v
        return out


_PRESET_DEFAULTS = {
    "toy": dict(input_size=64, mask_size=64, backbone="tiny", top_channels=32),
    "full": dict(input_size=1024, mask_size=256, backbone="efficientnet_b1",
                 top_channels=128),
}

_CONVERTERS = {bool: _bool, int: int, float: float, str: str}


def _field_types():
    return {f.name: f.type for f in fields(RunConfig)}


def config_from_dict(raw):
    """Validate a key -> string dict and build the RunConfig."""
    types = _field_types()
    type_map = {"bool": bool, "int": int, "float": float, "str": str}
    values = {}
    for key, sval in raw.items():
        if key not in types:
            hint = difflib.get_close_matches(key, types, n=1)
            suffix = f"; did you mean {hint[0]!r}?" if hint else ""
            raise ConfigError(f"unknown config key {key!r}{suffix}")
        ftype = type_map[types[key]] if isinstance(types[key], str) else types[key]
        try:
            values[key] = _CONVERTERS[ftype](sval)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad value for {key!r}: {exc}") from exc
    cfg = RunConfig(**values)
    return validate_config(cfg, explicit=set(values))


def validate_config(cfg: RunConfig, explicit=()):
    """Fill profile/preset-dependent defaults, then check every invariant."""
    if cfg.profile not in PROFILE_DEFAULTS:
        raise ConfigError(
            f"unknown profile {cfg.profile!r}; choose from {sorted(PROFILE_DEFAULTS)}")
    if cfg.model not in _PRESET_DEFAULTS:
        raise ConfigError(f"model must be one of {sorted(_PRESET_DEFAULTS)}")
    prof = PROFILE_DEFAULTS[cfg.profile]
    updates = {}
    if "alpha" not in explicit:
        updates["alpha"] = prof["focal"].alpha
    if "gamma" not in explicit:
        updates["gamma"] = prof["focal"].gamma
    if "epochs" not in explicit:
        updates["epochs"] = prof["epochs"]
    preset = _PRESET_DEFAULTS[cfg.model]
    for key, val in preset.items():
        current = getattr(cfg, key)
        if (current == 0 or current == "") and key not in explicit:
            updates[key] = val
    cfg = replace(cfg, **updates)
    if cfg.input_size <= 0 or cfg.mask_size <= 0 or cfg.top_channels <= 0:
        raise ConfigError("input_size, mask_size and top_channels must be positive")
    if not cfg.backbone:
        raise ConfigError("backbone must be set")
    if cfg.prompt_mode not in PROMPT_MODES:
        raise ConfigError(f"prompt_mode must be one of {sorted(PROMPT_MODES)}")
    if cfg.learning_rate <= 0:
        raise ConfigError("learning_rate must be positive")
    if cfg.batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    if cfg.epochs < 1:
        raise ConfigError("epochs must be >= 1")
    if not 0.0 < cfg.crop_min <= 1.0:
        raise ConfigError("crop_min must lie in (0,1]")
    if cfg.aggregate not in ("image", "pixel"):
        raise ConfigError("aggregate must be 'image' or 'pixel'")
    cfg.focal_params()  # range checks
    cfg.sampling_config()
    cfg.model_config()
    return cfg


def parse_config(path):
    """Parse and validate a flat key-value config file."""
    if not os.path.isfile(path):
        raise ConfigError(f"config file not found: {path!r}")
    raw = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, val = (part.strip() for part in line.split("=", 1))
            if key in raw:
                raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
            raw[key] = val
    return config_from_dict(raw)


def echo_config(cfg: RunConfig, path):
    """Write the fully resolved config; re-parsing it reproduces cfg."""
    with open(path, "w") as fh:
        for key, val in sorted(cfg.to_dict().items()):
            fh.write(f"{key} = {val}\n")
