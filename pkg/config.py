import os
import json
import logging
from dataclasses import MISSING, dataclass, field, fields, asdict, is_dataclass
from pathlib import Path
from typing import Optional

from errors import ArgumentError

logger = logging.getLogger(__name__)

THREADS_ENV = "RHYTHM_SSM_THREADS"


# ---------------------------
# Per-module settings
# ---------------------------

@dataclass
class SaliencyConfig:
    fraction: float = 0.015
    num_segments: Optional[int] = None  # None -> ceil(L / 32)
    weight_mode: str = "eq3"

    def __post_init__(self):
        if not 0.0 < self.fraction < 1.0:
            raise ArgumentError(f"saliency.fraction must be in (0, 1), got {self.fraction}")
        if self.num_segments is not None and self.num_segments < 1:
            raise ArgumentError("saliency.num_segments must be >= 1")
        if self.weight_mode not in {"eq3", "one_plus_gamma"}:
            raise ArgumentError(f"unknown saliency.weight_mode {self.weight_mode!r}")


@dataclass
class PeriodicityConfig:
    theta_peak: float = 0.3
    theta_prom: float = 0.15
    theta_ent: float = 0.7
    min_length: int = 4

    def __post_init__(self):
        if not 0.0 <= self.theta_ent <= 1.0:
            raise ArgumentError("periodicity.theta_ent must lie in [0, 1]")
        if self.min_length < 4:
            raise ArgumentError("periodicity.min_length must be >= 4")


@dataclass
class ModelConfig:
    d_motion: int = 8
    d_model: int = 64
    d_inner: int = 128
    d_state: int = 16
    heads: int = 4
    d_text: int = 64
    text_tokens: int = 4
    text_seed: int = 0
    ffn_mult: int = 4
    softmax_axes: str = "efficient"
    cross_attention: str = "pdcam"
    use_keyframes: bool = True
    use_phase: bool = True
    # per-module switches, applied on top of use_keyframes / use_phase
    mamba_keyframes: bool = True
    mamba_phase: bool = True
    pdcam_keyframes: bool = True
    pdcam_phase: bool = True
    rmsnorm_eps: float = 1e-6
    lambda_init: float = 0.8

    def __post_init__(self):
        for name in ("d_motion", "d_model", "d_inner", "d_state", "heads",
                     "d_text", "text_tokens", "ffn_mult"):
            if getattr(self, name) < 1:
                raise ArgumentError(f"model.{name} must be >= 1")
        if self.d_model % self.heads:
            raise ArgumentError("model.d_model must be divisible by model.heads")
        if self.softmax_axes not in {"efficient", "paper_literal"}:
            raise ArgumentError(f"unknown model.softmax_axes {self.softmax_axes!r}")
        if self.cross_attention not in {"pdcam", "softmax"}:
            raise ArgumentError(f"unknown model.cross_attention {self.cross_attention!r}")
        if self.rmsnorm_eps <= 0:
            raise ArgumentError("model.rmsnorm_eps must be positive")

    def keyframes_in(self, module: str) -> bool:
        return self.use_keyframes and getattr(self, f"{module}_keyframes")

    def phase_in(self, module: str) -> bool:
        return self.use_phase and getattr(self, f"{module}_phase")


@dataclass
class DiffusionConfig:
    steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    cfg_mask_prob: float = 0.1
    guidance_scale: float = 2.5
    sample_steps: int = 10
    layers: int = 6
    # below this alpha_bar the neutral bundle (M = 1, Phi = 0) replaces the motion-derived one
    cond_min_alpha_bar: float = 0.0

    def __post_init__(self):
        if self.steps < 1:
            raise ArgumentError("diffusion.steps must be >= 1")
        if not 0.0 < self.beta_start < self.beta_end < 1.0:
            raise ArgumentError("diffusion betas must satisfy 0 < beta_start < beta_end < 1")
        if not 0.0 <= self.cfg_mask_prob <= 1.0:
            raise ArgumentError("diffusion.cfg_mask_prob must lie in [0, 1]")
        if not 1 <= self.sample_steps <= self.steps:
            raise ArgumentError("diffusion.sample_steps must lie in [1, steps]")
        if self.guidance_scale < 0:
            raise ArgumentError("diffusion.guidance_scale must be >= 0")
        if not 0.0 <= self.cond_min_alpha_bar <= 1.0:
            raise ArgumentError("diffusion.cond_min_alpha_bar must lie in [0, 1]")


@dataclass
class TrainConfig:
    train_steps: int = 3000
    batch_size: int = 32
    lr: float = 2e-4
    weight_decay: float = 1e-2
    grad_clip: float = 1.0
    lr_decay: float = 0.9
    lr_decay_every: int = 5000
    log_every: int = 100
    neutral_cond_prob: float = 0.0

    def __post_init__(self):
        if self.train_steps < 1 or self.batch_size < 1:
            raise ArgumentError("train.train_steps and train.batch_size must be >= 1")
        if self.lr <= 0 or self.grad_clip <= 0:
            raise ArgumentError("train.lr and train.grad_clip must be positive")
        if self.lr_decay_every < 1 or self.log_every < 1:
            raise ArgumentError("train.lr_decay_every and train.log_every must be >= 1")
        if not 0.0 <= self.neutral_cond_prob <= 1.0:
            raise ArgumentError("train.neutral_cond_prob must lie in [0, 1]")


@dataclass
class CliConfig:
    saliency: SaliencyConfig = field(default_factory=SaliencyConfig)
    periodicity: PeriodicityConfig = field(default_factory=PeriodicityConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    seed: int = 0


# ---------------------------
# Loading / dumping
# ---------------------------

def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ArgumentError(f"{where or 'config'} must be a JSON object")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ArgumentError(f"unknown config keys in {where or 'config'}: {', '.join(unknown)}")
    kwargs = {}
    for name, value in data.items():
        factory = known[name].default_factory
        if factory is not MISSING and is_dataclass(factory):
            kwargs[name] = _build(factory, value, f"{where}.{name}" if where else name)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as e:
        raise ArgumentError(f"bad value in {where or 'config'}: {e}") from e


def config_from_dict(data: dict) -> CliConfig:
    return _build(CliConfig, data, "")


def config_to_dict(cfg) -> dict:
    return asdict(cfg)


def toy_config() -> CliConfig:
    """Desk-scale settings for the two-class toy task: a small two-layer model that trains in minutes."""
    return CliConfig(
        model=ModelConfig(d_model=32, d_inner=64, d_state=8, heads=4, d_text=32, ffn_mult=2),
        diffusion=DiffusionConfig(layers=2, cond_min_alpha_bar=0.1),
        train=TrainConfig(train_steps=4000, lr=1e-3, lr_decay=0.5, lr_decay_every=1500,
                          log_every=250, neutral_cond_prob=0.25),
    )


PRESETS = {"default": CliConfig, "toy": toy_config}


def _merge(base: dict, overrides: dict) -> dict:
    merged = dict(base)
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def preset_config(name: str) -> CliConfig:
    if name not in PRESETS:
        raise ArgumentError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    return PRESETS[name]()


def load_config(path, base: Optional[CliConfig] = None) -> CliConfig:
    """Read a JSON config file over base (defaults when None); keys that are not recognised are rejected."""
    path = Path(path)
    try:
        with path.open("r", encoding="utf-8") as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise ArgumentError(f"config {path} is not valid JSON: {e}") from e
    if not isinstance(data, dict):
        raise ArgumentError(f"config {path} must hold a JSON object")
    cfg = config_from_dict(_merge(config_to_dict(base), data) if base is not None else data)
    logger.debug("loaded config from %s", path)
    return cfg


def worker_threads() -> Optional[int]:
    """Thread cap from the environment, or None when unset."""
    raw = os.getenv(THREADS_ENV)
    if not raw:
        return None
    try:
        n = int(raw)
    except ValueError:
        raise ArgumentError(f"{THREADS_ENV} must be an integer, got {raw!r}")
    if n < 1:
        raise ArgumentError(f"{THREADS_ENV} must be >= 1")
    return n
