"""x0-prediction diffusion denoiser: PS-Mamba -> PDCAM -> feed-forward layers,
classifier-free guidance and a deterministic strided sampler."""

import math
import logging
from dataclasses import dataclass, replace
from typing import List, NamedTuple, Optional, Union

import numpy as np
import torch
import torch.nn as nn

from config import DiffusionConfig, ModelConfig, PeriodicityConfig, SaliencyConfig
from errors import ArgumentError, ValidationError
from motion_model import MotionSequence, stub_text_embedding
from pdcam import PDCAM, SoftmaxCrossAttention
from periodicity import analyze_batch
from ps_mamba import PSMambaBlock

logger = logging.getLogger(__name__)


# ---------------------------
# Noise schedule
# ---------------------------

class Schedule(NamedTuple):
    betas: torch.Tensor
    alphas: torch.Tensor
    alpha_bars: torch.Tensor


def beta_schedule(cfg: DiffusionConfig) -> Schedule:
    """Linear betas; index 0 is the first diffusion step."""
    betas = torch.linspace(cfg.beta_start, cfg.beta_end, cfg.steps, dtype=torch.float64)
    alphas = 1.0 - betas
    return Schedule(betas, alphas, torch.cumprod(alphas, dim=0))


def _as_tensor(x0: Union[torch.Tensor, MotionSequence]) -> torch.Tensor:
    if isinstance(x0, MotionSequence):
        return torch.from_numpy(np.array(x0.frames))
    return x0


def q_sample(x0, t, noise: torch.Tensor, schedule: Schedule) -> torch.Tensor:
    """x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) noise; t is an int or a per-item (B,) tensor."""
    x0 = _as_tensor(x0)
    steps = schedule.alpha_bars.shape[0]
    t = torch.as_tensor(t, dtype=torch.long)
    if t.numel() and (int(t.min()) < 0 or int(t.max()) >= steps):
        raise ArgumentError(f"timestep out of range [0, {steps})")
    if noise.shape != x0.shape:
        raise ArgumentError(f"noise shape {tuple(noise.shape)} does not match {tuple(x0.shape)}")
    abar = schedule.alpha_bars[t].to(x0.dtype)
    if abar.dim():
        abar = abar.view(-1, *([1] * (x0.dim() - 1)))
    return abar.sqrt() * x0 + (1.0 - abar).sqrt() * noise


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal embedding of integer timesteps, shape (B, dim)."""
    t = torch.as_tensor(t).reshape(-1).to(torch.float64)
    half = dim // 2
    scale = math.log(10000) / max(half - 1, 1)
    freqs = torch.exp(torch.arange(half, dtype=torch.float64) * -scale)
    args = t[:, None] * freqs[None, :]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=1)
    return emb


def timestep_sequence(cfg: DiffusionConfig) -> List[int]:
    """sample_steps timesteps strided uniformly from the last step down to 0."""
    ts = np.linspace(cfg.steps - 1, 0, cfg.sample_steps).round().astype(int)
    return sorted({int(t) for t in ts}, reverse=True)


# ---------------------------
# Conditioning
# ---------------------------

@dataclass
class ConditioningBundle:
    """Per-item conditioning. text is (B, L_t, d_text) or None for the null prompt;
    drop_text marks items whose prompt is replaced by the null token."""

    t: torch.Tensor
    M: torch.Tensor
    phi: torch.Tensor
    Phi: torch.Tensor
    text: Optional[torch.Tensor] = None
    drop_text: Optional[torch.Tensor] = None

    def timestep_embedding(self, dim: int) -> torch.Tensor:
        return timestep_embedding(self.t, dim)

    def without_text(self) -> "ConditioningBundle":
        return replace(self, text=None, drop_text=None)

    def neutralized(self, mask: torch.Tensor) -> "ConditioningBundle":
        """Items where mask is set fall back to M = 1, phi = 0, Phi = 0."""
        keep = ~mask.view(-1, 1)
        return replace(self, M=torch.where(keep, self.M, torch.ones_like(self.M)),
                       phi=self.phi * keep, Phi=self.Phi * keep.unsqueeze(-1))

    @classmethod
    def neutral(cls, batch: int, L: int, t, text=None, dtype=torch.float64) -> "ConditioningBundle":
        """M = 1, phi = 0, Phi = 0: conditioning before any motion estimate exists."""
        return cls(t=torch.full((batch,), int(t), dtype=torch.long) if np.ndim(t) == 0 else torch.as_tensor(t),
                   M=torch.ones(batch, L, dtype=dtype), phi=torch.zeros(batch, L, dtype=dtype),
                   Phi=torch.zeros(batch, L, 2, dtype=dtype), text=text)

    @classmethod
    def from_motion(cls, frames: torch.Tensor, t, text=None,
                    saliency_cfg: Optional[SaliencyConfig] = None,
                    periodicity_cfg: Optional[PeriodicityConfig] = None) -> "ConditioningBundle":
        """Keyframe weights and phase estimated from a (B, L, D) motion batch."""
        M, phi, Phi = analyze_batch(frames.detach().cpu().double().numpy(), saliency_cfg, periodicity_cfg)
        dtype = frames.dtype
        B = frames.shape[0]
        return cls(t=torch.full((B,), int(t), dtype=torch.long) if np.ndim(t) == 0 else torch.as_tensor(t),
                   M=torch.from_numpy(M).to(dtype), phi=torch.from_numpy(phi).to(dtype),
                   Phi=torch.from_numpy(Phi).to(dtype), text=text)


def class_text(class_id: int, cfg: ModelConfig, batch: int = 1, dtype=torch.float32) -> torch.Tensor:
    emb = stub_text_embedding(class_id, cfg.text_tokens, cfg.d_text, seed=cfg.text_seed)
    return torch.from_numpy(np.array(emb.tokens)).to(dtype).unsqueeze(0).expand(batch, -1, -1)


# ---------------------------
# Network
# ---------------------------

class DenoiserLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.mamba = PSMambaBlock(cfg.d_model, cfg.d_inner, cfg.d_state,
                                  use_keyframes=cfg.keyframes_in("mamba"), use_phase=cfg.phase_in("mamba"))
        self.cross_norm = nn.LayerNorm(cfg.d_model)
        if cfg.cross_attention == "pdcam":
            self.cross = PDCAM(cfg.d_model, cfg.heads, cfg.lambda_init, cfg.rmsnorm_eps, cfg.softmax_axes)
        else:
            self.cross = SoftmaxCrossAttention(cfg.d_model, cfg.heads)
        self.cross_keyframes = cfg.keyframes_in("pdcam")
        self.cross_phase = cfg.phase_in("pdcam")
        self.ffn_norm = nn.LayerNorm(cfg.d_model)
        self.ffn = nn.Sequential(
            nn.Linear(cfg.d_model, cfg.ffn_mult * cfg.d_model),
            nn.GELU(),
            nn.Linear(cfg.ffn_mult * cfg.d_model, cfg.d_model),
        )

    def forward(self, x, text, M, phi, Phi):
        x = self.mamba(x, M, Phi)
        x = x + self.cross(self.cross_norm(x), text,
                           M if self.cross_keyframes else None,
                           phi if self.cross_phase else None)
        return x + self.ffn(self.ffn_norm(x))


class MotionDenoiser(nn.Module):
    """Predicts the clean motion from x_t and its conditioning."""

    def __init__(self, cfg: Optional[ModelConfig] = None, layers: int = 6):
        super().__init__()
        cfg = cfg or ModelConfig()
        if layers < 1:
            raise ArgumentError("layers must be >= 1")
        self.cfg = cfg
        self.input_proj = nn.Linear(cfg.d_motion, cfg.d_model)
        self.time_mlp = nn.Sequential(
            nn.Linear(cfg.d_model, cfg.d_model),
            nn.SiLU(),
            nn.Linear(cfg.d_model, cfg.d_model),
        )
        self.text_proj = nn.Linear(cfg.d_text, cfg.d_model)
        self.null_text = nn.Parameter(torch.randn(1, 1, cfg.d_model) * 0.02)
        self.layers = nn.ModuleList(DenoiserLayer(cfg) for _ in range(layers))
        self.final_norm = nn.LayerNorm(cfg.d_model)
        self.output_proj = nn.Linear(cfg.d_model, cfg.d_motion)

    def _text_tokens(self, cond: ConditioningBundle, batch: int) -> torch.Tensor:
        if cond.text is None:
            return self.null_text.expand(batch, 1, -1)
        tokens = self.text_proj(cond.text)
        if cond.drop_text is not None:
            null = self.null_text.expand_as(tokens)
            tokens = torch.where(cond.drop_text.view(-1, 1, 1), null, tokens)
        return tokens

    def forward(self, x_t: torch.Tensor, cond: ConditioningBundle) -> torch.Tensor:
        if x_t.dim() != 3 or x_t.shape[-1] != self.cfg.d_motion:
            raise ArgumentError(f"expected (B, L, {self.cfg.d_motion}) motion, got {tuple(x_t.shape)}")
        if not torch.isfinite(x_t).all():
            raise ValidationError("noisy motion contains NaN or Inf")
        B, L, _ = x_t.shape
        if cond.M.shape != (B, L) or cond.phi.shape != (B, L) or cond.Phi.shape != (B, L, 2):
            raise ArgumentError("conditioning lengths do not match the motion input")

        temb = self.time_mlp(cond.timestep_embedding(self.cfg.d_model).to(x_t.dtype))
        h = self.input_proj(x_t) + temb[:, None, :]
        text = self._text_tokens(cond, B)
        for layer in self.layers:
            h = layer(h, text, cond.M, cond.phi, cond.Phi)
        return self.output_proj(self.final_norm(h))


def predict_x0(x_t: torch.Tensor, t, cond: ConditioningBundle, params: MotionDenoiser) -> torch.Tensor:
    if t is not None:
        cond = replace(cond, t=torch.as_tensor(t, dtype=torch.long).expand(x_t.shape[0]))
    return params(x_t, cond)


def cfg_predict(x_t: torch.Tensor, t, cond: ConditioningBundle, params: MotionDenoiser,
                scale: float) -> torch.Tensor:
    """(1 - s) * uncond + s * cond, which is uncond + s * (cond - uncond)."""
    if scale < 0:
        raise ArgumentError("guidance scale must be >= 0")
    uncond = predict_x0(x_t, t, cond.without_text(), params)
    if cond.text is None:
        return uncond
    conditional = predict_x0(x_t, t, cond, params)
    return (1.0 - scale) * uncond + scale * conditional


# ---------------------------
# Sampling
# ---------------------------

def _check_params(model: nn.Module) -> None:
    for name, p in model.named_parameters():
        if not torch.isfinite(p).all():
            raise ValidationError(f"parameter {name} contains NaN or Inf")


def sample(text_class: Optional[int], L: int, cfg: DiffusionConfig, params: MotionDenoiser,
           seed: int = 0, num_samples: int = 1,
           saliency_cfg: Optional[SaliencyConfig] = None,
           periodicity_cfg: Optional[PeriodicityConfig] = None,
           fps: float = 20.0) -> List[MotionSequence]:
    """Deterministic x0-parameterised sampler over strided timesteps.

    The first step conditions on M = 1, Phi = 0, as does every step whose alpha_bar is
    below cfg.cond_min_alpha_bar; the others re-estimate keyframe weights and phase
    from the running clean estimate.
    """
    if L < 2:
        raise ArgumentError("sample length must be >= 2")
    _check_params(params)
    model_cfg = params.cfg
    dtype = next(params.parameters()).dtype
    schedule = beta_schedule(cfg)
    abar = schedule.alpha_bars.to(dtype)
    gen = torch.Generator().manual_seed(seed)
    x = torch.randn(num_samples, L, model_cfg.d_motion, generator=gen, dtype=dtype)
    text = class_text(text_class, model_cfg, num_samples, dtype) if text_class is not None else None

    ts = timestep_sequence(cfg)
    x0_hat = x
    params.eval()
    with torch.no_grad():
        for i, t in enumerate(ts):
            if i == 0 or float(abar[t]) < cfg.cond_min_alpha_bar:
                cond = ConditioningBundle.neutral(num_samples, L, t, text, dtype)
            else:
                cond = ConditioningBundle.from_motion(x0_hat, t, text, saliency_cfg, periodicity_cfg)
            x0_hat = cfg_predict(x, t, cond, params, cfg.guidance_scale)
            logger.debug("sample step %d/%d t=%d", i + 1, len(ts), t)
            if i == len(ts) - 1:
                break
            t_prev = ts[i + 1]
            eps = (x - abar[t].sqrt() * x0_hat) / (1.0 - abar[t]).sqrt()
            x = abar[t_prev].sqrt() * x0_hat + (1.0 - abar[t_prev]).sqrt() * eps

    name = f"class{text_class}" if text_class is not None else "uncond"
    return [MotionSequence(frames=x0_hat[b].double().numpy(), fps=fps, name=f"{name}_{b}")
            for b in range(num_samples)]
