"""Periodic differential cross-modal alignment: linear differential cross-attention
with keyframe-weighted, phase-rotated queries and a token-adaptive lambda."""

import logging
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import torch
import torch.nn as nn

from errors import ArgumentError

logger = logging.getLogger(__name__)

SOFTMAX_AXES = ("efficient", "paper_literal")


def rms_norm(x: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    return x * torch.rsqrt(x.pow(2).mean(dim=-1, keepdim=True) + eps)


def phase_rotate(Q1: torch.Tensor, Q2: torch.Tensor, phi: torch.Tensor,
                 beta: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """Rotate each frame's (Q1, Q2) pair by beta * phi; phi has the shape of Q1 without its last axis."""
    angle = (beta * phi).unsqueeze(-1)
    cos, sin = torch.cos(angle), torch.sin(angle)
    return Q1 * cos - Q2 * sin, Q1 * sin + Q2 * cos


@dataclass
class PdcamActivation:
    Q1: torch.Tensor
    Q2: torch.Tensor
    K1: torch.Tensor
    K2: torch.Tensor
    V: torch.Tensor
    Q1_rot: torch.Tensor
    Q2_rot: torch.Tensor
    phi_q1: torch.Tensor
    phi_q2: torch.Tensor
    phi_k1: torch.Tensor
    phi_k2: torch.Tensor
    A1: torch.Tensor
    A2: torch.Tensor
    lam: torch.Tensor
    out: torch.Tensor


class PDCAM(nn.Module):
    """Multi-head linear differential cross-attention from motion queries to text keys/values.

    Tensors are batched: X (B, L_m, D), T (B, L_t, D), M and phi (B, L_m).
    Head h owns columns [2 h d_h, 2 (h + 1) d_h) of W_Q, W_K and W_V.
    """

    def __init__(self, d_model: int = 64, heads: int = 4, lambda_init: float = 0.8,
                 rmsnorm_eps: float = 1e-6, softmax_axes: str = "efficient"):
        super().__init__()
        if d_model % heads:
            raise ArgumentError(f"d_model={d_model} is not divisible by heads={heads}")
        if softmax_axes not in SOFTMAX_AXES:
            raise ArgumentError(f"unknown softmax_axes {softmax_axes!r}")
        self.d_model = d_model
        self.heads = heads
        self.d_head = d_model // heads
        self.rmsnorm_eps = rmsnorm_eps
        self.softmax_axes = softmax_axes

        self.W_Q = nn.Linear(d_model, 2 * d_model, bias=False)
        self.W_K = nn.Linear(d_model, 2 * d_model, bias=False)
        self.W_V = nn.Linear(d_model, 2 * d_model, bias=False)
        self.W_O = nn.Linear(2 * d_model, d_model, bias=False)
        self.lambda_q1 = nn.Parameter(torch.zeros(heads, self.d_head))
        self.lambda_k1 = nn.Parameter(torch.zeros(heads, self.d_head))
        self.lambda_q2 = nn.Parameter(torch.zeros(heads, self.d_head))
        self.lambda_k2 = nn.Parameter(torch.zeros(heads, self.d_head))
        self.alpha_imp = nn.Parameter(torch.zeros(()))
        self.beta = nn.Parameter(torch.ones(()))
        self.register_buffer("lambda_init", torch.tensor(float(lambda_init)))

    def _split(self, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        B, L, _ = x.shape
        x = x.view(B, L, self.heads, 2 * self.d_head).transpose(1, 2)
        return x[..., :self.d_head], x[..., self.d_head:]

    def qkv_project(self, X: torch.Tensor, T: torch.Tensor, M: Optional[torch.Tensor] = None):
        """(Q1, Q2, K1, K2, V) for all heads, shaped (B, H, L, .); query rows scaled by M."""
        if X.shape[-1] != self.d_model or T.shape[-1] != self.d_model:
            raise ArgumentError(f"expected feature width {self.d_model}, got {X.shape[-1]} and {T.shape[-1]}")
        if M is not None and M.shape != X.shape[:2]:
            raise ArgumentError(f"keyframe weights shape {tuple(M.shape)} does not match {tuple(X.shape[:2])}")
        q = self.W_Q(X)
        if M is not None:
            q = q * M.unsqueeze(-1)
        Q1, Q2 = self._split(q)
        K1, K2 = self._split(self.W_K(T))
        B, L_t, _ = T.shape
        V = self.W_V(T).view(B, L_t, self.heads, 2 * self.d_head).transpose(1, 2)
        return Q1, Q2, K1, K2, V

    def token_lambda(self, M: Optional[torch.Tensor] = None) -> Tuple[torch.Tensor, Optional[torch.Tensor]]:
        """(lambda_base, per-token lambda); the inner products run over every head's vector."""
        lambda_base = (torch.exp(torch.sum(self.lambda_q1 * self.lambda_k1))
                       - torch.exp(torch.sum(self.lambda_q2 * self.lambda_k2))
                       + self.lambda_init)
        if M is None:
            return lambda_base, None
        return lambda_base, lambda_base * (1.0 + self.alpha_imp * (M - 1.0))

    def _feature_maps(self, Q1, Q2, K1, K2):
        if self.softmax_axes == "efficient":
            q_axis, k_axis = -1, -2
        else:
            q_axis, k_axis = -2, -1
        return (Q1.softmax(dim=q_axis), Q2.softmax(dim=q_axis),
                K1.softmax(dim=k_axis), K2.softmax(dim=k_axis))

    def activations(self, X: torch.Tensor, T: torch.Tensor, M: Optional[torch.Tensor] = None,
                    phi: Optional[torch.Tensor] = None,
                    lam_override: Optional[torch.Tensor] = None) -> PdcamActivation:
        Q1, Q2, K1, K2, V = self.qkv_project(X, T, M)
        if phi is not None:
            Q1_rot, Q2_rot = phase_rotate(Q1, Q2, phi.unsqueeze(1), self.beta)
        else:
            Q1_rot, Q2_rot = Q1, Q2
        phi_q1, phi_q2, phi_k1, phi_k2 = self._feature_maps(Q1_rot, Q2_rot, K1, K2)
        A1 = phi_k1.transpose(-1, -2) @ V
        A2 = phi_k2.transpose(-1, -2) @ V
        if lam_override is not None:
            lam = lam_override.expand(X.shape[:2])
        else:
            lambda_base, lam = self.token_lambda(M)
            if lam is None:
                lam = lambda_base.expand(X.shape[:2])
        out = phi_q1 @ A1 - lam[:, None, :, None] * (phi_q2 @ A2)
        return PdcamActivation(Q1, Q2, K1, K2, V, Q1_rot, Q2_rot, phi_q1, phi_q2, phi_k1, phi_k2,
                               A1, A2, lam, out)

    def lin_diff_cross_attn(self, X, T, M=None, phi=None, head: Optional[int] = None,
                            lam_override: Optional[torch.Tensor] = None) -> torch.Tensor:
        """Per-head outputs (B, H, L_m, 2 d_h), or (B, L_m, 2 d_h) for a single head."""
        out = self.activations(X, T, M, phi, lam_override).out
        return out if head is None else out[:, head]

    def forward(self, X: torch.Tensor, T: torch.Tensor, M: Optional[torch.Tensor] = None,
                phi: Optional[torch.Tensor] = None) -> torch.Tensor:
        heads = self.lin_diff_cross_attn(X, T, M, phi)
        B, _, L_m, _ = heads.shape
        concat = heads.transpose(1, 2).reshape(B, L_m, 2 * self.d_model)
        O = rms_norm(concat, self.rmsnorm_eps) * (1.0 - self.lambda_init)
        return self.W_O(O)


def multi_head_pdcam(X, T, M, phi, params: PDCAM) -> torch.Tensor:
    return params(X, T, M, phi)


class SoftmaxCrossAttention(nn.Module):
    """Quadratic softmax cross-attention, the plain baseline for ablation comparisons."""

    def __init__(self, d_model: int = 64, heads: int = 4):
        super().__init__()
        self.attn = nn.MultiheadAttention(d_model, heads, batch_first=True)

    def forward(self, X, T, M=None, phi=None):
        out, _ = self.attn(X, T, T, need_weights=False)
        return out


def pdcam_grad(module: PDCAM, X: torch.Tensor, T: torch.Tensor, M: torch.Tensor, phi: torch.Tensor,
               upstream: torch.Tensor) -> Dict[str, torch.Tensor]:
    """Reverse-mode gradients of sum(module(X, T, M, phi) * upstream) for inputs and parameters."""
    X = X.detach().requires_grad_(True)
    T = T.detach().requires_grad_(True)
    M = M.detach().requires_grad_(True)
    named = [("X", X), ("T", T), ("M", M)] + list(module.named_parameters())
    y = module(X, T, M, phi)
    grads = torch.autograd.grad((y * upstream).sum(), [t for _, t in named], allow_unused=True)
    return {name: g if g is not None else torch.zeros_like(t) for (name, t), g in zip(named, grads)}
