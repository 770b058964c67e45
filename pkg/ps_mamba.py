"""Selective state-space block with phase-enriched input and keyframe-weighted input discretisation."""

import math
import time
import logging
from typing import Dict, List, Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from errors import ArgumentError, ValidationError

logger = logging.getLogger(__name__)


def project_phase(Phi: torch.Tensor, W_phi: torch.Tensor) -> torch.Tensor:
    """Phi_d = Phi W_phi for an (..., L, 2) encoding and a 2 x D projection."""
    if Phi.shape[-1] != 2 or W_phi.dim() != 2 or W_phi.shape[0] != 2:
        raise ArgumentError(f"phase projection expects (..., 2) @ (2, D), got {tuple(Phi.shape)} @ {tuple(W_phi.shape)}")
    return Phi @ W_phi


def discretize(u: torch.Tensor, delta: torch.Tensor, A: torch.Tensor, B: torch.Tensor,
               M: Optional[torch.Tensor] = None) -> Tuple[torch.Tensor, torch.Tensor]:
    """exp(delta A) and the keyframe-scaled input term delta B u, both (batch, L, d_inner, d_state)."""
    deltaA = torch.exp(delta.unsqueeze(-1) * A)
    deltaB_u = delta.unsqueeze(-1) * B.unsqueeze(2) * u.unsqueeze(-1)
    if M is not None:
        deltaB_u = deltaB_u * M[:, :, None, None]
    return deltaA, deltaB_u


def run_scan(deltaA: torch.Tensor, deltaB_u: torch.Tensor) -> torch.Tensor:
    """h_t = deltaA_t * h_{t-1} + deltaB_u_t from h = 0; returns every state."""
    h = torch.zeros_like(deltaB_u[:, 0])
    states = []
    for t in range(deltaA.shape[1]):
        h = torch.addcmul(deltaB_u[:, t], deltaA[:, t], h)
        states.append(h)
    return torch.stack(states, dim=1)


def read_out(states: torch.Tensor, C: torch.Tensor) -> torch.Tensor:
    return torch.einsum("blis,bls->bli", states, C)


def scan(u: torch.Tensor, delta: torch.Tensor, A: torch.Tensor, B: torch.Tensor, C: torch.Tensor,
         M: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Sequential selective scan.

    u, delta: (batch, L, d_inner); A: (d_inner, d_state); B, C: (batch, L, d_state);
    M: (batch, L) keyframe weights scaling the discretised input projection, or None.
    """
    return read_out(run_scan(*discretize(u, delta, A, B, M)), C)


class SelectiveSSM(nn.Module):
    """One scan direction: input-dependent delta, B and C with A = -exp(A_log)."""

    def __init__(self, d_inner: int, d_state: int, direction: str = "forward",
                 dt_min: float = 1e-3, dt_max: float = 1e-1):
        super().__init__()
        if direction not in {"forward", "backward"}:
            raise ArgumentError(f"unknown scan direction {direction!r}")
        self.direction = direction
        A = torch.arange(1, d_state + 1, dtype=torch.float32).repeat(d_inner, 1)
        self.A_log = nn.Parameter(torch.log(A))
        self.W_B = nn.Linear(d_inner, d_state, bias=False)
        self.W_C = nn.Linear(d_inner, d_state, bias=False)
        self.W_delta = nn.Linear(d_inner, d_inner)

        nn.init.normal_(self.W_delta.weight, std=d_inner ** -0.5 * 0.1)
        dt = torch.exp(torch.rand(d_inner) * (math.log(dt_max) - math.log(dt_min)) + math.log(dt_min))
        with torch.no_grad():
            # inverse softplus so that softplus(bias) == dt
            self.W_delta.bias.copy_(dt + torch.log(-torch.expm1(-dt)))

    @property
    def A(self) -> torch.Tensor:
        return -torch.exp(self.A_log)

    def prepare(self, x: torch.Tensor, M: Optional[torch.Tensor] = None):
        """Discretised (deltaA, deltaB_u, C) in this direction's scan order."""
        if not torch.isfinite(x).all():
            raise ValidationError("selective scan input contains NaN or Inf")
        if M is not None and M.shape != x.shape[:2]:
            raise ArgumentError(f"keyframe weights shape {tuple(M.shape)} does not match {tuple(x.shape[:2])}")
        if self.direction == "backward":
            x = x.flip(1)
            M = M.flip(1) if M is not None else None
        delta = F.softplus(self.W_delta(x))
        deltaA, deltaB_u = discretize(x, delta, self.A, self.W_B(x), M)
        return deltaA, deltaB_u, self.W_C(x)

    def forward(self, x: torch.Tensor, M: Optional[torch.Tensor] = None) -> torch.Tensor:
        deltaA, deltaB_u, C = self.prepare(x, M)
        y = read_out(run_scan(deltaA, deltaB_u), C)
        return y.flip(1) if self.direction == "backward" else y


def selective_scan(x: torch.Tensor, params: SelectiveSSM, M: Optional[torch.Tensor] = None) -> torch.Tensor:
    return params(x, M)


class PSMambaBlock(nn.Module):
    """Pre-norm bidirectional selective-SSM block.

    The phase encoding is projected and added to the input before the norm;
    keyframe weights scale the input projection of both scan directions.
    """

    def __init__(self, d_model: int = 64, d_inner: int = 128, d_state: int = 16,
                 use_keyframes: bool = True, use_phase: bool = True):
        super().__init__()
        self.use_keyframes = use_keyframes
        self.use_phase = use_phase
        self.W_phi = nn.Parameter(torch.randn(2, d_model) * 0.02)
        self.norm = nn.LayerNorm(d_model)
        self.in_proj = nn.Linear(d_model, 2 * d_inner)
        self.forward_ssm = SelectiveSSM(d_inner, d_state, "forward")
        self.backward_ssm = SelectiveSSM(d_inner, d_state, "backward")
        self.out_proj = nn.Linear(d_inner, d_model)

    def bidirectional_scan(self, u: torch.Tensor, M: Optional[torch.Tensor]) -> torch.Tensor:
        """Both directions share one time loop, stacked along the batch axis."""
        fwd = self.forward_ssm.prepare(u, M)
        bwd = self.backward_ssm.prepare(u, M)
        deltaA, deltaB_u, C = (torch.cat(pair) for pair in zip(fwd, bwd))
        y_fwd, y_bwd = read_out(run_scan(deltaA, deltaB_u), C).chunk(2)
        return y_fwd + y_bwd.flip(1)

    def forward(self, X: torch.Tensor, M: Optional[torch.Tensor] = None,
                Phi: Optional[torch.Tensor] = None) -> torch.Tensor:
        if self.use_phase and Phi is not None:
            X = X + project_phase(Phi, self.W_phi)
        M = M if self.use_keyframes else None
        u, z = self.in_proj(self.norm(X)).chunk(2, dim=-1)
        u = F.silu(u)
        y = self.bidirectional_scan(u, M)
        return X + self.out_proj(y * F.silu(z))


def ps_mamba_block(X: torch.Tensor, M: Optional[torch.Tensor], Phi: Optional[torch.Tensor],
                   block: PSMambaBlock) -> torch.Tensor:
    return block(X, M, Phi)


def ps_mamba_grad(block: PSMambaBlock, X: torch.Tensor, M: torch.Tensor, Phi: torch.Tensor,
                  upstream: torch.Tensor) -> Dict[str, torch.Tensor]:
    """Reverse-mode gradients of sum(block(X, M, Phi) * upstream) for the inputs and every parameter."""
    X = X.detach().requires_grad_(True)
    M = M.detach().requires_grad_(True)
    named = [("X", X), ("M", M)] + list(block.named_parameters())
    y = block(X, M, Phi)
    grads = torch.autograd.grad((y * upstream).sum(), [t for _, t in named], allow_unused=True)
    return {name: g if g is not None else torch.zeros_like(t) for (name, t), g in zip(named, grads)}


def benchmark_forward(lengths: List[int], d_model: int = 64, d_inner: int = 128, d_state: int = 16,
                      repeats: int = 10, seed: int = 0) -> List[Tuple[int, float]]:
    """Median single-precision forward wall time per sequence length."""
    torch.manual_seed(seed)
    block = PSMambaBlock(d_model, d_inner, d_state).float().eval()
    rows = []
    with torch.no_grad():
        for L in lengths:
            X = torch.randn(1, L, d_model)
            M = torch.ones(1, L)
            Phi = torch.zeros(1, L, 2)
            block(X, M, Phi)  # warm-up
            times = []
            for _ in range(repeats):
                start = time.perf_counter()
                block(X, M, Phi)
                times.append(time.perf_counter() - start)
            median = sorted(times)[len(times) // 2]
            logger.info("L=%d median forward %.4fs", L, median)
            rows.append((L, median))
    return rows
