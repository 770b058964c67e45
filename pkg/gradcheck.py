"""Central finite-difference checks of the reverse-mode gradients, per parameter group."""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from config import ModelConfig
from denoiser import ConditioningBundle, MotionDenoiser
from pdcam import PDCAM
from ps_mamba import PSMambaBlock

logger = logging.getLogger(__name__)

FD_STEP = 1e-5
COMPONENT_TOLERANCE = 1e-4
MODEL_TOLERANCE = 1e-3


@dataclass
class GradcheckReport:
    module: str
    errors: Dict[str, float] = field(default_factory=dict)
    tolerance: float = COMPONENT_TOLERANCE

    @property
    def max_error(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance


def relative_error(analytic: torch.Tensor, numeric: torch.Tensor) -> float:
    """max|a - n| / max(max|a|, max|n|), guarded against all-zero groups."""
    diff = (analytic - numeric).abs().max().item() if analytic.numel() else 0.0
    scale = max(analytic.abs().max().item() if analytic.numel() else 0.0,
                numeric.abs().max().item() if numeric.numel() else 0.0, 1e-12)
    return diff / scale


def numerical_gradient(loss_fn: Callable[[], torch.Tensor], tensor: torch.Tensor,
                       entries: Sequence[int], step: float = FD_STEP) -> torch.Tensor:
    flat = tensor.detach().view(-1)
    grads = torch.zeros(len(entries), dtype=torch.float64)
    with torch.no_grad():
        for k, j in enumerate(entries):
            orig = flat[j].item()
            flat[j] = orig + step
            f1 = loss_fn().item()
            flat[j] = orig - step
            f2 = loss_fn().item()
            flat[j] = orig
            grads[k] = (f1 - f2) / (2.0 * step)
    return grads


def check_gradients(loss_fn: Callable[[], torch.Tensor], named: List[Tuple[str, torch.Tensor]],
                    step: float = FD_STEP, max_entries: Optional[int] = None,
                    seed: int = 0) -> Dict[str, float]:
    """Relative error between autograd and central differences for each named tensor.

    With max_entries set, a seeded random subset of each tensor's entries is checked.
    """
    tensors = [t for _, t in named]
    for t in tensors:
        t.requires_grad_(True)
    analytic = torch.autograd.grad(loss_fn(), tensors, allow_unused=True)
    rng = np.random.default_rng(seed)
    errors = {}
    for (name, t), g in zip(named, analytic):
        g = torch.zeros_like(t) if g is None else g
        n = t.numel()
        if max_entries is not None and n > max_entries:
            entries = sorted(int(j) for j in rng.choice(n, size=max_entries, replace=False))
        else:
            entries = list(range(n))
        numeric = numerical_gradient(loss_fn, t, entries, step)
        errors[name] = relative_error(g.detach().reshape(-1)[entries].double(), numeric)
        logger.debug("%s: rel err %.3e over %d entries", name, errors[name], len(entries))
    return errors


def _perturb(module: torch.nn.Module, scale: float = 0.3) -> None:
    with torch.no_grad():
        for p in module.parameters():
            p.add_(torch.randn_like(p) * scale)


def _random_phase(batch: int, L: int) -> Tuple[torch.Tensor, torch.Tensor]:
    phi = torch.rand(batch, L, dtype=torch.float64) * 2 * np.pi
    return phi, torch.stack([torch.sin(phi), torch.cos(phi)], dim=-1)


# ---------------------------
# Suites
# ---------------------------

def ssm_suite(seed: int = 0, L: int = 8, d_model: int = 6) -> GradcheckReport:
    torch.manual_seed(seed)
    block = PSMambaBlock(d_model=d_model, d_inner=8, d_state=4).double()
    _perturb(block)
    X = torch.randn(2, L, d_model, dtype=torch.float64)
    M = 0.2 + torch.rand(2, L, dtype=torch.float64)
    _, Phi = _random_phase(2, L)
    upstream = torch.randn(2, L, d_model, dtype=torch.float64)
    named = [("X", X), ("M", M)] + list(block.named_parameters())
    errors = check_gradients(lambda: (block(X, M, Phi) * upstream).sum(), named, seed=seed)
    return GradcheckReport("ssm", errors, COMPONENT_TOLERANCE)


def pdcam_suite(seed: int = 0, L_m: int = 6, L_t: int = 4, d_model: int = 8,
                softmax_axes: str = "efficient") -> GradcheckReport:
    torch.manual_seed(seed)
    module = PDCAM(d_model=d_model, heads=2, softmax_axes=softmax_axes).double()
    _perturb(module)
    X = torch.randn(2, L_m, d_model, dtype=torch.float64)
    T = torch.randn(2, L_t, d_model, dtype=torch.float64)
    M = 0.2 + torch.rand(2, L_m, dtype=torch.float64)
    phi, _ = _random_phase(2, L_m)
    upstream = torch.randn(2, L_m, d_model, dtype=torch.float64)
    named = [("X", X), ("T", T), ("M", M), ("phi", phi)] + list(module.named_parameters())
    errors = check_gradients(lambda: (module(X, T, M, phi) * upstream).sum(), named, seed=seed)
    return GradcheckReport("pdcam", errors, COMPONENT_TOLERANCE)


def tiny_model_config() -> ModelConfig:
    return ModelConfig(d_motion=8, d_model=8, d_inner=16, d_state=4, heads=2, d_text=8, text_tokens=3)


def model_suite(seed: int = 0, L: int = 8, layers: int = 2, max_entries: Optional[int] = 12) -> GradcheckReport:
    torch.manual_seed(seed)
    cfg = tiny_model_config()
    model = MotionDenoiser(cfg, layers).double()
    _perturb(model, 0.1)
    x_t = torch.randn(2, L, cfg.d_motion, dtype=torch.float64)
    text = torch.randn(2, cfg.text_tokens, cfg.d_text, dtype=torch.float64)
    M = 0.2 + torch.rand(2, L, dtype=torch.float64)
    phi, Phi = _random_phase(2, L)
    cond = ConditioningBundle(t=torch.tensor([10, 500]), M=M, phi=phi, Phi=Phi, text=text)
    upstream = torch.randn(2, L, cfg.d_motion, dtype=torch.float64)
    named = [("x_t", x_t), ("M", M), ("phi", phi), ("text", text)] + list(model.named_parameters())
    errors = check_gradients(lambda: (model(x_t, cond) * upstream).sum(), named,
                             max_entries=max_entries, seed=seed)
    return GradcheckReport("model", errors, MODEL_TOLERANCE)


SUITES = {"ssm": ssm_suite, "pdcam": pdcam_suite, "model": model_suite}


def run_suites(which: str = "all", seed: int = 0) -> List[GradcheckReport]:
    names = list(SUITES) if which == "all" else [which]
    reports = []
    for name in names:
        report = SUITES[name](seed=seed)
        logger.info("gradcheck %s: max rel err %.3e (%s)", name, report.max_error,
                    "ok" if report.passed else "FAILED")
        reports.append(report)
    return reports
