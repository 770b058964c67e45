"""Toy text-to-motion training: periodic "walk"/"run" classes and an AdamW x0-MSE loop."""

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F

from checkpoint import Checkpoint, pack_checkpoint
from config import CliConfig
from denoiser import ConditioningBundle, MotionDenoiser, beta_schedule, class_text, q_sample, sample
from errors import ArgumentError, DivergenceError
from motion_model import MotionSequence, synth_periodic_motion
from periodicity import analyze_batch, detect_period

logger = logging.getLogger(__name__)

CLASS_PERIODS = {0: 16, 1: 8}
CLASS_NAMES = {0: "walk", 1: "run"}


def toy_dataset(num_sequences: int = 256, L: int = 64, D: int = 8, seed: int = 0,
                noise_sigma: float = 0.05, phase_spread: float = 0.25) -> List[Tuple[MotionSequence, int]]:
    """Alternating classes with a random phase per item."""
    rng = np.random.default_rng(seed)
    items = []
    for i in range(num_sequences):
        class_id = i % len(CLASS_PERIODS)
        seq = synth_periodic_motion(L, D, CLASS_PERIODS[class_id], amp=1.0, noise_sigma=noise_sigma,
                                    seed=int(rng.integers(2 ** 31)), phase=float(rng.uniform(0, 2 * np.pi)),
                                    phase_spread=phase_spread)
        items.append((seq, class_id))
    return items


@dataclass
class TrainResult:
    model: MotionDenoiser
    losses: List[float] = field(default_factory=list)
    cfg: Optional[CliConfig] = None

    @property
    def checkpoint(self) -> Checkpoint:
        return pack_checkpoint(self.model, self.cfg)


def _stack(dataset: Sequence[Tuple[MotionSequence, int]]):
    if not dataset:
        raise ArgumentError("training dataset is empty")
    shapes = {seq.frames.shape for seq, _ in dataset}
    if len(shapes) != 1:
        raise ArgumentError(f"training sequences must share one L x D shape, got {sorted(shapes)}")
    frames = np.stack([seq.frames for seq, _ in dataset])
    classes = np.array([c for _, c in dataset], dtype=np.int64)
    return frames, classes


def train_toy(dataset: Sequence[Tuple[MotionSequence, int]], cfg: Optional[CliConfig] = None,
              params_init: Optional[MotionDenoiser] = None, seed: int = 0) -> TrainResult:
    cfg = cfg or CliConfig()
    frames_np, classes_np = _stack(dataset)
    if frames_np.shape[2] != cfg.model.d_motion:
        raise ArgumentError(f"dataset has D={frames_np.shape[2]} but model.d_motion={cfg.model.d_motion}")

    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed)
    model = params_init or MotionDenoiser(cfg.model, cfg.diffusion.layers)
    dtype = next(model.parameters()).dtype

    # conditioning of the clean sequences never changes, so compute it once
    M, phi, Phi = (torch.from_numpy(a).to(dtype) for a in analyze_batch(frames_np, cfg.saliency, cfg.periodicity))
    frames = torch.from_numpy(frames_np).to(dtype)
    classes = torch.from_numpy(classes_np)
    texts = torch.stack([class_text(int(c), cfg.model, 1, dtype)[0] for c in range(int(classes.max()) + 1)])

    schedule = beta_schedule(cfg.diffusion)
    tc = cfg.train
    optimizer = torch.optim.AdamW(model.parameters(), lr=tc.lr, weight_decay=tc.weight_decay)
    lr_schedule = torch.optim.lr_scheduler.StepLR(optimizer, step_size=tc.lr_decay_every, gamma=tc.lr_decay)

    model.train()
    losses = []
    N = frames.shape[0]
    for step in range(tc.train_steps):
        idx = torch.randint(N, (tc.batch_size,), generator=gen)
        x0 = frames[idx]
        t = torch.randint(cfg.diffusion.steps, (tc.batch_size,), generator=gen)
        noise = torch.randn(x0.shape, generator=gen, dtype=dtype)
        drop = torch.rand(tc.batch_size, generator=gen) < cfg.diffusion.cfg_mask_prob
        cond = ConditioningBundle(t=t, M=M[idx], phi=phi[idx], Phi=Phi[idx],
                                  text=texts[classes[idx]], drop_text=drop)
        # same gating as the sampler, plus randomly chosen bootstrap items
        neutral = schedule.alpha_bars[t] < cfg.diffusion.cond_min_alpha_bar
        if tc.neutral_cond_prob > 0:
            neutral = neutral | (torch.rand(tc.batch_size, generator=gen) < tc.neutral_cond_prob)
        cond = cond.neutralized(neutral)

        loss = F.mse_loss(model(q_sample(x0, t, noise, schedule), cond), x0)
        if not torch.isfinite(loss):
            raise DivergenceError(f"loss became {loss.item()} at step {step} (lr={lr_schedule.get_last_lr()[0]:.2e})")

        optimizer.zero_grad()
        loss.backward()
        torch.nn.utils.clip_grad_norm_(model.parameters(), tc.grad_clip)
        optimizer.step()
        lr_schedule.step()
        losses.append(float(loss.item()))
        if step % tc.log_every == 0 or step == tc.train_steps - 1:
            logger.info("step %d loss %.5f", step, losses[-1])

    return TrainResult(model=model, losses=losses, cfg=cfg)


def write_loss_curve(losses: Sequence[float], path: Union[str, Path]) -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["step", "loss"])
        for step, loss in enumerate(losses):
            writer.writerow([step, repr(float(loss))])


# ---------------------------
# Rhythm recovery
# ---------------------------

@dataclass
class RhythmRecovery:
    """Detected whole-sequence periods of sampled motions, per class."""

    periods: Dict[int, List[int]]
    tolerance: int = 2
    min_hit_rate: float = 0.8

    def hit_rate(self, class_id: int) -> float:
        target = CLASS_PERIODS[class_id]
        found = self.periods[class_id]
        return sum(abs(T - target) <= self.tolerance for T in found) / len(found)

    def median(self, class_id: int) -> float:
        return float(np.median(self.periods[class_id]))

    @property
    def medians_disjoint(self) -> bool:
        """Class medians keep the order of the class periods and sit nearest their own period."""
        ordered = sorted(self.periods, key=lambda c: CLASS_PERIODS[c])
        medians = [self.median(c) for c in ordered]
        if any(a >= b for a, b in zip(medians, medians[1:])):
            return False
        return all(min(CLASS_PERIODS, key=lambda k: abs(CLASS_PERIODS[k] - m)) == c
                   for c, m in zip(ordered, medians))

    @property
    def passed(self) -> bool:
        return self.medians_disjoint and all(self.hit_rate(c) >= self.min_hit_rate for c in self.periods)

    def rows(self) -> List[list]:
        return [[c, CLASS_PERIODS[c], f"{self.hit_rate(c):.3f}", self.median(c)] for c in sorted(self.periods)]


def rhythm_recovery(model: MotionDenoiser, cfg: Optional[CliConfig] = None, num_samples: int = 50,
                    L: int = 64, seed: int = 0, tolerance: int = 2) -> RhythmRecovery:
    """Sample every toy class and run whole-sequence period detection on each sample."""
    if num_samples < 1:
        raise ArgumentError("num_samples must be >= 1")
    cfg = cfg or CliConfig()
    periods = {}
    for class_id in CLASS_PERIODS:
        seqs = sample(class_id, L, cfg.diffusion, model, seed=seed + class_id, num_samples=num_samples,
                      saliency_cfg=cfg.saliency, periodicity_cfg=cfg.periodicity)
        periods[class_id] = [detect_period(seq, cfg.periodicity).T for seq in seqs]
        logger.info("class %d (%s): median detected period %.1f", class_id, CLASS_NAMES[class_id],
                    float(np.median(periods[class_id])))
    return RhythmRecovery(periods, tolerance)
