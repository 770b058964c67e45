"""Keyframe detection and weighting with segmented density-peaks clustering."""

import math
import logging
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
from scipy.spatial.distance import pdist, squareform

from config import SaliencyConfig
from errors import ArgumentError
from motion_model import MotionSequence, SegmentSpan

logger = logging.getLogger(__name__)

DC_FLOOR = 1e-12


@dataclass
class DpcDiagnostics:
    rho: np.ndarray
    delta: np.ndarray
    gamma: np.ndarray
    d_c: float
    keyframe_local_indices: List[int]
    span: Optional[SegmentSpan] = None

    @property
    def k(self) -> int:
        return len(self.keyframe_local_indices)


@dataclass
class KeyframeWeights:
    weights: np.ndarray
    keyframes: List[int]
    per_segment: List[DpcDiagnostics] = field(default_factory=list)

    @classmethod
    def neutral(cls, L: int) -> "KeyframeWeights":
        return cls(weights=np.ones(L), keyframes=[], per_segment=[])

    def to_report(self) -> dict:
        return {
            "keyframes": [int(k) for k in self.keyframes],
            "weights": [float(w) for w in self.weights],
            "segments": [
                {"start": d.span.start, "end": d.span.end, "d_c": float(d.d_c), "k": d.k}
                for d in self.per_segment
            ],
        }


# ---------------------------
# DPC primitives
# ---------------------------

def pairwise_sq_dist(segment: np.ndarray) -> np.ndarray:
    segment = np.asarray(segment, dtype=np.float64)
    if segment.ndim == 1:
        segment = segment[:, None]
    if segment.shape[0] < 2:
        raise ArgumentError("pairwise distances need at least 2 frames")
    return squareform(pdist(segment, metric="sqeuclidean"))


def cutoff_distance(dists: np.ndarray, fraction: float = 0.015) -> float:
    """Nearest-rank `fraction` quantile of the strictly upper-triangle distances, floored above zero."""
    if not 0.0 < fraction < 1.0:
        raise ArgumentError(f"fraction must be in (0, 1), got {fraction}")
    upper = np.sort(dists[np.triu_indices_from(dists, k=1)])
    if upper.size == 0:
        return DC_FLOOR
    rank = max(1, math.ceil(fraction * upper.size))
    d_c = float(upper[rank - 1])
    if d_c > 0:
        return d_c
    positive = upper[upper > 0]
    return float(positive[0]) if positive.size else DC_FLOOR


def local_density(dists: np.ndarray, d_c: float) -> np.ndarray:
    kernel = np.exp(-((dists / d_c) ** 2))
    np.fill_diagonal(kernel, 0.0)
    return kernel.sum(axis=1)


def separation_distance(rho: np.ndarray, dists: np.ndarray) -> np.ndarray:
    """Distance to the nearest denser frame; equal densities rank the lower index as denser.

    The densest frame gets the largest distance in the segment.
    """
    M = rho.shape[0]
    if dists.shape != (M, M):
        raise ArgumentError(f"rho has length {M} but dists has shape {dists.shape}")
    idx = np.arange(M)
    denser = (rho[None, :] > rho[:, None]) | ((rho[None, :] == rho[:, None]) & (idx[None, :] < idx[:, None]))
    masked = np.where(denser, dists, np.inf)
    delta = masked.min(axis=1)
    top = ~denser.any(axis=1)
    delta[top] = dists.max()
    return delta


def elbow_count(sorted_gamma: np.ndarray) -> int:
    """Index of the point farthest below the first-to-last chord of the descending curve."""
    n = sorted_gamma.shape[0]
    if n <= 2:
        return 1
    x = np.arange(n, dtype=np.float64) / (n - 1)
    span = sorted_gamma[0] - sorted_gamma[-1]
    y = (sorted_gamma - sorted_gamma[-1]) / span if span > 0 else np.zeros(n)
    # chord from (0, 1) to (1, 0): distance is proportional to 1 - x - y
    return int(np.argmax(1.0 - x - y))


def detect_keyframes(segment: np.ndarray, fraction: float = 0.015) -> DpcDiagnostics:
    dists = pairwise_sq_dist(segment)
    M = dists.shape[0]
    d_c = cutoff_distance(dists, fraction)
    rho = local_density(dists, d_c)
    delta = separation_distance(rho, dists)
    gamma = rho * delta
    order = np.argsort(-gamma, kind="stable")
    k = min(max(elbow_count(gamma[order]), 1), math.ceil(M / 4))
    chosen = sorted(int(i) for i in order[:k])
    return DpcDiagnostics(rho=rho, delta=delta, gamma=gamma, d_c=d_c, keyframe_local_indices=chosen)


# ---------------------------
# Sequence-level weights
# ---------------------------

def default_num_segments(L: int) -> int:
    return max(1, math.ceil(L / 32))


def segment_spans(L: int, N: int) -> List[SegmentSpan]:
    """N contiguous spans of floor(L/N) frames, the last one absorbing the remainder."""
    if not 1 <= N <= L // 2:
        raise ArgumentError(f"num_segments must lie in [1, {L // 2}] for L={L}, got {N}")
    size = L // N
    return [SegmentSpan(i * size, (i + 1) * size if i < N - 1 else L) for i in range(N)]


def keyframe_weights(seq: MotionSequence, num_segments: Optional[int] = None,
                     cfg: Optional[SaliencyConfig] = None) -> KeyframeWeights:
    cfg = cfg or SaliencyConfig()
    L = seq.length
    N = num_segments if num_segments is not None else cfg.num_segments
    if N is None:
        N = default_num_segments(L)
    spans = segment_spans(L, N)

    per_segment = []
    keyframes, scores = [], []
    for span in spans:
        diag = detect_keyframes(seq.frames[span.start:span.end], cfg.fraction)
        diag.span = span
        per_segment.append(diag)
        for i in diag.keyframe_local_indices:
            keyframes.append(span.start + i)
            scores.append(diag.gamma[i])

    weights = np.ones(L)
    scores = np.asarray(scores)
    g_min, g_max = scores.min(), scores.max()
    if g_max > g_min:
        normalized = (scores - g_min) / (g_max - g_min)
        if cfg.weight_mode == "one_plus_gamma":
            normalized = 1.0 + normalized
    else:
        # equal scores: never weight a keyframe below an ordinary frame
        normalized = np.ones_like(scores)
    weights[keyframes] = normalized

    logger.debug("L=%d segments=%d keyframes=%d", L, N, len(keyframes))
    return KeyframeWeights(weights=weights, keyframes=keyframes, per_segment=per_segment)
