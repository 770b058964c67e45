"""Dominant-period detection (FFT autocorrelation + three criteria) and phase encoding."""

import logging
from dataclasses import dataclass, field
from typing import List, NamedTuple, Optional, Tuple

import numpy as np
from scipy import fft as sp_fft

from config import PeriodicityConfig, SaliencyConfig
from errors import ArgumentError
from motion_model import MotionSequence, SegmentSpan
from saliency import KeyframeWeights, keyframe_weights

logger = logging.getLogger(__name__)

TWO_PI = 2.0 * np.pi
_ZERO_POWER_RTOL = 1e-20


class Autocorrelation(NamedTuple):
    r: np.ndarray
    zero_power: bool


class Classification(NamedTuple):
    periodic: bool
    T: int
    peak_lag: int
    peak_value: float
    mean_acf: float


@dataclass
class PeriodReport:
    span: SegmentSpan
    periodic: bool
    T: int
    peak_lag: int
    peak_value: float
    mean_acf: float
    entropy: float
    thresholds_used: Tuple[float, float, float]

    def to_report(self) -> dict:
        return {
            "start": self.span.start,
            "end": self.span.end,
            "periodic": bool(self.periodic),
            "T": int(self.T),
            "peak_lag": int(self.peak_lag),
            "peak_value": float(self.peak_value),
            "entropy": float(self.entropy),
        }


@dataclass
class PhaseTrack:
    phi: np.ndarray
    Phi: np.ndarray
    reports: List[PeriodReport] = field(default_factory=list)

    @classmethod
    def neutral(cls, L: int) -> "PhaseTrack":
        """All-zero phase and encoding, used before any motion estimate exists."""
        return cls(phi=np.zeros(L), Phi=np.zeros((L, 2)), reports=[])


# ---------------------------
# Signal primitives
# ---------------------------

def next_pow_two(n: int) -> int:
    i = 1
    while i < n:
        i <<= 1
    return i


def mean_signal(segment: np.ndarray) -> np.ndarray:
    segment = np.asarray(segment, dtype=np.float64)
    if segment.ndim == 1:
        return segment.copy()
    return segment.mean(axis=1)


def _centered(x: np.ndarray) -> Tuple[np.ndarray, bool]:
    x = np.asarray(x)
    xc = x - x.mean()
    power = float(np.dot(xc, xc))
    return xc, power <= _ZERO_POWER_RTOL * float(np.dot(x, x))


def autocorrelation_naive(x: np.ndarray) -> Autocorrelation:
    """O(L^2) biased linear ACF normalised by lag 0; reference for the FFT path."""
    xc, zero = _centered(x)
    L = xc.shape[0]
    if zero:
        return Autocorrelation(np.zeros(L, dtype=xc.dtype), True)
    r = np.array([np.dot(xc[:L - tau], xc[tau:]) for tau in range(L)])
    return Autocorrelation(r / r[0], False)


def autocorrelation_fft(x: np.ndarray) -> Autocorrelation:
    """Wiener-Khinchin ACF, zero-padded to >= 2L-1 so the correlation is linear, not circular."""
    xc, zero = _centered(x)
    L = xc.shape[0]
    if zero:
        return Autocorrelation(np.zeros(L, dtype=xc.dtype), True)
    n = next_pow_two(2 * L - 1)
    spectrum = sp_fft.rfft(xc, n=n)
    r = sp_fft.irfft(spectrum.real ** 2 + spectrum.imag ** 2, n=n)[:L]
    return Autocorrelation(r / r[0], False)


def normalized_entropy(power: np.ndarray) -> float:
    """Shannon entropy of a power spectrum over its bins, divided by log(bins)."""
    power = np.asarray(power, dtype=np.float64)
    total = power.sum()
    if total <= 0 or power.shape[0] < 2:
        return 1.0
    p = power / total
    nz = p[p > 0]
    return float(min(max(-np.sum(nz * np.log(nz)) / np.log(power.shape[0]), 0.0), 1.0))


def spectral_entropy(x: np.ndarray) -> float:
    xc, zero = _centered(x)
    if zero:
        return 1.0
    n = next_pow_two(2 * xc.shape[0] - 1)
    spectrum = sp_fft.fft(xc, n=n)
    return normalized_entropy(np.abs(spectrum) ** 2)


def classify_periodic(R: np.ndarray, H: float, cfg: Optional[PeriodicityConfig] = None) -> Classification:
    """Peak, prominence and entropy tests on the strongest local ACF maximum at lag >= 2."""
    cfg = cfg or PeriodicityConfig()
    L = R.shape[0]
    mean_acf = float(R[1:].mean()) if L > 1 else 0.0
    lags = np.arange(2, L - 1)
    if lags.size:
        is_peak = (R[lags] > R[lags - 1]) & (R[lags] >= R[lags + 1])
        lags = lags[is_peak]
    if not lags.size:
        return Classification(False, L, 0, 0.0, mean_acf)
    tau = int(lags[np.argmax(R[lags])])
    peak = float(R[tau])
    periodic = peak > cfg.theta_peak and peak - mean_acf > cfg.theta_prom and H < cfg.theta_ent
    return Classification(bool(periodic), tau if periodic else L, tau, peak, mean_acf)


# ---------------------------
# Segment / sequence analysis
# ---------------------------

def analyze_segment(segment: np.ndarray, span: SegmentSpan,
                    cfg: Optional[PeriodicityConfig] = None) -> PeriodReport:
    cfg = cfg or PeriodicityConfig()
    thresholds = (cfg.theta_peak, cfg.theta_prom, cfg.theta_ent)
    if span.length < cfg.min_length:
        return PeriodReport(span, False, span.length, 0, 0.0, 0.0, 1.0, thresholds)
    x = mean_signal(segment)
    acf = autocorrelation_fft(x)
    H = spectral_entropy(x)
    c = classify_periodic(acf.r, H, cfg)
    return PeriodReport(span, c.periodic, c.T, c.peak_lag, c.peak_value, c.mean_acf, H, thresholds)


def detect_period(seq: MotionSequence, cfg: Optional[PeriodicityConfig] = None) -> PeriodReport:
    """Analyse the whole sequence as one segment."""
    return analyze_segment(seq.frames, SegmentSpan(0, seq.length), cfg)


def keyframe_spans(L: int, keyframes: List[int]) -> List[SegmentSpan]:
    bounds = sorted({int(k) for k in keyframes if 0 < k < L})
    edges = [0] + bounds + [L]
    return [SegmentSpan(a, b) for a, b in zip(edges[:-1], edges[1:])]


def phase_track(seq: MotionSequence, kf: KeyframeWeights,
                cfg: Optional[PeriodicityConfig] = None) -> PhaseTrack:
    cfg = cfg or PeriodicityConfig()
    L = seq.length
    if kf.weights.shape[0] != L:
        raise ArgumentError(f"keyframe weights have length {kf.weights.shape[0]}, sequence has {L}")
    phi = np.empty(L)
    reports = []
    for span in keyframe_spans(L, kf.keyframes):
        report = analyze_segment(seq.frames[span.start:span.end], span, cfg)
        t_local = np.arange(span.length, dtype=np.float64)
        phi[span.start:span.end] = np.mod(TWO_PI * t_local / report.T, TWO_PI)
        reports.append(report)
    Phi = np.stack([np.sin(phi), np.cos(phi)], axis=1)
    return PhaseTrack(phi=phi, Phi=Phi, reports=reports)


def analyze_motion(seq: MotionSequence, saliency_cfg: Optional[SaliencyConfig] = None,
                   periodicity_cfg: Optional[PeriodicityConfig] = None,
                   num_segments: Optional[int] = None) -> Tuple[KeyframeWeights, PhaseTrack]:
    kf = keyframe_weights(seq, num_segments, saliency_cfg)
    return kf, phase_track(seq, kf, periodicity_cfg)


def analyze_batch(frames: np.ndarray, saliency_cfg: Optional[SaliencyConfig] = None,
                  periodicity_cfg: Optional[PeriodicityConfig] = None):
    """Per-item (M, phi, Phi) arrays for a B x L x D batch."""
    frames = np.asarray(frames, dtype=np.float64)
    B, L, _ = frames.shape
    M, phi, Phi = np.ones((B, L)), np.zeros((B, L)), np.zeros((B, L, 2))
    for b in range(B):
        kf, track = analyze_motion(MotionSequence(frames=frames[b]), saliency_cfg, periodicity_cfg)
        M[b], phi[b], Phi[b] = kf.weights, track.phi, track.Phi
    return M, phi, Phi


def analysis_report(kf: KeyframeWeights, track: PhaseTrack, whole: Optional[PeriodReport] = None) -> dict:
    report = kf.to_report()
    report["periods"] = [r.to_report() for r in track.reports]
    if whole is not None:
        report["sequence"] = whole.to_report()
    return report
