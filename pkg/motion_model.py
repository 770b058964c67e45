"""Motion data types, the csv/mbin file formats and synthetic generators."""

import csv
import math
import struct
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np

from errors import ArgumentError, FormatError, ValidationError

logger = logging.getLogger(__name__)

MBIN_MAGIC = b"T2MM"
_MBIN_HEADER = struct.Struct("<4sIII")
FORMATS = ("csv", "mbin")


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.array(array, dtype=np.float64, copy=True)
    array.setflags(write=False)
    return array


# ---------------------------
# Domain types
# ---------------------------

@dataclass(frozen=True)
class MotionSequence:
    """L x D frame matrix plus frame-rate metadata."""

    frames: np.ndarray
    fps: float = 20.0
    name: str = "motion"

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float64)
        if frames.ndim == 1:
            frames = frames[:, None]
        if frames.ndim != 2:
            raise ValidationError(f"frames must be a 2-D matrix, got shape {frames.shape}")
        if frames.shape[0] < 2:
            raise ValidationError(f"a motion sequence needs at least 2 frames, got {frames.shape[0]}")
        if frames.shape[1] < 1:
            raise ValidationError("a motion sequence needs at least 1 feature dimension")
        if not np.all(np.isfinite(frames)):
            raise ValidationError("motion frames contain NaN or Inf")
        if not (self.fps > 0 and math.isfinite(self.fps)):
            raise ValidationError(f"fps must be positive, got {self.fps}")
        object.__setattr__(self, "frames", _frozen(frames))
        object.__setattr__(self, "fps", float(self.fps))

    @property
    def length(self) -> int:
        return self.frames.shape[0]

    @property
    def dims(self) -> int:
        return self.frames.shape[1]


@dataclass(frozen=True)
class TextEmbedding:
    tokens: np.ndarray
    class_id: int

    def __post_init__(self):
        tokens = np.asarray(self.tokens, dtype=np.float64)
        if tokens.ndim != 2 or tokens.shape[0] < 1:
            raise ValidationError(f"text tokens must be an L_t x D matrix with L_t >= 1, got {tokens.shape}")
        object.__setattr__(self, "tokens", _frozen(tokens))


@dataclass(frozen=True)
class SegmentSpan:
    start: int
    end: int

    def __post_init__(self):
        if not 0 <= self.start < self.end:
            raise ArgumentError(f"invalid segment [{self.start}, {self.end})")

    @property
    def length(self) -> int:
        return self.end - self.start


# ---------------------------
# File formats
# ---------------------------

def detect_format(path: Union[str, Path]) -> str:
    suffix = Path(path).suffix.lower().lstrip(".")
    if suffix not in FORMATS:
        raise FormatError(f"cannot infer motion format from {path!s}; use .csv or .mbin")
    return suffix


def _load_csv(path: Path) -> MotionSequence:
    with path.open("r", encoding="utf-8", newline="") as f:
        rows = list(csv.reader(f))
    if not rows:
        raise FormatError(f"{path}: empty file")
    header = rows[0]
    if len(header) < 2:
        raise FormatError(f"{path}: header must be 'fps,<column names>'")
    try:
        fps = float(header[0])
    except ValueError:
        raise FormatError(f"{path}: first header cell must be the frame rate, got {header[0]!r}")
    D = len(header) - 1
    body = [r for r in rows[1:] if r]
    values = []
    for i, row in enumerate(body, start=2):
        if len(row) != D:
            raise FormatError(f"{path}:{i}: expected {D} values, got {len(row)}")
        try:
            values.append([float(v) for v in row])
        except ValueError as e:
            raise FormatError(f"{path}:{i}: {e}")
    frames = np.array(values, dtype=np.float64).reshape(len(values), D)
    return MotionSequence(frames=frames, fps=fps, name=path.stem)


def _load_mbin(path: Path) -> MotionSequence:
    blob = path.read_bytes()
    if len(blob) < _MBIN_HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, L, D, fps_milli = _MBIN_HEADER.unpack_from(blob)
    if magic != MBIN_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    expected = _MBIN_HEADER.size + 4 * L * D
    if len(blob) != expected:
        raise FormatError(f"{path}: expected {expected} bytes for {L}x{D}, got {len(blob)}")
    payload = np.frombuffer(blob, dtype="<f4", offset=_MBIN_HEADER.size)
    return MotionSequence(frames=payload.reshape(L, D), fps=fps_milli / 1000.0, name=path.stem)


def load_motion(path: Union[str, Path], format: Optional[str] = None) -> MotionSequence:
    path = Path(path)
    format = format or detect_format(path)
    if format == "csv":
        seq = _load_csv(path)
    elif format == "mbin":
        seq = _load_mbin(path)
    else:
        raise ArgumentError(f"unknown motion format {format!r}")
    logger.debug("loaded %s (%dx%d, fps=%g)", path, seq.length, seq.dims, seq.fps)
    return seq


def save_motion(seq: MotionSequence, path: Union[str, Path], format: Optional[str] = None) -> None:
    path = Path(path)
    format = format or detect_format(path)
    if format == "csv":
        with path.open("w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f)
            writer.writerow([repr(seq.fps)] + [f"d{j}" for j in range(seq.dims)])
            for row in seq.frames:
                writer.writerow([repr(float(v)) for v in row])
    elif format == "mbin":
        header = _MBIN_HEADER.pack(MBIN_MAGIC, seq.length, seq.dims, int(round(seq.fps * 1000)))
        payload = np.ascontiguousarray(seq.frames, dtype="<f4").tobytes()
        path.write_bytes(header + payload)
    else:
        raise ArgumentError(f"unknown motion format {format!r}")
    logger.debug("wrote %s", path)


# ---------------------------
# Generators
# ---------------------------

def synth_periodic_motion(L: int, D: int, T: float, amp: float = 1.0, noise_sigma: float = 0.0,
                          seed: int = 0, phase: float = 0.0, phase_spread: float = 1.0,
                          fps: float = 20.0) -> MotionSequence:
    """frame(t, d) = amp * sin(2 pi t / T + phase + phase_spread * 2 pi d / D) + noise.

    With phase_spread = 1 and D >= 2 the per-frame mean over features is zero,
    so callers that analyse the feature mean should pass a smaller spread.
    """
    if T < 2:
        raise ArgumentError(f"period must be >= 2 frames, got {T}")
    if L < 2 * T:
        raise ArgumentError(f"L={L} < 2T={2 * T}: period is unrecoverable")
    if D < 1:
        raise ArgumentError("D must be >= 1")
    if noise_sigma < 0:
        raise ArgumentError("noise_sigma must be >= 0")
    t = np.arange(L, dtype=np.float64)[:, None]
    d = np.arange(D, dtype=np.float64)[None, :]
    frames = amp * np.sin(2.0 * np.pi * t / T + phase + phase_spread * 2.0 * np.pi * d / D)
    if noise_sigma > 0:
        rng = np.random.default_rng(seed)
        frames = frames + rng.normal(0.0, noise_sigma, size=(L, D))
    return MotionSequence(frames=frames, fps=fps, name=f"synth_T{T:g}")


def synth_white_noise(L: int, D: int, sigma: float = 1.0, seed: int = 0, fps: float = 20.0) -> MotionSequence:
    if L < 2 or D < 1 or sigma <= 0:
        raise ArgumentError("white noise needs L >= 2, D >= 1, sigma > 0")
    rng = np.random.default_rng(seed)
    return MotionSequence(frames=rng.normal(0.0, sigma, size=(L, D)), fps=fps, name="white_noise")


def synth_plateau_segment(plateaus: int, length: int, D: int, separation: float, noise: float,
                          seed: int = 0) -> np.ndarray:
    """Consecutive blocks of near-identical frames; block k sits k * separation along a random axis."""
    if plateaus < 1 or length < 1 or D < 1:
        raise ArgumentError("plateaus, length and D must be >= 1")
    rng = np.random.default_rng(seed)
    axis = rng.normal(size=D)
    axis /= np.linalg.norm(axis)
    centers = np.arange(plateaus, dtype=np.float64)[:, None] * separation * axis[None, :]
    frames = np.repeat(centers, length, axis=0)
    return frames + rng.normal(0.0, noise, size=frames.shape)


def stub_text_embedding(class_id: int, L_t: int, D: int, seed: int = 0) -> TextEmbedding:
    """Deterministic stand-in for an encoded prompt: unit-norm Gaussian rows keyed by class and row."""
    if L_t < 1 or D < 1:
        raise ArgumentError("L_t and D must be >= 1")
    if class_id < 0:
        raise ArgumentError("class_id must be non-negative")
    rows = []
    for r in range(L_t):
        row = np.random.default_rng([seed, class_id, r]).normal(size=D)
        rows.append(row / np.linalg.norm(row))
    return TextEmbedding(tokens=np.stack(rows), class_id=class_id)
