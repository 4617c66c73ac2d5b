"""Video controller features: log-chroma colour histograms, RGB-difference
motion mapped to tempo, ingested semantic tokens and timing encodings.

Frames arrive pre-decoded in the VMFR container; nothing here touches
video codecs.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensorfile

HIST_BINS = 32
HIST_RANGE = 3.0
HIST_EPS = 1e-4
COLOR_DIM = 3 * HIST_BINS * HIST_BINS  # 3072
SEMANTIC_DIM = 512
TIMING_DIM = 256

TEMPO_LO, TEMPO_HI = 90.0, 130.0
MOTION_SECONDS = 0.2  # 5 frames at 25 fps
SEMANTIC_RATE = 1.0  # tokens per second
MAX_TOKENS = 180

FRAME_MAGIC = b"VMFR"
_FRAME_HEADER = struct.Struct("<4sIIdI")


@dataclass
class FrameSequence:
    fps: float
    frames: np.ndarray  # (n, height, width, 3) uint8

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.uint8)
        if self.frames.ndim != 4 or self.frames.shape[-1] != 3:
            raise ValueError(f"frames must be (n, h, w, 3), got {self.frames.shape}")
        if not self.fps > 0:
            raise ValueError("fps must be positive")

    @property
    def height(self) -> int:
        return self.frames.shape[1]

    @property
    def width(self) -> int:
        return self.frames.shape[2]

    @property
    def duration_sec(self) -> float:
        return len(self.frames) / self.fps

    def __len__(self) -> int:
        return len(self.frames)


def write_frames(path, seq: FrameSequence) -> None:
    """VMFR: magic, width u32, height u32, fps f64, count u32, packed RGB24 frames."""
    with open(path, "wb") as f:
        f.write(_FRAME_HEADER.pack(FRAME_MAGIC, seq.width, seq.height, float(seq.fps), len(seq)))
        f.write(np.ascontiguousarray(seq.frames).tobytes())


def read_frames(path) -> FrameSequence:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < _FRAME_HEADER.size:
        raise ValueError("truncated VMFR header")
    magic, w, h, fps, n = _FRAME_HEADER.unpack_from(blob)
    if magic != FRAME_MAGIC:
        raise ValueError("not a VMFR frame file")
    size = n * h * w * 3
    if len(blob) - _FRAME_HEADER.size != size:
        raise ValueError(f"VMFR payload is {len(blob) - _FRAME_HEADER.size} bytes, expected {size}")
    frames = np.frombuffer(blob, dtype=np.uint8, offset=_FRAME_HEADER.size).reshape(n, h, w, 3)
    return FrameSequence(fps, frames.copy())


def _bin_index(x: np.ndarray, bins: int) -> np.ndarray:
    width = 2 * HIST_RANGE / bins
    idx = np.floor((np.clip(x, -HIST_RANGE, HIST_RANGE) + HIST_RANGE) / width).astype(np.int64)
    return np.clip(idx, 0, bins - 1)


def color_histogram(frame: np.ndarray, bins: int = HIST_BINS) -> np.ndarray:
    """Intensity-weighted log-chroma histogram, one bins x bins block per channel.

    For channel c with the other two channels c1, c2 each pixel lands at
    (log((c+eps)/(c1+eps)), log((c+eps)/(c2+eps))); coordinates outside
    [-3, 3] are clipped into the edge bins. Every block sums to 1.
    """
    rgb = np.asarray(frame, dtype=np.float64).reshape(-1, 3) / 255.0
    if rgb.size == 0:
        raise ValueError("empty frame")
    weight = np.sqrt((rgb ** 2).sum(axis=1))
    if weight.sum() <= 0:
        weight = np.ones_like(weight)
    logs = np.log(rgb + HIST_EPS)
    blocks = []
    for c in range(3):
        c1, c2 = [k for k in range(3) if k != c]
        u = _bin_index(logs[:, c] - logs[:, c1], bins)
        v = _bin_index(logs[:, c] - logs[:, c2], bins)
        hist = np.bincount(u * bins + v, weights=weight, minlength=bins * bins)
        blocks.append(hist / hist.sum())
    return np.concatenate(blocks)


def motion_series(seq: FrameSequence) -> np.ndarray:
    """Mean absolute RGB difference (0..255 scale) of frame pairs (t, t + interval)."""
    interval = max(1, int(round(MOTION_SECONDS * seq.fps)))
    if len(seq) < interval + 1:
        raise ValueError(f"need at least {interval + 1} frames for motion, got {len(seq)}")
    frames = seq.frames.astype(np.int16)
    diffs = np.abs(frames[interval:] - frames[:-interval])
    return diffs.reshape(len(diffs), -1).mean(axis=1)


def tempo_from_motion(motion: float, m_min: float, m_max: float,
                      lo: float = TEMPO_LO, hi: float = TEMPO_HI) -> float:
    if m_max == m_min:
        return (lo + hi) / 2
    t = lo + (motion - m_min) / (m_max - m_min) * (hi - lo)
    return float(min(hi, max(lo, t)))


def motion_tempo(seq: FrameSequence, lo: float = TEMPO_LO, hi: float = TEMPO_HI,
                 m_min: Optional[float] = None, m_max: Optional[float] = None) -> tuple[float, float]:
    """(motion_mean, tempo_bpm). Without corpus stats the video's own pair-wise
    min/max difference is used as the normalization range."""
    series = motion_series(seq)
    motion = float(series.mean())
    if m_min is None or m_max is None:
        m_min, m_max = float(series.min()), float(series.max())
    return motion, tempo_from_motion(motion, m_min, m_max, lo, hi)


def save_semantic(path, matrix: np.ndarray) -> None:
    tensorfile.save(path, np.asarray(matrix, dtype=np.float32))


def ingest_semantic(path, dim: int = SEMANTIC_DIM) -> np.ndarray:
    arr = tensorfile.load(path)
    if arr.dtype != np.float32:
        raise ValueError(f"semantic features: expected dtype float32, found {arr.dtype}")
    if arr.ndim != 2 or arr.shape[1] != dim:
        raise ValueError(f"semantic features: expected shape (T, {dim}), found {arr.shape}")
    if not np.isfinite(arr).all():
        raise ValueError("semantic features contain non-finite values")
    return arr


def timing_encoding(bar_index: int, total_bars: int, dim: int = TIMING_DIM) -> np.ndarray:
    """Sinusoids of the relative position p = bar_index / total_bars.

    Pair i uses angular frequency 10000 ** (2i / dim), so low pairs vary
    slowly across the piece and high pairs resolve neighbouring bars.
    """
    if not 0 <= bar_index < total_bars:
        raise ValueError(f"bar_index {bar_index} outside [0, {total_bars})")
    if dim % 2:
        raise ValueError("dim must be even")
    p = bar_index / total_bars
    freqs = 10000.0 ** (np.arange(0, dim, 2) / dim)
    out = np.empty(dim)
    out[0::2] = np.sin(p * freqs)
    out[1::2] = np.cos(p * freqs)
    return out


def timing_matrix(bars: np.ndarray, total_bars: int, dim: int = TIMING_DIM) -> np.ndarray:
    total = max(int(total_bars), 1)
    return np.stack([timing_encoding(min(int(b), total - 1), total, dim) for b in bars]) \
        if len(bars) else np.zeros((0, dim))


@dataclass
class FeatureBundle:
    semantic: np.ndarray = field(default_factory=lambda: np.zeros((0, SEMANTIC_DIM), np.float32))
    color: np.ndarray = field(default_factory=lambda: np.zeros((0, COLOR_DIM), np.float32))
    motion_mean: float = 0.0
    tempo_bpm: float = (TEMPO_LO + TEMPO_HI) / 2
    duration_sec: float = 0.0

    def __post_init__(self):
        self.semantic = np.asarray(self.semantic, dtype=np.float32).reshape(-1, SEMANTIC_DIM)
        self.color = np.asarray(self.color, dtype=np.float32).reshape(-1, COLOR_DIM)
        if not (np.isfinite(self.semantic).all() and np.isfinite(self.color).all()):
            raise ValueError("feature bundle contains non-finite values")
        if not TEMPO_LO <= self.tempo_bpm <= TEMPO_HI:
            raise ValueError(f"tempo {self.tempo_bpm} outside [{TEMPO_LO}, {TEMPO_HI}]")

    def n_bars(self) -> int:
        # small slack so durations computed as bars * 240 / tempo round-trip exactly
        return max(1, math.ceil(self.duration_sec * self.tempo_bpm / 60.0 / 4 - 1e-9))


def sample_times(duration_sec: float, rate: float = SEMANTIC_RATE, cap: int = MAX_TOKENS) -> np.ndarray:
    n = min(cap, max(1, int(math.ceil(duration_sec * rate))))
    return (np.arange(n) + 0.5) * duration_sec / n


def extract_bundle(seq: FrameSequence, semantic: Optional[np.ndarray] = None,
                   m_min: Optional[float] = None, m_max: Optional[float] = None) -> FeatureBundle:
    """Colour tokens at one frame per second (max 180) plus motion/tempo."""
    times = sample_times(seq.duration_sec)
    idx = np.minimum((times * seq.fps).astype(int), len(seq) - 1)
    color = np.stack([color_histogram(seq.frames[i]) for i in idx])
    motion, tempo = motion_tempo(seq, m_min=m_min, m_max=m_max)
    if semantic is None:
        semantic = np.zeros((0, SEMANTIC_DIM), np.float32)
    return FeatureBundle(semantic=semantic[:MAX_TOKENS], color=color, motion_mean=motion,
                         tempo_bpm=tempo, duration_sec=seq.duration_sec)
