"""Small synthetic corpus used by the overfit, determinism and ablation checks.

Each piece is a short diatonic progression (one chord per half bar) with a
chord-tone eighth-note melody above block triads on every beat, paired
with a synthetic video whose colour and motion vary per piece.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .midi import NoteEvent, Score
from .musprod import PieceData, prepare_piece
from .video import (SEMANTIC_DIM, FeatureBundle, FrameSequence, color_histogram, motion_series,
                    sample_times, tempo_from_motion)

TPQ = 480
FPS = 25.0
# diatonic triads of C major: (root, intervals)
TRIADS = [(0, (0, 4, 7)), (2, (0, 3, 7)), (4, (0, 3, 7)), (5, (0, 4, 7)), (7, (0, 4, 7)), (9, (0, 3, 7))]
MELODY_TONES = ((0, 1), (2, 1), (1, 2), (2, 0))  # chord-tone index of the two eighths, per beat
GENRES = ("pop", "rock")


@dataclass
class ToyPiece:
    id: str
    score: Score
    frames: FrameSequence
    semantic: np.ndarray
    bundle: FeatureBundle
    genre: str


def progressions(n: int, halves: int, seed: int = 0) -> list[tuple[int, ...]]:
    """n distinct sequences of triad indices, one per half bar."""
    rng = np.random.default_rng(seed)
    all_seqs = [s for s in itertools.product(range(len(TRIADS)), repeat=halves)
                if all(a != b for a, b in zip(s, s[1:]))]
    pick = rng.choice(len(all_seqs), size=n, replace=False)
    return [all_seqs[i] for i in sorted(pick)]


def toy_score(progression: tuple[int, ...], tempo_bpm: float) -> Score:
    notes = []
    eighth = TPQ // 2
    for half, idx in enumerate(progression):
        root, ivs = TRIADS[idx]
        tones = [root + iv for iv in ivs]
        for k in range(2):
            beat = half * 2 + k
            t = beat * TPQ
            for p in tones:
                notes.append(NoteEvent(t, TPQ, 48 + p, 64))
            for j, ti in enumerate(MELODY_TONES[beat % 4]):
                notes.append(NoteEvent(t + j * eighth, eighth, 72 + tones[ti], 64))
    return Score(ticks_per_quarter=TPQ, tempo_bpm=tempo_bpm, notes=tuple(notes))


def toy_frames(k: int, seconds: float, size: int = 16) -> FrameSequence:
    """A coloured square drifting over a tinted background; speed grows with k."""
    n = int(np.ceil(seconds * FPS)) + 6
    rng = np.random.default_rng(100 + k)
    base = rng.integers(40, 200, size=3)
    frames = np.empty((n, size, size, 3), dtype=np.uint8)
    for t in range(n):
        f = np.broadcast_to(base, (size, size, 3)).copy()
        x = int(t * (k + 1) * 0.3) % (size - 4)
        f[4:8, x:x + 4] = (255 - base)
        frames[t] = f
    return FrameSequence(FPS, frames)


def toy_corpus(n: int = 8, n_bars: int = 2, seed: int = 0) -> list[ToyPiece]:
    progs = progressions(n, n_bars * 2, seed)
    rng = np.random.default_rng(seed + 1)
    # long enough for n_bars at the slowest tempo
    frame_sets = [toy_frames(k, n_bars * 240.0 / 90.0) for k in range(n)]
    motions = [float(motion_series(f).mean()) for f in frame_sets]
    m_min, m_max = min(motions), max(motions)
    pieces = []
    for k, prog in enumerate(progs):
        frames = frame_sets[k]
        tempo = round(tempo_from_motion(motions[k], m_min, m_max), 3)
        duration = n_bars * 240.0 / tempo
        idx = np.minimum((sample_times(duration) * FPS).astype(int), len(frames) - 1)
        color = np.stack([color_histogram(frames.frames[i]) for i in idx])
        semantic = rng.normal(size=(len(idx), SEMANTIC_DIM)).astype(np.float32)
        bundle = FeatureBundle(semantic=semantic, color=color, motion_mean=motions[k],
                               tempo_bpm=tempo, duration_sec=duration)
        pieces.append(ToyPiece(f"toy{k:02d}", toy_score(prog, tempo), frames, semantic, bundle,
                               GENRES[k % len(GENRES)]))
    return pieces


def toy_dataset(n: int = 8, n_bars: int = 2, seed: int = 0) -> list[PieceData]:
    return [prepare_piece(p.score, p.bundle) for p in toy_corpus(n, n_bars, seed)]
