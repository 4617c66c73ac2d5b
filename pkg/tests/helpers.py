"""Shared generators for the test suite."""

from __future__ import annotations

import numpy as np
from hypothesis import strategies as st

from vmusprod.midi import NoteEvent, Score

TPQ = 480
STEP = TPQ // 4


def random_score(rng: np.random.Generator, n_notes: int | None = None, bars: int = 4, grid: bool = True,
                 tpq: int = TPQ, max_dur_steps: int = 32, pitch_lo: int = 21, pitch_hi: int = 108,
                 tempo: float = 120.0) -> Score:
    """Random 4/4 score; on the sixteenth grid when ``grid`` is set."""
    n = int(rng.integers(1, 40)) if n_notes is None else n_notes
    step = tpq // 4
    notes = []
    for _ in range(n):
        if grid:
            onset = int(rng.integers(0, bars * 16)) * step
            dur = int(rng.integers(1, max_dur_steps + 1)) * step
        else:
            onset = int(rng.integers(0, bars * 4 * tpq))
            dur = int(rng.integers(1, 2 * tpq))
        notes.append(NoteEvent(onset, dur, int(rng.integers(pitch_lo, pitch_hi + 1)), int(rng.integers(1, 128))))
    return Score(ticks_per_quarter=tpq, tempo_bpm=tempo, notes=tuple(notes))


def polyphonic_score(rng: np.random.Generator, bars: int = 4) -> Score:
    """Chordal texture: several onsets with 1-4 simultaneous notes each."""
    notes = []
    for pos in sorted(set(rng.integers(0, bars * 16, size=int(rng.integers(1, 24))).tolist())):
        for p in rng.choice(np.arange(36, 96), size=int(rng.integers(1, 5)), replace=False):
            notes.append(NoteEvent(pos * STEP, int(rng.integers(1, 9)) * STEP, int(p), 64))
    return Score(notes=tuple(notes))


@st.composite
def scores(draw, max_notes: int = 30, grid: bool = False, max_tick: int = 20000, pitch_lo: int = 0, pitch_hi: int = 127):
    tpq = draw(st.sampled_from([96, 120, 240, 480, 960]))
    n = draw(st.integers(0, max_notes))
    notes = []
    for _ in range(n):
        if grid:
            step = tpq // 4
            onset = draw(st.integers(0, 64)) * step
            dur = draw(st.integers(1, 32)) * step
        else:
            onset = draw(st.integers(0, max_tick))
            dur = draw(st.integers(1, 4000))
        notes.append(NoteEvent(onset, dur, draw(st.integers(pitch_lo, pitch_hi)), draw(st.integers(1, 127))))
    # tempos with a whole number of microseconds per quarter survive SMF exactly
    tempo = draw(st.sampled_from([60.0, 75.0, 100.0, 120.0, 125.0, 150.0]))
    return Score(ticks_per_quarter=tpq, tempo_bpm=tempo, notes=tuple(notes))


def max_same_pitch_overlap(score: Score) -> int:
    """Largest number of notes of one pitch sounding at the same instant."""
    best = 0
    for pitch in {n.pitch for n in score.notes}:
        edges = sorted([(n.onset, 1) for n in score.notes if n.pitch == pitch] +
                       [(n.offset, -1) for n in score.notes if n.pitch == pitch], key=lambda e: (e[0], e[1]))
        depth = 0
        for _, d in edges:
            depth += d
            best = max(best, depth)
    return best
