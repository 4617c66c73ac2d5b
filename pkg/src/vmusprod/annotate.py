"""Musical annotations derived from a quantized score.

Melody/accompaniment split (skyline), per-beat chord labels from a fixed
template set, Krumhansl-Schmuckler key finding, key normalization and the
metric beat grid.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .midi import NoteEvent, Score

PITCH_NAMES = ["C", "C#", "D", "D#", "E", "F", "F#", "G", "G#", "A", "A#", "B"]

# declaration order doubles as the tie-break order
QUALITIES: dict[str, tuple[int, ...]] = {
    "maj": (0, 4, 7),
    "min": (0, 3, 7),
    "dim": (0, 3, 6),
    "aug": (0, 4, 8),
    "sus2": (0, 2, 7),
    "sus4": (0, 5, 7),
    "maj7": (0, 4, 7, 11),
    "min7": (0, 3, 7, 10),
    "dom7": (0, 4, 7, 10),
    "halfdim7": (0, 3, 6, 10),
}
QUALITY_NAMES = list(QUALITIES)
QUALITY_SUFFIX = {
    "maj": "M", "min": "m", "dim": "dim", "aug": "aug", "sus2": "sus2",
    "sus4": "sus4", "maj7": "M7", "min7": "m7", "dom7": "7", "halfdim7": "m7b5",
}

MATCH_WEIGHT = 1.0
NON_CHORD_PENALTY = -1.0
ROOT_BONUS = 0.5

# Krumhansl & Kessler (1982) probe-tone ratings, tonic first.
KK_MAJOR = np.array([6.35, 2.23, 3.48, 2.33, 4.38, 4.09, 2.52, 5.19, 2.39, 3.66, 2.29, 2.88])
KK_MINOR = np.array([6.33, 2.68, 3.52, 5.38, 2.60, 3.53, 2.54, 4.75, 3.98, 2.69, 3.34, 3.17])

MAJOR, MINOR = "major", "minor"
REFERENCE_TONIC = {MAJOR: 0, MINOR: 9}


@dataclass(frozen=True)
class ChordSymbol:
    """One beat's chord label. ``root is None`` marks a rest (nothing sounding)."""

    root: Optional[int]
    quality: Optional[str]
    bar_index: int = 0
    beat_index: int = 0

    def __post_init__(self):
        if (self.root is None) != (self.quality is None):
            raise ValueError("root and quality must both be set or both be None")
        if self.root is not None and not 0 <= self.root < 12:
            raise ValueError(f"root {self.root} out of range")
        if self.quality is not None and self.quality not in QUALITIES:
            raise ValueError(f"unknown quality {self.quality!r}")
        if not 0 <= self.beat_index < 4 or self.bar_index < 0:
            raise ValueError("bad bar/beat index")

    @property
    def is_rest(self) -> bool:
        return self.root is None

    @property
    def chroma(self) -> tuple[int, ...]:
        bits = [0] * 12
        if not self.is_rest:
            for iv in QUALITIES[self.quality]:
                bits[(self.root + iv) % 12] = 1
        return tuple(bits)

    @property
    def name(self) -> str:
        if self.is_rest:
            return "N"
        return PITCH_NAMES[self.root] + QUALITY_SUFFIX[self.quality]

    def transposed(self, semitones: int) -> "ChordSymbol":
        if self.is_rest:
            return self
        return replace(self, root=(self.root + semitones) % 12)


@dataclass(frozen=True)
class Tonality:
    tonic: int
    mode: str

    def __post_init__(self):
        if not 0 <= self.tonic < 12 or self.mode not in (MAJOR, MINOR):
            raise ValueError(f"invalid tonality {self.tonic} {self.mode}")

    @property
    def name(self) -> str:
        return f"{PITCH_NAMES[self.tonic]} {self.mode}"


@dataclass(frozen=True)
class TrackSplit:
    melody: Score
    accompaniment: Score


def skyline_split(score: Score) -> TrackSplit:
    """Highest note at each onset becomes melody; everything else is accompaniment.

    Melody notes are cut short at the next melody onset so the line stays
    monophonic. Accompaniment notes are untouched.
    """
    by_onset: dict[int, list[NoteEvent]] = defaultdict(list)
    for n in score.notes:
        by_onset[n.onset].append(n)
    onsets = sorted(by_onset)

    melody, accomp = [], []
    for i, t in enumerate(onsets):
        group = by_onset[t]
        top = max(group, key=lambda n: (n.pitch, n.duration, n.velocity))
        rest = list(group)
        rest.remove(top)
        accomp.extend(rest)
        if i + 1 < len(onsets):
            top = replace(top, duration=min(top.duration, onsets[i + 1] - t))
        melody.append(top)
    return TrackSplit(score.with_notes(melody), score.with_notes(accomp))


def beat_grid(score: Score) -> list[tuple[int, int, int]]:
    """(bar_index, beat_index, tick) for every beat up to the last note offset,
    padded out to a whole bar."""
    if not score.is_four_four:
        raise ValueError(f"unsupported meter {score.time_signature}")
    tpq = score.ticks_per_quarter
    end = score.end_tick
    n_bars = -(-end // (4 * tpq))
    return [(b, k, (4 * b + k) * tpq) for b in range(n_bars) for k in range(4)]


def score_chord(pcs: set[int], root: int, quality: str) -> float:
    template = {(root + iv) % 12 for iv in QUALITIES[quality]}
    matched = len(pcs & template)
    extra = len(pcs - template)
    return MATCH_WEIGHT * matched + NON_CHORD_PENALTY * extra + (ROOT_BONUS if root in pcs else 0.0)


def best_chord(pcs: set[int]) -> tuple[Optional[int], Optional[str]]:
    if not pcs:
        return None, None
    best, best_score = (None, None), -np.inf
    for root in range(12):
        for q in QUALITY_NAMES:
            s = score_chord(pcs, root, q)
            if s > best_score:  # strict: first (lowest root, earliest quality) wins ties
                best, best_score = (root, q), s
    return best


def extract_chords(score: Score) -> list[ChordSymbol]:
    """One chord label per beat of :func:`beat_grid`."""
    grid = beat_grid(score)
    tpq = score.ticks_per_quarter
    sounding: list[set[int]] = [set() for _ in grid]
    for n in score.notes:
        first = n.onset // tpq
        last = (n.offset - 1) // tpq
        for b in range(first, min(last, len(grid) - 1) + 1):
            sounding[b].add(n.pitch % 12)
    out = []
    for (bar, beat, _), pcs in zip(grid, sounding):
        root, q = best_chord(pcs)
        out.append(ChordSymbol(root, q, bar, beat))
    return out


def pitch_class_histogram(score: Score) -> np.ndarray:
    hist = np.zeros(12)
    for n in score.notes:
        hist[n.pitch % 12] += n.duration
    return hist


def key_profiles() -> list[tuple[Tonality, np.ndarray]]:
    """24 rotated profiles, majors first then minors, each by ascending tonic."""
    out = []
    for mode, base in ((MAJOR, KK_MAJOR), (MINOR, KK_MINOR)):
        for tonic in range(12):
            out.append((Tonality(tonic, mode), np.roll(base, tonic)))
    return out


def _pearson(x: np.ndarray, y: np.ndarray) -> float:
    xc, yc = x - x.mean(), y - y.mean()
    denom = np.sqrt((xc * xc).sum() * (yc * yc).sum())
    return float((xc * yc).sum() / denom) if denom > 0 else 0.0


def detect_tonality(score: Score) -> Tonality:
    if not score.notes:
        raise ValueError("no pitch content")
    hist = pitch_class_histogram(score)
    best, best_r = None, -np.inf
    for key, profile in key_profiles():
        r = _pearson(hist, profile)
        if r > best_r:
            best, best_r = key, r
    return best


def reference_offset(tonality: Tonality) -> int:
    """Signed shift in [-5, 6] moving the tonic onto C (major) or A (minor)."""
    diff = (REFERENCE_TONIC[tonality.mode] - tonality.tonic) % 12
    return diff - 12 if diff > 6 else diff


def transpose(score: Score, semitones: int) -> Score:
    notes = []
    for n in score.notes:
        p = n.pitch + semitones
        while p < 0:
            p += 12
        while p > 127:
            p -= 12
        notes.append(replace(n, pitch=p))
    return score.with_notes(notes)


def transpose_to_reference(score: Score, tonality: Tonality) -> Score:
    return transpose(score, reference_offset(tonality))
