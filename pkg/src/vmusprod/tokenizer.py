"""Compound-word token codec for the chord, melody and accompaniment stages.

A token is one column of stacked attributes (type, barbeat, pitch,
duration, root, quality) plus its absolute bar/beat position. Bars are
4/4 with 16 sixteenth positions; barbeat 0 marks a bar line and 1..16 a
position inside the bar.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, replace
from typing import Iterable, Optional, Sequence

import numpy as np

from .annotate import QUALITIES, QUALITY_NAMES, ChordSymbol, TrackSplit
from .midi import DEFAULT_TPQ, DEFAULT_VELOCITY, NoteEvent, Score

PAD, BOS, EOS, RHYTHM, NOTE, CHORD = "PAD", "BOS", "EOS", "Rhythm", "Note", "Chord"
NO_CHORD = "N"
POSITIONS_PER_BAR = 16
POSITIONS_PER_BEAT = 4
MAX_DURATION = 32

ATTRIBUTES = ("type", "barbeat", "pitch", "duration", "root", "quality")
# id 0 of every table is "not applicable" and is ignored by the loss
VOCAB: dict[str, list] = {
    "type": [PAD, BOS, EOS, RHYTHM, NOTE, CHORD],
    "barbeat": [None] + list(range(POSITIONS_PER_BAR + 1)),
    "pitch": [None] + list(range(128)),
    "duration": [None] + list(range(1, MAX_DURATION + 1)),
    "root": [None] + list(range(12)) + [NO_CHORD],
    "quality": [None] + QUALITY_NAMES + [NO_CHORD],
}
_INDEX = {a: {v: i for i, v in enumerate(vals)} for a, vals in VOCAB.items()}

STAGE_ATTRIBUTES = {
    "chord": ("type", "barbeat", "root", "quality"),
    "melody": ("type", "barbeat", "pitch", "duration"),
    "accomp": ("type", "barbeat", "pitch", "duration"),
}

TEMPO_LO, TEMPO_HI = 90, 130
N_TEMPO_BINS = TEMPO_HI - TEMPO_LO + 2  # 41 in-range bins + 1 out-of-range


class TokenError(ValueError):
    def __init__(self, message: str, index: Optional[int] = None):
        if index is not None:
            message = f"{message} (token {index})"
        super().__init__(message)
        self.index = index


@dataclass(frozen=True)
class CompoundToken:
    type: str
    barbeat: Optional[int] = None
    pitch: Optional[int] = None
    duration: Optional[int] = None
    root: Optional[object] = None
    quality: Optional[str] = None
    bar_index: int = 0
    beat_index: int = 0

    @property
    def is_bar(self) -> bool:
        return self.type == RHYTHM and self.barbeat == 0

    @property
    def is_position(self) -> bool:
        return self.type == RHYTHM and bool(self.barbeat)

    @property
    def chroma(self) -> tuple[int, ...]:
        if self.type != CHORD or self.root == NO_CHORD:
            return (0,) * 12
        return chroma_vector(ChordSymbol(self.root, self.quality))

    def chord_symbol(self) -> ChordSymbol:
        if self.root == NO_CHORD:
            return ChordSymbol(None, None, self.bar_index, self.beat_index)
        return ChordSymbol(self.root, self.quality, self.bar_index, self.beat_index)

    def __str__(self) -> str:
        if self.type == RHYTHM:
            return "Bar" if self.is_bar else f"Pos{self.barbeat}"
        if self.type == NOTE:
            return f"Note({self.pitch},{self.duration})"
        if self.type == CHORD:
            return f"Chord({self.chord_symbol().name})"
        return self.type


def bos() -> CompoundToken:
    return CompoundToken(BOS)


def eos(bar: int = 0) -> CompoundToken:
    return CompoundToken(EOS, bar_index=bar)


def bar_token(bar: int) -> CompoundToken:
    return CompoundToken(RHYTHM, barbeat=0, bar_index=bar)


def position_token(bar: int, pos: int) -> CompoundToken:
    """``pos`` is 0-based within the bar; the stored barbeat is 1-based."""
    return CompoundToken(RHYTHM, barbeat=pos + 1, bar_index=bar, beat_index=pos // POSITIONS_PER_BEAT)


def chord_token(chord: ChordSymbol, bar: int, beat: int) -> CompoundToken:
    if chord.is_rest:
        return CompoundToken(CHORD, root=NO_CHORD, quality=NO_CHORD, bar_index=bar, beat_index=beat)
    return CompoundToken(CHORD, root=chord.root, quality=chord.quality, bar_index=bar, beat_index=beat)


def chroma_vector(chord: ChordSymbol) -> tuple[int, ...]:
    """12-bit pitch-class activation of the chord template; all zeros for a rest."""
    return chord.chroma


# ---------------------------------------------------------------------------
# vocabularies


@dataclass(frozen=True)
class StageVocab:
    stage: str

    @property
    def attributes(self) -> tuple[str, ...]:
        return STAGE_ATTRIBUTES[self.stage]

    def sizes(self) -> dict[str, int]:
        return {a: len(VOCAB[a]) for a in self.attributes}

    def encode(self, token: CompoundToken) -> list[int]:
        return [token_id(a, getattr(token, a)) for a in self.attributes]

    def decode(self, ids: Sequence[int], bar_index: int = 0, beat_index: int = 0) -> CompoundToken:
        fields = {a: token_value(a, i) for a, i in zip(self.attributes, ids)}
        return CompoundToken(bar_index=bar_index, beat_index=beat_index, **fields)

    def digest(self) -> str:
        blob = json.dumps({a: [str(v) for v in VOCAB[a]] for a in self.attributes}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def token_id(attr: str, value) -> int:
    try:
        return _INDEX[attr][value]
    except KeyError:
        raise TokenError(f"value {value!r} not in {attr} vocabulary") from None


def token_value(attr: str, idx: int):
    idx = int(idx)
    table = VOCAB[attr]
    if not 0 <= idx < len(table):
        raise TokenError(f"unknown {attr} id {idx}")
    return table[idx]


def tempo_bin(bpm: float) -> int:
    b = int(round(bpm))
    if TEMPO_LO <= b <= TEMPO_HI:
        return b - TEMPO_LO
    return N_TEMPO_BINS - 1


# ---------------------------------------------------------------------------
# encoders


def encode_chord_stage(chords: Sequence[ChordSymbol], n_bars: int) -> list[CompoundToken]:
    """BOS, then per bar: Bar, and (Beat, Chord) x 4, then EOS."""
    table = {(c.bar_index, c.beat_index): c for c in chords}
    toks = [bos()]
    for bar in range(n_bars):
        toks.append(bar_token(bar))
        for beat in range(4):
            chord = table.get((bar, beat))
            if chord is None:
                raise ValueError(f"no chord for bar {bar} beat {beat}")
            toks.append(position_token(bar, beat * POSITIONS_PER_BEAT))
            toks.append(chord_token(chord, bar, beat))
    toks.append(eos(max(n_bars - 1, 0)))
    return toks


def decode_chord_stage(tokens: Sequence[CompoundToken]) -> list[ChordSymbol]:
    out = []
    bar, pos = -1, None
    for i, tok in _body(tokens):
        if tok.is_bar:
            bar += 1
            pos = None
        elif tok.is_position:
            if bar < 0:
                raise TokenError("position before first bar", i)
            pos = tok.barbeat - 1
        elif tok.type == CHORD:
            if pos is None:
                raise TokenError("chord without position", i)
            out.append(replace(tok.chord_symbol(), bar_index=bar, beat_index=pos // POSITIONS_PER_BEAT))
    return out


def _grid_step(score: Score) -> int:
    if not score.is_four_four:
        raise ValueError("unsupported meter")
    if score.ticks_per_quarter % POSITIONS_PER_BEAT:
        raise ValueError("ticks_per_quarter must be divisible by 4")
    return score.ticks_per_quarter // POSITIONS_PER_BEAT


def _bar_count(score: Score, step: int) -> int:
    return -(-score.end_tick // (step * POSITIONS_PER_BAR))


def _note_events(score: Score, step: int) -> list[tuple[int, NoteEvent]]:
    out = []
    for n in score.notes:
        if n.onset % step:
            raise ValueError(f"note at tick {n.onset} is off the sixteenth grid")
        out.append((n.onset // step, n))
    return out


def _note_token(n: NoteEvent, step: int, bar: int, pos: int) -> CompoundToken:
    dur = min(MAX_DURATION, max(1, round(n.duration / step)))
    return CompoundToken(NOTE, pitch=n.pitch, duration=dur, bar_index=bar,
                         beat_index=pos // POSITIONS_PER_BEAT)


def encode_notes(score: Score, n_bars: Optional[int] = None) -> list[CompoundToken]:
    """Bar/position markers interleaved with notes (pitch-descending at a shared position)."""
    step = _grid_step(score)
    n_bars = max(n_bars or 0, _bar_count(score, step))
    events = _note_events(score, step)
    events.sort(key=lambda e: (e[0], -e[1].pitch, -e[1].duration))
    toks = [bos()]
    k = 0
    for bar in range(n_bars):
        toks.append(bar_token(bar))
        last = None
        while k < len(events) and events[k][0] < (bar + 1) * POSITIONS_PER_BAR:
            g, n = events[k]
            pos = g - bar * POSITIONS_PER_BAR
            if pos != last:
                toks.append(position_token(bar, pos))
                last = pos
            toks.append(_note_token(n, step, bar, pos))
            k += 1
    toks.append(eos(max(n_bars - 1, 0)))
    return toks


def encode_note_stage(split: TrackSplit, chords: Sequence[ChordSymbol], part: str) -> list[CompoundToken]:
    if part not in ("melody", "accomp"):
        raise ValueError(f"unknown part {part!r}")
    score = split.melody if part == "melody" else split.accompaniment
    if not score.is_four_four:
        raise ValueError("unsupported meter")
    return encode_notes(score, n_bars=len(chords) // 4)


def encode_merged_condition(chords: Sequence[ChordSymbol], melody: Score, n_bars: int) -> list[CompoundToken]:
    """Chords and melody notes interleaved in time; a chord precedes notes at its position."""
    step = _grid_step(melody)
    n_bars = max(n_bars, _bar_count(melody, step))
    table = {(c.bar_index, c.beat_index): c for c in chords}
    events = []  # (grid, order, payload)
    for (bar, beat), c in table.items():
        if bar < n_bars:
            events.append((bar * POSITIONS_PER_BAR + beat * POSITIONS_PER_BEAT, 0, 0, c))
    for g, n in _note_events(melody, step):
        events.append((g, 1, -n.pitch, n))
    events.sort(key=lambda e: e[:3])
    toks = [bos()]
    k = 0
    for bar in range(n_bars):
        toks.append(bar_token(bar))
        last = None
        while k < len(events) and events[k][0] < (bar + 1) * POSITIONS_PER_BAR:
            g, kind, _, obj = events[k]
            pos = g - bar * POSITIONS_PER_BAR
            if pos != last:
                toks.append(position_token(bar, pos))
                last = pos
            if kind == 0:
                toks.append(chord_token(obj, bar, pos // POSITIONS_PER_BEAT))
            else:
                toks.append(_note_token(obj, step, bar, pos))
            k += 1
    toks.append(eos(max(n_bars - 1, 0)))
    return toks


def _body(tokens: Sequence[CompoundToken]):
    if not tokens or tokens[0].type != BOS:
        raise TokenError("sequence must start with BOS", 0)
    for i in range(1, len(tokens)):
        tok = tokens[i]
        if tok.type == EOS:
            return
        if tok.type in (BOS, PAD):
            raise TokenError(f"unexpected {tok.type}", i)
        yield i, tok


def decode_tokens(tokens: Sequence[CompoundToken], tempo_bpm: float,
                  ticks_per_quarter: int = DEFAULT_TPQ) -> Score:
    """Rebuild a Score on the sixteenth grid. Chord tokens are skipped."""
    if ticks_per_quarter % POSITIONS_PER_BEAT:
        raise ValueError("ticks_per_quarter must be divisible by 4")
    step = ticks_per_quarter // POSITIONS_PER_BEAT
    notes = []
    bar, pos = -1, None
    for i, tok in _body(tokens):
        if tok.is_bar:
            bar += 1
            pos = None
        elif tok.is_position:
            if bar < 0:
                raise TokenError("position before first bar", i)
            new = tok.barbeat - 1
            if pos is not None and new < pos:
                raise TokenError("position decreases within bar", i)
            pos = new
        elif tok.type == NOTE:
            if pos is None:
                raise TokenError("note before any position marker", i)
            if tok.pitch is None or tok.duration is None:
                raise TokenError("note without pitch/duration", i)
            onset = (bar * POSITIONS_PER_BAR + pos) * step
            notes.append(NoteEvent(onset, tok.duration * step, tok.pitch, DEFAULT_VELOCITY))
        elif tok.type != CHORD:
            raise TokenError(f"unexpected token type {tok.type}", i)
    return Score(ticks_per_quarter=ticks_per_quarter, tempo_bpm=tempo_bpm, notes=tuple(notes))


def merge_tracks(melody: Score, accomp: Score) -> Score:
    """Union of both note lists; same (onset, pitch) collapses to the longer note."""
    if abs(melody.tempo_bpm - accomp.tempo_bpm) > 1e-9:
        raise ValueError(f"tempo mismatch: {melody.tempo_bpm} vs {accomp.tempo_bpm}")
    if melody.ticks_per_quarter != accomp.ticks_per_quarter:
        raise ValueError("ticks_per_quarter mismatch")
    keep: dict[tuple[int, int], NoteEvent] = {}
    for n in list(melody.notes) + list(accomp.notes):
        key = (n.onset, n.pitch)
        if key not in keep or n.duration > keep[key].duration:
            keep[key] = n
    return melody.with_notes(keep.values())


# ---------------------------------------------------------------------------
# grammar


class Grammar:
    """Incremental validator for token sequences.

    ``kind`` is "chord" (strict Bar, 4 x (Beat, Chord) layout), "note"
    (positions + notes) or "merged" (positions + chords + notes, the
    accompaniment condition). With ``n_bars`` set, exactly that many bars
    must be emitted before EOS.
    """

    def __init__(self, kind: str, n_bars: Optional[int] = None):
        if kind not in ("chord", "note", "merged"):
            raise ValueError(kind)
        self.kind = kind
        self.n_bars = n_bars
        self.prev: Optional[CompoundToken] = None
        self.bars = 0
        self.pos: Optional[int] = None
        self.finished = False

    # -- queries
    def _bar_allowed(self) -> bool:
        return self.n_bars is None or self.bars < self.n_bars

    def _eos_allowed(self) -> bool:
        return self.n_bars is None or self.bars == self.n_bars

    def allowed_types(self) -> set[str]:
        if self.finished:
            return set()
        if self.prev is None:
            return {BOS}
        if self.kind == "chord":
            return self._chord_types()
        out = set()
        p = self.prev
        if p.type == RHYTHM and p.barbeat:
            out.add(NOTE)
            if self.kind == "merged":
                out.add(CHORD)
            return out
        if self.allowed_barbeats():
            out.add(RHYTHM)
        if p.type in (NOTE, CHORD) and self.kind != "chord":
            out.add(NOTE)
        if self._eos_allowed():
            out.add(EOS)
        return out

    def _chord_types(self) -> set[str]:
        p = self.prev
        if p.is_bar:
            return {RHYTHM}
        if p.is_position:
            return {CHORD}
        if p.type == BOS:
            out = {RHYTHM} if self._bar_allowed() else set()
            return out | ({EOS} if self._eos_allowed() else set())
        # after a chord
        if self.pos is not None and self.pos < 3 * POSITIONS_PER_BEAT:
            return {RHYTHM}
        out = set()
        if self._bar_allowed():
            out.add(RHYTHM)
        if self._eos_allowed():
            out.add(EOS)
        return out

    def allowed_barbeats(self) -> list[int]:
        p = self.prev
        if p is None or self.finished:
            return []
        if self.kind == "chord":
            if p.type == BOS:
                return [0] if self._bar_allowed() else []
            if p.is_bar:
                return [1]
            if p.type != CHORD:
                return []
            if self.pos < 3 * POSITIONS_PER_BEAT:
                return [self.pos + POSITIONS_PER_BEAT + 1]
            return [0] if self._bar_allowed() else []
        if p.type == RHYTHM and p.barbeat:
            return []
        out = [0] if self._bar_allowed() else []
        if self.bars > 0:
            start = 0 if self.pos is None else self.pos + 1
            out.extend(range(start + 1, POSITIONS_PER_BAR + 1))
        return out

    def allowed_values(self, type_: str, attr: str, partial: Optional[dict] = None) -> Optional[list]:
        """Allowed values of ``attr`` for a token of ``type_``; None means unconstrained."""
        if attr == "barbeat":
            return self.allowed_barbeats() if type_ == RHYTHM else [None]
        if type_ == NOTE:
            if attr == "pitch":
                return list(range(128))
            if attr == "duration":
                return list(range(1, MAX_DURATION + 1))
        if type_ == CHORD:
            if attr == "root":
                return list(range(12)) + [NO_CHORD]
            if attr == "quality":
                root = (partial or {}).get("root")
                if root == NO_CHORD:
                    return [NO_CHORD]
                if root is not None:
                    return list(QUALITY_NAMES)
                return list(QUALITY_NAMES) + [NO_CHORD]
        return [None]

    @staticmethod
    def attributes_for(type_: str) -> tuple[str, ...]:
        return {RHYTHM: ("barbeat",), NOTE: ("pitch", "duration"), CHORD: ("root", "quality")}.get(type_, ())

    # -- mutation
    def check(self, tok: CompoundToken) -> Optional[str]:
        if tok.type not in self.allowed_types():
            return f"{tok.type} not allowed after {self.prev}"
        for attr in self.attributes_for(tok.type):
            allowed = self.allowed_values(tok.type, attr, {"root": tok.root})
            if allowed is not None and getattr(tok, attr) not in allowed:
                return f"{attr}={getattr(tok, attr)!r} not allowed for {tok.type}"
        return None

    def push(self, tok: CompoundToken) -> CompoundToken:
        """Validate ``tok``, advance the state, and return it with bar/beat filled in."""
        err = self.check(tok)
        if err:
            raise TokenError(err)
        bar = max(self.bars - 1, 0)
        if tok.type == RHYTHM:
            if tok.barbeat == 0:
                bar = self.bars
                self.bars += 1
                self.pos = None
                beat = 0
            else:
                self.pos = tok.barbeat - 1
                beat = self.pos // POSITIONS_PER_BEAT
        else:
            beat = 0 if self.pos is None else self.pos // POSITIONS_PER_BEAT
        if tok.type == EOS:
            self.finished = True
            beat = 0
        tok = replace(tok, bar_index=bar, beat_index=beat)
        self.prev = tok
        return tok


def validate(tokens: Sequence[CompoundToken], kind: str, n_bars: Optional[int] = None) -> None:
    """Raise :class:`TokenError` at the first grammar violation."""
    g = Grammar(kind, n_bars)
    for i, tok in enumerate(tokens):
        err = g.check(tok)
        if err:
            raise TokenError(err, i)
        g.push(tok)
    if not g.finished:
        raise TokenError("sequence does not end with EOS", len(tokens))


# ---------------------------------------------------------------------------
# tensors and cache files


def to_ids(tokens: Sequence[CompoundToken], attributes: Iterable[str]) -> np.ndarray:
    attributes = tuple(attributes)
    out = np.zeros((len(tokens), len(attributes)), dtype=np.int64)
    for i, tok in enumerate(tokens):
        for j, a in enumerate(attributes):
            out[i, j] = token_id(a, getattr(tok, a))
    return out


def positions(tokens: Sequence[CompoundToken]) -> tuple[np.ndarray, np.ndarray]:
    bars = np.array([t.bar_index for t in tokens], dtype=np.int64)
    beats = np.array([t.beat_index for t in tokens], dtype=np.int64)
    return bars, beats


def chroma_matrix(tokens: Sequence[CompoundToken]) -> np.ndarray:
    return np.array([t.chroma for t in tokens], dtype=np.float32).reshape(len(tokens), 12)


CACHE_MAGIC = b"VMTK"
CACHE_VERSION = 1
CACHE_FIELDS = ATTRIBUTES + ("bar_index", "beat_index")


def write_token_file(path, tokens: Sequence[CompoundToken]) -> None:
    """Binary token cache plus a ``.json`` sidecar describing the tables.

    Layout: magic ``VMTK``, version u16, token count u32, then per token
    eight little-endian u16 fields in ``CACHE_FIELDS`` order.
    """
    rows = np.zeros((len(tokens), len(CACHE_FIELDS)), dtype="<u2")
    for i, tok in enumerate(tokens):
        for j, a in enumerate(ATTRIBUTES):
            rows[i, j] = token_id(a, getattr(tok, a))
        rows[i, 6] = tok.bar_index
        rows[i, 7] = tok.beat_index
    with open(path, "wb") as f:
        f.write(CACHE_MAGIC + struct.pack("<HI", CACHE_VERSION, len(tokens)))
        f.write(rows.tobytes())
    sidecar = {
        "version": CACHE_VERSION,
        "fields": list(CACHE_FIELDS),
        "vocab": {a: [v for v in VOCAB[a]] for a in ATTRIBUTES},
    }
    with open(str(path) + ".json", "w") as f:
        json.dump(sidecar, f, indent=1)


def read_token_file(path) -> list[CompoundToken]:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != CACHE_MAGIC:
        raise ValueError("not a VMTK token file")
    version, count = struct.unpack("<HI", blob[4:10])
    if version != CACHE_VERSION:
        raise ValueError(f"unsupported VMTK version {version}")
    width = len(CACHE_FIELDS)
    expected = 10 + 2 * width * count
    if len(blob) != expected:
        raise ValueError(f"VMTK size mismatch: expected {expected} bytes, found {len(blob)}")
    rows = np.frombuffer(blob, dtype="<u2", offset=10).reshape(count, width)
    out = []
    for r in rows:
        fields = {a: token_value(a, r[j]) for j, a in enumerate(ATTRIBUTES)}
        out.append(CompoundToken(bar_index=int(r[6]), beat_index=int(r[7]), **fields))
    return out
