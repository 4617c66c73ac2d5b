"""Standard MIDI File reading/writing and grid quantization.

Everything is flattened to a single piano part: channels and programs are
discarded on read, and only the first tempo and time-signature events are
kept.
"""

from __future__ import annotations

import math
import struct
import warnings
from collections import defaultdict, deque
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

DEFAULT_TPQ = 480
DEFAULT_TEMPO = 120.0
DEFAULT_VELOCITY = 64

# channel 10 (index 9) is left alone so files stay playable as piano
_WRITE_CHANNELS = [c for c in range(16) if c != 9]


class MidiParseError(ValueError):
    """Malformed SMF data. ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


class MidiWarning(UserWarning):
    pass


@dataclass(frozen=True, order=True)
class NoteEvent:
    onset: int
    duration: int
    pitch: int
    velocity: int = DEFAULT_VELOCITY

    def __post_init__(self):
        if self.onset < 0:
            raise ValueError(f"negative onset {self.onset}")
        if self.duration <= 0:
            raise ValueError(f"non-positive duration {self.duration}")
        if not 0 <= self.pitch <= 127:
            raise ValueError(f"pitch {self.pitch} out of range")
        if not 1 <= self.velocity <= 127:
            raise ValueError(f"velocity {self.velocity} out of range")

    @property
    def offset(self) -> int:
        return self.onset + self.duration


def _note_key(n: NoteEvent):
    return (n.onset, n.pitch, n.duration, n.velocity)


@dataclass(frozen=True)
class Score:
    """Quantized symbolic music for one piano part.

    ``notes`` is always stored as a tuple sorted by (onset, pitch); the
    constructor re-sorts whatever it is given.
    """

    ticks_per_quarter: int = DEFAULT_TPQ
    tempo_bpm: float = DEFAULT_TEMPO
    time_signature: tuple[int, int] = (4, 4)
    notes: tuple[NoteEvent, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if self.ticks_per_quarter <= 0:
            raise ValueError("ticks_per_quarter must be positive")
        if not (self.tempo_bpm > 0 and math.isfinite(self.tempo_bpm)):
            raise ValueError(f"invalid tempo {self.tempo_bpm}")
        num, den = self.time_signature
        if num <= 0 or den not in (2, 4, 8):
            raise ValueError(f"unsupported time signature {num}/{den}")
        object.__setattr__(self, "time_signature", (int(num), int(den)))
        object.__setattr__(self, "notes", tuple(sorted(self.notes, key=_note_key)))

    @property
    def end_tick(self) -> int:
        return max((n.offset for n in self.notes), default=0)

    @property
    def is_four_four(self) -> bool:
        return self.time_signature == (4, 4)

    def with_notes(self, notes: Iterable[NoteEvent]) -> "Score":
        return replace(self, notes=tuple(notes))

    def seconds_per_tick(self) -> float:
        return 60.0 / (self.tempo_bpm * self.ticks_per_quarter)


# ---------------------------------------------------------------------------
# reading


def _read_varlen(data: bytes, pos: int, end: int) -> tuple[int, int]:
    value = 0
    for i in range(4):
        if pos >= end:
            raise MidiParseError("truncated variable-length quantity", pos)
        b = data[pos]
        pos += 1
        value = (value << 7) | (b & 0x7F)
        if not b & 0x80:
            return value, pos
    raise MidiParseError("variable-length quantity longer than 4 bytes", pos - 1)


_DATA_LEN = {0x80: 2, 0x90: 2, 0xA0: 2, 0xB0: 2, 0xC0: 1, 0xD0: 1, 0xE0: 2}


def _parse_track(data: bytes, start: int, end: int, events: list):
    """Append (tick, order, kind, payload) tuples for one MTrk body."""
    pos = start
    tick = 0
    status = None
    order = 0
    while pos < end:
        delta, pos = _read_varlen(data, pos, end)
        tick += delta
        if pos >= end:
            raise MidiParseError("event missing after delta time", pos)
        b = data[pos]
        if b == 0xFF:
            if pos + 1 >= end:
                raise MidiParseError("truncated meta event", pos)
            mtype = data[pos + 1]
            length, body = _read_varlen(data, pos + 2, end)
            if body + length > end:
                raise MidiParseError("meta event overruns track", pos)
            payload = data[body:body + length]
            pos = body + length
            status = None
            if mtype == 0x2F:
                return
            if mtype == 0x51:
                if length != 3:
                    raise MidiParseError("tempo event must have 3 bytes", body)
                mpq = int.from_bytes(payload, "big")
                if mpq == 0:
                    raise MidiParseError("zero tempo", body)
                events.append((tick, order, "tempo", mpq))
            elif mtype == 0x58:
                if length < 2:
                    raise MidiParseError("time signature event too short", body)
                events.append((tick, order, "timesig", (payload[0], payload[1], body)))
            order += 1
            continue
        if b in (0xF0, 0xF7):
            length, body = _read_varlen(data, pos + 1, end)
            if body + length > end:
                raise MidiParseError("sysex overruns track", pos)
            pos = body + length
            status = None
            continue
        if b & 0x80:
            if b >= 0xF0:
                raise MidiParseError(f"unsupported status byte 0x{b:02X}", pos)
            status = b
            pos += 1
        elif status is None:
            raise MidiParseError("data byte without running status", pos)
        n = _DATA_LEN[status & 0xF0]
        if pos + n > end:
            raise MidiParseError("truncated channel message", pos)
        args = data[pos:pos + n]
        for k, a in enumerate(args):
            if a & 0x80:
                raise MidiParseError("data byte has high bit set", pos + k)
        pos += n
        kind = status & 0xF0
        channel = status & 0x0F
        if kind == 0x90 and args[1] > 0:
            events.append((tick, order, "on", (channel, args[0], args[1])))
        elif kind == 0x80 or kind == 0x90:
            events.append((tick, order, "off", (channel, args[0])))
        order += 1
    warnings.warn("track ended without end-of-track event", MidiWarning)


def parse_midi(data: bytes) -> Score:
    """Parse SMF type 0/1 bytes into a :class:`Score`.

    Raises :class:`MidiParseError` (with a byte offset) on malformed
    headers or chunks. Dangling note-ons are dropped with a warning.
    """
    data = bytes(data)
    if len(data) < 14 or data[:4] != b"MThd":
        raise MidiParseError("missing MThd header", 0)
    hlen = struct.unpack(">I", data[4:8])[0]
    if hlen < 6 or 8 + hlen > len(data):
        raise MidiParseError(f"bad header length {hlen}", 4)
    fmt, ntrks, division = struct.unpack(">HHH", data[8:14])
    if fmt not in (0, 1):
        raise MidiParseError(f"unsupported SMF format {fmt}", 8)
    if division & 0x8000:
        raise MidiParseError("SMPTE time division is not supported", 12)
    if division == 0:
        raise MidiParseError("zero ticks per quarter", 12)

    pos = 8 + hlen
    events: list = []
    found = 0
    track_no = 0
    while pos < len(data) and found < ntrks:
        if pos + 8 > len(data):
            raise MidiParseError("truncated chunk header", pos)
        ctype = data[pos:pos + 4]
        clen = struct.unpack(">I", data[pos + 4:pos + 8])[0]
        body = pos + 8
        if body + clen > len(data):
            raise MidiParseError("chunk length exceeds file size", pos + 4)
        if ctype == b"MTrk":
            track_events: list = []
            _parse_track(data, body, body + clen, track_events)
            events.extend((t, track_no, o, k, p) for t, o, k, p in track_events)
            track_no += 1
            found += 1
        pos = body + clen
    if found < ntrks:
        warnings.warn(f"header declares {ntrks} tracks, found {found}", MidiWarning)

    # offs before ons at equal ticks so back-to-back repeats pair correctly
    rank = {"tempo": 0, "timesig": 0, "off": 1, "on": 2}
    events.sort(key=lambda e: (e[0], rank[e[3]], e[1], e[2]))

    tempo = None
    timesig = None
    pending: dict[tuple[int, int], deque] = defaultdict(deque)
    notes: list[NoteEvent] = []
    for tick, _, _, kind, payload in events:
        if kind == "tempo":
            if tempo is None:
                tempo = 60_000_000 / payload
            elif abs(60_000_000 / payload - tempo) > 1e-9:
                warnings.warn("ignoring tempo change after the first", MidiWarning)
        elif kind == "timesig":
            num, dpow, off = payload
            if timesig is None:
                if dpow > 7 or num == 0 or (1 << dpow) not in (2, 4, 8):
                    raise MidiParseError(f"unsupported time signature {num}/2^{dpow}", off)
                timesig = (num, 1 << dpow)
            elif (num, 1 << dpow) != timesig:
                warnings.warn("ignoring time signature change after the first", MidiWarning)
        elif kind == "on":
            channel, pitch, vel = payload
            pending[(channel, pitch)].append((tick, vel))
        else:
            channel, pitch = payload
            queue = pending.get((channel, pitch))
            if not queue:
                continue
            start, vel = queue.popleft()
            if tick > start:
                notes.append(NoteEvent(start, tick - start, pitch, vel))
            else:
                warnings.warn(f"dropping zero-length note {pitch} at tick {start}", MidiWarning)
    dangling = sum(len(q) for q in pending.values())
    if dangling:
        warnings.warn(f"dropping {dangling} note-on(s) without note-off", MidiWarning)

    return Score(
        ticks_per_quarter=division,
        tempo_bpm=tempo if tempo is not None else DEFAULT_TEMPO,
        time_signature=timesig or (4, 4),
        notes=tuple(notes),
    )


def read_midi(path) -> Score:
    with open(path, "rb") as f:
        return parse_midi(f.read())


# ---------------------------------------------------------------------------
# writing


def _varlen(value: int) -> bytes:
    out = [value & 0x7F]
    value >>= 7
    while value:
        out.append(0x80 | (value & 0x7F))
        value >>= 7
    return bytes(reversed(out))


def _assign_channels(notes: Sequence[NoteEvent]) -> list[int]:
    """Greedy interval colouring so no channel holds two overlapping notes of one pitch.

    Overlapping same-pitch notes are ambiguous in SMF; spreading them across
    channels keeps the round trip exact for up to 15 simultaneous voices.
    """
    busy: dict[int, list[int]] = defaultdict(list)
    channels = []
    for n in notes:
        ends = busy[n.pitch]
        for slot, end in enumerate(ends):
            if end <= n.onset:
                ends[slot] = n.offset
                break
        else:
            slot = len(ends)
            ends.append(n.offset)
        if slot >= len(_WRITE_CHANNELS):
            warnings.warn(f"more than {len(_WRITE_CHANNELS)} overlapping notes at pitch "
                          f"{n.pitch}; round trip may pair them differently", MidiWarning)
            slot = len(_WRITE_CHANNELS) - 1
        channels.append(_WRITE_CHANNELS[slot])
    return channels


def write_midi(score: Score) -> bytes:
    """Serialize to a type-0 SMF."""
    mpq = max(1, min(0xFFFFFF, round(60_000_000 / score.tempo_bpm)))
    num, den = score.time_signature
    # (tick, rank, bytes); rank puts meta first, then offs, then ons
    evs: list[tuple[int, int, int, bytes]] = [
        (0, 0, 0, b"\xFF\x51\x03" + mpq.to_bytes(3, "big")),
        (0, 0, 1, bytes([0xFF, 0x58, 0x04, num, den.bit_length() - 1, 24, 8])),
    ]
    channels = _assign_channels(score.notes)
    for i, (n, ch) in enumerate(zip(score.notes, channels)):
        evs.append((n.onset, 2, i, bytes([0x90 | ch, n.pitch, n.velocity])))
        evs.append((n.offset, 1, i, bytes([0x80 | ch, n.pitch, 0])))
    evs.sort(key=lambda e: (e[0], e[1], e[2]))

    body = bytearray()
    last = 0
    for tick, _, _, msg in evs:
        body += _varlen(tick - last)
        body += msg
        last = tick
    body += b"\x00\xFF\x2F\x00"

    header = b"MThd" + struct.pack(">IHHH", 6, 0, 1, score.ticks_per_quarter)
    return header + b"MTrk" + struct.pack(">I", len(body)) + bytes(body)


def save_midi(score: Score, path) -> None:
    with open(path, "wb") as f:
        f.write(write_midi(score))


# ---------------------------------------------------------------------------
# quantization


def quantize(score: Score, grid: int = 4) -> Score:
    """Snap onsets and durations to ``grid`` positions per quarter note.

    Durations never drop below one grid step.
    """
    if grid < 1:
        raise ValueError("grid must be >= 1")
    step = score.ticks_per_quarter / grid

    def snap(x: int) -> int:
        return int(round(math.floor(x / step + 0.5) * step))

    unit = max(1, int(round(step)))
    notes = []
    for n in score.notes:
        notes.append(replace(n, onset=snap(n.onset), duration=max(unit, snap(n.duration))))
    return score.with_notes(notes)
