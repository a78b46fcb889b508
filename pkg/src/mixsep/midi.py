"""Standard MIDI File reader/writer for the ingestion and export paths.

What this module does:
1. Parses SMF format 0/1 bytes into note events with absolute tick timing.
2. Resolves note-on/note-off pairs (FIFO per channel+pitch, velocity-0
   note-ons count as note-offs); unresolved note-ons are dropped and counted.
3. Tracks program changes per channel so every note carries the program
   active at its onset.
4. Collects time-signature meta events (tempo is ignored: the quantization
   grid is metrical, not wall-clock).
5. Writes multitrack format-1 files back out with deterministic bytes.

Parse errors carry the byte offset of the offending chunk or event.
"""

from __future__ import annotations

from dataclasses import dataclass, field

NOTE_OFF = 0x80
NOTE_ON = 0x90
POLY_PRESSURE = 0xA0
CONTROL_CHANGE = 0xB0
PROGRAM_CHANGE = 0xC0
CHANNEL_PRESSURE = 0xD0
PITCH_BEND = 0xE0

META_TIME_SIGNATURE = 0x58
META_END_OF_TRACK = 0x2F

DRUM_CHANNEL = 9


class MidiParseError(ValueError):
    """Malformed MIDI data; `offset` is the byte position of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


@dataclass(frozen=True)
class NoteEvent:
    start_tick: int
    duration_ticks: int
    pitch: int
    channel: int
    program: int


@dataclass(frozen=True)
class TimeSignature:
    tick: int
    numerator: int
    denominator: int


@dataclass
class ParsedMidi:
    events: list[NoteEvent]
    ticks_per_quarter: int
    time_signatures: list[TimeSignature]
    unresolved_note_ons: int = 0


@dataclass
class _RawEvent:
    # One channel/meta event before note pairing, in absolute ticks.
    tick: int
    track: int
    index: int
    status: int
    data: tuple = field(default_factory=tuple)


def _read_u32(data: bytes, pos: int) -> int:
    if pos + 4 > len(data):
        raise MidiParseError("truncated 32-bit field", pos)
    return int.from_bytes(data[pos : pos + 4], "big")


def _read_u16(data: bytes, pos: int) -> int:
    if pos + 2 > len(data):
        raise MidiParseError("truncated 16-bit field", pos)
    return int.from_bytes(data[pos : pos + 2], "big")


def _read_varint(data: bytes, pos: int) -> tuple[int, int]:
    value = 0
    for i in range(4):
        if pos >= len(data):
            raise MidiParseError("truncated variable-length quantity", pos)
        byte = data[pos]
        pos += 1
        value = (value << 7) | (byte & 0x7F)
        if not byte & 0x80:
            return value, pos
    raise MidiParseError("variable-length quantity longer than 4 bytes", pos - 4)


def _read_data_byte(data: bytes, pos: int) -> int:
    if pos >= len(data):
        raise MidiParseError("truncated event data", pos)
    byte = data[pos]
    if byte & 0x80:
        raise MidiParseError(f"expected data byte, got 0x{byte:02x}", pos)
    return byte


_DATA_BYTES = {
    NOTE_OFF: 2,
    NOTE_ON: 2,
    POLY_PRESSURE: 2,
    CONTROL_CHANGE: 2,
    PROGRAM_CHANGE: 1,
    CHANNEL_PRESSURE: 1,
    PITCH_BEND: 2,
}


def _parse_track(data: bytes, start: int, end: int, track_no: int):
    """Parse one MTrk payload into raw events and time signatures."""
    events: list[_RawEvent] = []
    signatures: list[TimeSignature] = []
    pos = start
    tick = 0
    running_status = None
    index = 0
    while pos < end:
        delta, pos = _read_varint(data, pos)
        tick += delta
        if pos >= end:
            raise MidiParseError("track ends inside an event", pos)
        byte = data[pos]
        if byte == 0xFF:
            if pos + 2 > end:
                raise MidiParseError("truncated meta event", pos)
            meta_type = data[pos + 1]
            length, body = _read_varint(data, pos + 2)
            if body + length > end:
                raise MidiParseError("meta event overruns its track", pos)
            if meta_type == META_TIME_SIGNATURE:
                if length < 2:
                    raise MidiParseError("time-signature meta too short", pos)
                signatures.append(
                    TimeSignature(tick, data[body], 1 << data[body + 1])
                )
            pos = body + length
            if meta_type == META_END_OF_TRACK:
                break
            continue
        if byte in (0xF0, 0xF7):
            length, body = _read_varint(data, pos + 1)
            if body + length > end:
                raise MidiParseError("sysex event overruns its track", pos)
            pos = body + length
            running_status = None
            continue
        if byte & 0x80:
            status = byte
            pos += 1
            running_status = status
        elif running_status is None:
            raise MidiParseError(f"data byte 0x{byte:02x} with no running status", pos)
        else:
            status = running_status
        kind = status & 0xF0
        if kind not in _DATA_BYTES:
            raise MidiParseError(f"unsupported status byte 0x{status:02x}", pos - 1)
        n = _DATA_BYTES[kind]
        args = []
        for _ in range(n):
            args.append(_read_data_byte(data, pos))
            pos += 1
        events.append(_RawEvent(tick, track_no, index, status, tuple(args)))
        index += 1
    return events, signatures


def parse_midi(data: bytes) -> ParsedMidi:
    """Parse a format 0/1 Standard MIDI File into note events.

    Events are merged across tracks by absolute tick. Tempo is ignored;
    timing stays in ticks relative to `ticks_per_quarter`.
    """
    if len(data) < 14 or data[:4] != b"MThd":
        raise MidiParseError("missing MThd header", 0)
    header_len = _read_u32(data, 4)
    if header_len < 6:
        raise MidiParseError(f"header length {header_len} < 6", 4)
    fmt = _read_u16(data, 8)
    if fmt not in (0, 1):
        raise MidiParseError(f"unsupported SMF format {fmt}", 8)
    n_tracks = _read_u16(data, 10)
    division = _read_u16(data, 12)
    if division & 0x8000:
        raise MidiParseError("SMPTE time division is not supported", 12)
    if division == 0:
        raise MidiParseError("ticks-per-quarter division of zero", 12)

    raw: list[_RawEvent] = []
    signatures: list[TimeSignature] = []
    pos = 8 + header_len
    track_no = 0
    while track_no < n_tracks:
        if pos + 8 > len(data):
            raise MidiParseError("truncated chunk header", pos)
        chunk_type = data[pos : pos + 4]
        chunk_len = _read_u32(data, pos + 4)
        body_start = pos + 8
        body_end = body_start + chunk_len
        if body_end > len(data):
            raise MidiParseError("chunk overruns end of file", pos)
        if chunk_type == b"MTrk":
            events, sigs = _parse_track(data, body_start, body_end, track_no)
            raw.extend(events)
            signatures.extend(sigs)
            track_no += 1
        else:
            # Alien chunks are legal in SMF and skipped.
            pass
        pos = body_end

    raw.sort(key=lambda e: (e.tick, e.track, e.index))
    signatures.sort(key=lambda s: s.tick)

    channel_program = [0] * 16
    open_notes: dict[tuple[int, int], list[tuple[int, int]]] = {}
    notes: list[NoteEvent] = []
    for ev in raw:
        kind = ev.status & 0xF0
        channel = ev.status & 0x0F
        if kind == PROGRAM_CHANGE:
            channel_program[channel] = ev.data[0]
        elif kind == NOTE_ON and ev.data[1] > 0:
            open_notes.setdefault((channel, ev.data[0]), []).append(
                (ev.tick, channel_program[channel])
            )
        elif kind == NOTE_OFF or (kind == NOTE_ON and ev.data[1] == 0):
            stack = open_notes.get((channel, ev.data[0]))
            if stack:
                start, program = stack.pop(0)
                notes.append(
                    NoteEvent(
                        start_tick=start,
                        duration_ticks=max(1, ev.tick - start),
                        pitch=ev.data[0],
                        channel=channel,
                        program=program,
                    )
                )
    unresolved = sum(len(v) for v in open_notes.values())
    notes.sort(key=lambda n: (n.start_tick, n.channel, n.pitch))
    return ParsedMidi(notes, division, signatures, unresolved)


def _varint(value: int) -> bytes:
    out = [value & 0x7F]
    value >>= 7
    while value:
        out.append(0x80 | (value & 0x7F))
        value >>= 7
    return bytes(reversed(out))


def _track_chunk(payload: bytes) -> bytes:
    return b"MTrk" + len(payload).to_bytes(4, "big") + payload


def write_midi(
    notes: list[NoteEvent],
    ticks_per_quarter: int = 480,
    tempo_bpm: int = 120,
    velocity: int = 100,
) -> bytes:
    """Serialize notes as a format-1 SMF: one conductor track plus one
    track per channel in ascending channel order. Deterministic bytes."""
    tempo = round(60_000_000 / tempo_bpm)
    conductor = bytearray()
    conductor += _varint(0) + bytes([0xFF, 0x58, 0x04, 4, 2, 24, 8])
    conductor += _varint(0) + bytes([0xFF, 0x51, 0x03]) + tempo.to_bytes(3, "big")
    conductor += _varint(0) + bytes([0xFF, 0x2F, 0x00])

    channels = sorted({n.channel for n in notes})
    tracks = [bytes(conductor)]
    for channel in channels:
        channel_notes = sorted(
            (n for n in notes if n.channel == channel),
            key=lambda n: (n.start_tick, n.pitch),
        )
        # (tick, is_on, pitch); offs sort before ons at the same tick.
        moments: list[tuple[int, int, int]] = []
        for n in channel_notes:
            moments.append((n.start_tick, 1, n.pitch))
            moments.append((n.start_tick + n.duration_ticks, 0, n.pitch))
        moments.sort()
        payload = bytearray()
        if channel != DRUM_CHANNEL and channel_notes:
            payload += _varint(0) + bytes(
                [PROGRAM_CHANGE | channel, channel_notes[0].program]
            )
        clock = 0
        for tick, is_on, pitch in moments:
            payload += _varint(tick - clock)
            clock = tick
            status = (NOTE_ON if is_on else NOTE_OFF) | channel
            payload += bytes([status, pitch, velocity if is_on else 0])
        payload += _varint(0) + bytes([0xFF, 0x2F, 0x00])
        tracks.append(bytes(payload))

    header = b"MThd" + (6).to_bytes(4, "big")
    header += (1).to_bytes(2, "big")
    header += len(tracks).to_bytes(2, "big")
    header += ticks_per_quarter.to_bytes(2, "big")
    return header + b"".join(_track_chunk(t) for t in tracks)
