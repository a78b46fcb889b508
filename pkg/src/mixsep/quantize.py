"""Sixteenth-note quantization of parsed MIDI onto the binary grid.

Grid rules: one cell per sixteenth note (ticks_per_quarter / 4 ticks,
kept exact with integer arithmetic for non-divisible divisions). A note's
onset snaps to the nearest grid index (ties round up) and every cell the
note overlaps stays set until it ends (onset-and-hold), with a one-cell
minimum. Pitches outside 24..95 are dropped and counted.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .midi import DRUM_CHANNEL, NoteEvent, TimeSignature
from .pianoroll import (
    INSTRUMENTS,
    PITCH_HIGH,
    PITCH_LOW,
    PITCHES,
    STEPS_PER_BAR,
    TIME_STEPS,
    Phrase,
    mixture_from_roll,
)

PIANO_PROGRAMS = range(0, 8)
GUITAR_PROGRAMS = range(24, 32)
BASS_PROGRAMS = range(32, 40)
STRING_PROGRAMS = range(40, 52)


def classify_instrument(program: int, channel: int) -> int | None:
    """Map a GM program/channel pair to an instrument index, or None.

    Channel 10 (zero-based 9) is percussion regardless of program; the four
    pitched classes follow General MIDI family ranges. Programs outside
    those families are excluded.
    """
    if channel == DRUM_CHANNEL:
        return 4
    if program in PIANO_PROGRAMS:
        return 0
    if program in GUITAR_PROGRAMS:
        return 1
    if program in BASS_PROGRAMS:
        return 2
    if program in STRING_PROGRAMS:
        return 3
    return None


def is_eligible(events: list[NoteEvent], time_signatures: list[TimeSignature]) -> bool:
    """Keep only straight 4/4 songs that use at least two instrument classes."""
    for sig in time_signatures:
        if (sig.numerator, sig.denominator) != (4, 4):
            return False
    classes = set()
    for ev in events:
        cls = classify_instrument(ev.program, ev.channel)
        if cls is not None:
            classes.add(cls)
            if len(classes) >= 2:
                return True
    return False


def grid_span(start_tick: int, duration_ticks: int, ticks_per_quarter: int) -> tuple[int, int]:
    """Half-open cell range [start, end) covered by a note.

    Exact integer arithmetic: with step = tpq/4, the snapped onset is
    floor(start/step + 1/2) and the end is ceil((start+duration)/step),
    clamped to at least one cell.
    """
    tpq = ticks_per_quarter
    start_cell = (8 * start_tick + tpq) // (2 * tpq)
    end_cell = (4 * (start_tick + duration_ticks) + tpq - 1) // tpq
    return start_cell, max(end_cell, start_cell + 1)


def _total_steps(last_cell: int) -> int:
    bars = (last_cell + STEPS_PER_BAR) // STEPS_PER_BAR  # ceil((last+1)/16)
    return bars * STEPS_PER_BAR


@dataclass
class QuantizeStats:
    dropped_out_of_range: int = 0
    dropped_unclassified: int = 0


def quantize_to_roll(
    events: list[NoteEvent], ticks_per_quarter: int
) -> tuple[np.ndarray, QuantizeStats]:
    """Rasterize a whole song onto the (T_total, 72, 5) binary grid.

    T_total is padded up to a whole number of bars. Returns the roll and
    drop counters for out-of-range pitches and unclassified programs.
    """
    stats = QuantizeStats()
    cells: list[tuple[int, int, int, int]] = []  # (start, end, pitch_idx, class)
    last = -1
    for ev in events:
        cls = classify_instrument(ev.program, ev.channel)
        if cls is None:
            stats.dropped_unclassified += 1
            continue
        if not PITCH_LOW <= ev.pitch <= PITCH_HIGH:
            stats.dropped_out_of_range += 1
            continue
        start, end = grid_span(ev.start_tick, ev.duration_ticks, ticks_per_quarter)
        cells.append((start, end, ev.pitch - PITCH_LOW, cls))
        last = max(last, end - 1)
    if last < 0:
        return np.zeros((0, PITCHES, INSTRUMENTS), dtype=np.uint8), stats
    roll = np.zeros((_total_steps(last), PITCHES, INSTRUMENTS), dtype=np.uint8)
    for start, end, pitch, cls in cells:
        roll[start:end, pitch, cls] = 1
    return roll, stats


def quantize_mixture(
    events: list[NoteEvent], ticks_per_quarter: int
) -> tuple[np.ndarray, QuantizeStats]:
    """Rasterize every note, whatever its program, onto a (T_total, 72) mixture.

    Used for separation input, where the performance itself is the mixture
    and instrument classes are deliberately collapsed.
    """
    stats = QuantizeStats()
    cells: list[tuple[int, int, int]] = []
    last = -1
    for ev in events:
        if not PITCH_LOW <= ev.pitch <= PITCH_HIGH:
            stats.dropped_out_of_range += 1
            continue
        start, end = grid_span(ev.start_tick, ev.duration_ticks, ticks_per_quarter)
        cells.append((start, end, ev.pitch - PITCH_LOW))
        last = max(last, end - 1)
    if last < 0:
        return np.zeros((0, PITCHES), dtype=np.uint8), stats
    mixture = np.zeros((_total_steps(last), PITCHES), dtype=np.uint8)
    for start, end, pitch in cells:
        mixture[start:end, pitch] = 1
    return mixture, stats


def window_phrases(full_roll: np.ndarray, source_id: str) -> list[Phrase]:
    """Slide a 4-bar window (stride 1 bar) over a song roll.

    Windows whose mixture is silent are discarded, as is any final partial
    window; a song shorter than one phrase yields nothing.
    """
    total = full_roll.shape[0]
    if total % STEPS_PER_BAR != 0:
        raise ValueError(f"song length {total} is not a whole number of bars")
    phrases = []
    for start in range(0, total - TIME_STEPS + 1, STEPS_PER_BAR):
        window = full_roll[start : start + TIME_STEPS]
        if mixture_from_roll(window).any():
            phrases.append(
                Phrase(
                    roll=window.copy(),
                    source_id=source_id,
                    bar_offset=start // STEPS_PER_BAR,
                )
            )
    return phrases
