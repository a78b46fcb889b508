"""Binary pianoroll grid: fixed-size phrases and their mixtures.

A phrase is a binary array of shape (TIME_STEPS, PITCHES, INSTRUMENTS):
64 sixteenth-note steps (4 bars), MIDI pitches 24..95, and five
instrument channels in the fixed order piano, guitar, bass, string, drum.
A mixture collapses the instrument axis: 1 wherever any instrument sounds.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

TIME_STEPS = 64
PITCHES = 72
INSTRUMENTS = 5

PITCH_LOW = 24
PITCH_HIGH = 95  # inclusive

STEPS_PER_BAR = 16
BARS_PER_PHRASE = 4

INSTRUMENT_NAMES = ("piano", "guitar", "bass", "string", "drum")

PIANO, GUITAR, BASS, STRING, DRUM = range(INSTRUMENTS)


def validate_roll(cells: np.ndarray) -> np.ndarray:
    """Check shape and binary values of a phrase roll; returns it as uint8."""
    cells = np.asarray(cells)
    if cells.shape != (TIME_STEPS, PITCHES, INSTRUMENTS):
        raise ValueError(
            f"pianoroll shape must be {(TIME_STEPS, PITCHES, INSTRUMENTS)}, got {cells.shape}"
        )
    if not np.isin(cells, (0, 1)).all():
        raise ValueError("pianoroll cells must be 0 or 1")
    return cells.astype(np.uint8)


def validate_mixture(cells: np.ndarray) -> np.ndarray:
    cells = np.asarray(cells)
    if cells.shape != (TIME_STEPS, PITCHES):
        raise ValueError(f"mixture shape must be {(TIME_STEPS, PITCHES)}, got {cells.shape}")
    if not np.isin(cells, (0, 1)).all():
        raise ValueError("mixture cells must be 0 or 1")
    return cells.astype(np.uint8)


def mixture_from_roll(roll: np.ndarray) -> np.ndarray:
    """Collapse the instrument axis: sum channels and clip to 1."""
    roll = np.asarray(roll)
    if roll.ndim != 3:
        raise ValueError(f"expected a (T, P, C) roll, got ndim={roll.ndim}")
    return np.minimum(roll.sum(axis=2), 1).astype(np.uint8)


@dataclass
class Phrase:
    """One windowed phrase of a song, with its origin for traceability."""

    roll: np.ndarray  # (TIME_STEPS, PITCHES, INSTRUMENTS) uint8
    source_id: str
    bar_offset: int  # window start within the source song, in bars

    def mixture(self) -> np.ndarray:
        return mixture_from_roll(self.roll)
