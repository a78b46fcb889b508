"""Directory-level ingestion: MIDI corpus -> per-split phrase datasets."""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

from .dataset import (
    SPLIT_NAMES,
    assign_splits,
    manifest_for,
    save_dataset,
    write_manifest,
)
from .midi import MidiParseError, parse_midi
from .pianoroll import Phrase
from .quantize import is_eligible, quantize_to_roll, window_phrases


@dataclass
class IngestReport:
    files_seen: int = 0
    files_eligible: int = 0
    parse_failures: int = 0
    unresolved_note_ons: int = 0
    notes_dropped_out_of_range: int = 0
    notes_dropped_unclassified: int = 0
    phrases: dict[str, int] = field(default_factory=dict)
    dataset_paths: dict[str, str] = field(default_factory=dict)

    @property
    def total_phrases(self) -> int:
        return sum(self.phrases.values())


def ingest_directory(
    in_dir: str | os.PathLike,
    out_dir: str | os.PathLike,
    fractions: tuple[int, int, int] = (90, 5, 5),
    seed: int = 0,
) -> IngestReport:
    """Parse every .mid/.midi file under `in_dir`, keep eligible songs,
    window them into phrases, and write one dataset+manifest per split.

    Deterministic for a fixed corpus and seed: files are visited in sorted
    order and split assignment is seeded.
    """
    in_dir = Path(in_dir)
    out_dir = Path(out_dir)
    report = IngestReport()

    per_source: dict[str, list[Phrase]] = {}
    files = sorted(
        p for p in in_dir.rglob("*") if p.suffix.lower() in (".mid", ".midi")
    )
    for path in files:
        report.files_seen += 1
        source_id = path.relative_to(in_dir).as_posix()
        try:
            parsed = parse_midi(path.read_bytes())
        except MidiParseError:
            report.parse_failures += 1
            continue
        report.unresolved_note_ons += parsed.unresolved_note_ons
        if not is_eligible(parsed.events, parsed.time_signatures):
            continue
        roll, stats = quantize_to_roll(parsed.events, parsed.ticks_per_quarter)
        report.notes_dropped_out_of_range += stats.dropped_out_of_range
        report.notes_dropped_unclassified += stats.dropped_unclassified
        report.files_eligible += 1
        phrases = window_phrases(roll, source_id)
        if phrases:
            per_source[source_id] = phrases

    assignment = assign_splits(sorted(per_source), fractions, seed)
    out_dir.mkdir(parents=True, exist_ok=True)
    for split in SPLIT_NAMES:
        split_sources = sorted(s for s, name in assignment.items() if name == split)
        phrases = [p for source in split_sources for p in per_source[source]]
        path = out_dir / f"{split}.m2m"
        save_dataset(phrases, path)
        write_manifest(manifest_for(phrases, split), path)
        report.phrases[split] = len(phrases)
        report.dataset_paths[split] = str(path)
    return report
