"""Bit-exact phrase dataset files and their UTF-8 manifest sidecars.

Binary layout (all integers little-endian):

    magic  "M2M1"                      4 bytes
    version u16                        = 1
    T, P, C u32 each
    phrase_count u64
    per phrase:
        source_id length u16 + UTF-8 bytes
        bar_offset u32
        cells bit-packed in (t, p, c) row-major order, MSB first,
        padded to a whole byte per phrase

Loads refuse bad magic, unknown versions, and truncation, reporting the
byte offset at which the problem was found.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .pianoroll import INSTRUMENTS, PITCHES, TIME_STEPS, Phrase, validate_roll

MAGIC = b"M2M1"
VERSION = 1


class DatasetError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


def save_dataset(phrases: list[Phrase], path: str | os.PathLike) -> None:
    """Write phrases to `path`; atomic (temp file + rename)."""
    out = bytearray()
    out += MAGIC
    out += struct.pack("<HIIIQ", VERSION, TIME_STEPS, PITCHES, INSTRUMENTS, len(phrases))
    for phrase in phrases:
        roll = validate_roll(phrase.roll)
        source = phrase.source_id.encode("utf-8")
        if len(source) > 0xFFFF:
            raise ValueError(f"source_id too long: {phrase.source_id!r}")
        out += struct.pack("<H", len(source)) + source
        out += struct.pack("<I", phrase.bar_offset)
        out += np.packbits(roll.reshape(-1)).tobytes()
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(out)
    os.replace(tmp, path)


def load_dataset(path: str | os.PathLike) -> list[Phrase]:
    with open(path, "rb") as fh:
        data = fh.read()

    def need(pos: int, n: int, what: str) -> int:
        if pos + n > len(data):
            raise DatasetError(f"truncated {what}", pos)
        return pos + n

    need(0, 4, "magic")
    if data[:4] != MAGIC:
        raise DatasetError(f"bad magic {data[:4]!r}", 0)
    need(4, 22, "header")
    version, t, p, c, count = struct.unpack_from("<HIIIQ", data, 4)
    if version != VERSION:
        raise DatasetError(f"unsupported version {version}", 4)
    if (t, p, c) != (TIME_STEPS, PITCHES, INSTRUMENTS):
        raise DatasetError(f"unexpected dims {(t, p, c)}", 6)
    cell_bytes = (t * p * c + 7) // 8
    pos = 26
    phrases: list[Phrase] = []
    for _ in range(count):
        pos_after = need(pos, 2, "source_id length")
        (source_len,) = struct.unpack_from("<H", data, pos)
        pos = need(pos_after, source_len, "source_id")
        source_id = data[pos_after:pos].decode("utf-8")
        pos_after = need(pos, 4, "bar_offset")
        (bar_offset,) = struct.unpack_from("<I", data, pos)
        pos = need(pos_after, cell_bytes, "cell payload")
        bits = np.unpackbits(
            np.frombuffer(data, dtype=np.uint8, count=cell_bytes, offset=pos_after),
            count=t * p * c,
        )
        phrases.append(Phrase(bits.reshape(t, p, c), source_id, bar_offset))
    if pos != len(data):
        raise DatasetError("trailing bytes after last phrase", pos)
    return phrases


@dataclass
class DatasetManifest:
    """Per-split sidecar: which source contributed which phrase range."""

    split: str
    dims: tuple[int, int, int]
    phrase_count: int
    sources: list[tuple[str, int, int]] = field(default_factory=list)  # (id, start, end)

    def validate(self) -> None:
        covered = 0
        for source_id, start, end in self.sources:
            if start != covered or end < start:
                raise ValueError(f"manifest ranges not contiguous at {source_id!r}")
            covered = end
        if covered != self.phrase_count:
            raise ValueError(
                f"manifest covers {covered} phrases, file has {self.phrase_count}"
            )


def manifest_for(phrases: list[Phrase], split: str) -> DatasetManifest:
    sources: list[tuple[str, int, int]] = []
    for i, phrase in enumerate(phrases):
        if sources and sources[-1][0] == phrase.source_id:
            sources[-1] = (phrase.source_id, sources[-1][1], i + 1)
        else:
            sources.append((phrase.source_id, i, i + 1))
    manifest = DatasetManifest(
        split, (TIME_STEPS, PITCHES, INSTRUMENTS), len(phrases), sources
    )
    manifest.validate()
    return manifest


def manifest_path(dataset_path: str | os.PathLike) -> str:
    return f"{os.fspath(dataset_path)}.manifest"


def write_manifest(manifest: DatasetManifest, dataset_path: str | os.PathLike) -> str:
    manifest.validate()
    lines = [
        "m2m-manifest 1",
        f"split {manifest.split}",
        "dims {} {} {}".format(*manifest.dims),
        f"phrases {manifest.phrase_count}",
    ]
    lines += [
        f"source\t{source_id}\t{start}\t{end}"
        for source_id, start, end in manifest.sources
    ]
    path = manifest_path(dataset_path)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    return path


def read_manifest(dataset_path: str | os.PathLike) -> DatasetManifest:
    with open(manifest_path(dataset_path), encoding="utf-8") as fh:
        lines = [line.rstrip("\n") for line in fh if line.strip()]
    if not lines or lines[0] != "m2m-manifest 1":
        raise ValueError("not a recognized manifest file")
    split = lines[1].split(" ", 1)[1]
    dims = tuple(int(x) for x in lines[2].split(" ")[1:])
    count = int(lines[3].split(" ")[1])
    sources = []
    for line in lines[4:]:
        _, source_id, start, end = line.split("\t")
        sources.append((source_id, int(start), int(end)))
    manifest = DatasetManifest(split, dims, count, sources)  # type: ignore[arg-type]
    manifest.validate()
    return manifest


SPLIT_NAMES = ("train", "valid", "test")


def assign_splits(
    source_ids: list[str], fractions: tuple[int, int, int], seed: int
) -> dict[str, str]:
    """Deterministically assign whole sources to train/valid/test.

    Splitting by source (never by phrase) keeps overlapping windows of one
    song inside a single split. Largest-remainder rounding on the shuffled
    source list.
    """
    if sum(fractions) != 100 or any(f < 0 for f in fractions):
        raise ValueError(f"split fractions must be non-negative and sum to 100: {fractions}")
    ordered = sorted(source_ids)
    rng = np.random.default_rng(seed)
    rng.shuffle(ordered)
    n = len(ordered)
    quotas = [n * f / 100 for f in fractions]
    counts = [int(q) for q in quotas]
    for _ in range(n - sum(counts)):
        i = max(range(3), key=lambda j: (quotas[j] - counts[j], -j))
        counts[i] += 1
    assignment = {}
    cursor = 0
    for split, count in zip(SPLIT_NAMES, counts):
        for source_id in ordered[cursor : cursor + count]:
            assignment[source_id] = split
        cursor += count
    return assignment
