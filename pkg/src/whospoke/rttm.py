"""RTTM segment lists.

Lines follow ``SPEAKER <file> 1 <onset> <dur> <NA> <NA> <speaker> <NA> <NA>``
with onset and duration written to the millisecond.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

from .errors import ParseError


@dataclass(frozen=True)
class RttmSegment:
    file_id: str
    onset: float
    duration: float
    speaker: str

    def __post_init__(self):
        if self.onset < 0 or self.duration < 0:
            raise ValueError(f"negative onset/duration in {self}")

    @property
    def end(self) -> float:
        return self.onset + self.duration


def format_rttm_line(seg: RttmSegment) -> str:
    return f"SPEAKER {seg.file_id} 1 {seg.onset:.3f} {seg.duration:.3f} <NA> <NA> {seg.speaker} <NA> <NA>"


def parse_rttm_line(line: str, lineno: int = 0) -> RttmSegment | None:
    """Parse one line; blank lines and ``#``/``;;`` comments give ``None``."""
    text = line.strip()
    if not text or text.startswith("#") or text.startswith(";;"):
        return None
    fields = text.split()
    if len(fields) < 8 or fields[0] != "SPEAKER":
        raise ParseError(f"not an RTTM SPEAKER line: {text!r}", lineno)
    try:
        onset, duration = float(fields[3]), float(fields[4])
        return RttmSegment(fields[1], onset, duration, fields[7])
    except ValueError as exc:
        raise ParseError(str(exc), lineno) from exc


def write_rttm(segments: Iterable[RttmSegment], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for seg in segments:
            fh.write(format_rttm_line(seg) + "\n")


def read_rttm(path) -> list[RttmSegment]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            seg = parse_rttm_line(line, lineno)
            if seg is not None:
                out.append(seg)
    return out


def activity_to_segments(file_id: str, active, frame_rate: float, labels=None) -> list[RttmSegment]:
    """Runs of active frames per column, as segments sorted by onset."""
    import numpy as np

    active = np.asarray(active, dtype=bool)
    labels = labels or [f"spk{s + 1}" for s in range(active.shape[1])]
    out = []
    for s in range(active.shape[1]):
        padded = np.concatenate([[False], active[:, s], [False]])
        edges = np.flatnonzero(padded[1:] != padded[:-1])
        for on, off in zip(edges[::2], edges[1::2]):
            out.append(RttmSegment(file_id, on / frame_rate, (off - on) / frame_rate, labels[s]))
    return sorted(out, key=lambda seg: (seg.onset, seg.speaker))
