"""Structured transcripts, their token serialization, and the JSONL format.

A transcript is an ordered list of segments ``(speaker, start, words, end)``.
As a token sequence each segment becomes ``<spk> <t_start> words... <t_end>``
and the whole sequence ends with ``<EOS>``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

from .errors import ParseError
from .rttm import RttmSegment

NUM_SPEAKERS = 4


@dataclass(frozen=True)
class Segment:
    speaker: int
    start: float
    words: tuple
    end: float

    def __post_init__(self):
        if not 1 <= self.speaker <= NUM_SPEAKERS:
            raise ValueError(f"speaker id must be in 1..{NUM_SPEAKERS}, got {self.speaker}")
        if self.end < self.start:
            raise ValueError(f"segment ends before it starts: {self.start} > {self.end}")
        object.__setattr__(self, "words", tuple(self.words))

    def word_times(self) -> list[tuple[float, float]]:
        """Pseudo word timestamps: the segment span split evenly across words."""
        n = len(self.words)
        step = (self.end - self.start) / n if n else 0.0
        return [(self.start + i * step, self.start + (i + 1) * step) for i in range(n)]


def _order_key(seg: Segment):
    return (seg.start, seg.speaker)


@dataclass
class StructuredTranscript:
    segments: list[Segment] = field(default_factory=list)

    def __post_init__(self):
        self.segments = sorted(self.segments, key=_order_key)

    def speaker_words(self) -> dict[int, list]:
        """Words of every speaker, concatenated in chronological order."""
        out: dict[int, list] = {}
        for seg in self.segments:
            out.setdefault(seg.speaker, []).extend(seg.words)
        return out

    def speaker_timed_words(self) -> dict[int, list[tuple]]:
        out: dict[int, list] = {}
        for seg in self.segments:
            out.setdefault(seg.speaker, []).extend(
                (w, s, e) for w, (s, e) in zip(seg.words, seg.word_times())
            )
        return out

    def utterances(self) -> list[list]:
        return [list(seg.words) for seg in self.segments]

    def timed_utterances(self) -> list[list[tuple]]:
        return [[(w, s, e) for w, (s, e) in zip(seg.words, seg.word_times())] for seg in self.segments]

    def speakers(self) -> list[int]:
        return sorted({seg.speaker for seg in self.segments})


class TokenVocabulary:
    """Contiguous id ranges: content words, speaker tags, time tags, SOT, EOS, PAD.

    Time tags quantize seconds to ``time_step`` bins on ``[0, max_time]``.
    """

    def __init__(self, num_words: int = 64, max_time: float = 30.0, time_step: float = 0.1):
        self.num_words = num_words
        self.max_time = max_time
        self.time_step = time_step
        self.num_times = int(round(max_time / time_step)) + 1
        self.speaker_base = num_words
        self.time_base = self.speaker_base + NUM_SPEAKERS
        self.sot = self.time_base + self.num_times
        self.eos = self.sot + 1
        self.pad = self.eos + 1
        self.size = self.pad + 1

    def to_dict(self) -> dict:
        return {"num_words": self.num_words, "max_time": self.max_time, "time_step": self.time_step}

    def speaker_token(self, speaker: int) -> int:
        if not 1 <= speaker <= NUM_SPEAKERS:
            raise ValueError(f"speaker id must be in 1..{NUM_SPEAKERS}, got {speaker}")
        return self.speaker_base + speaker - 1

    def time_token(self, seconds: float) -> int:
        if not math.isfinite(seconds) or seconds < 0 or seconds > self.max_time + 1e-9:
            raise ValueError(f"time {seconds} outside [0, {self.max_time}]")
        return self.time_base + int(round(seconds / self.time_step))

    def word_token(self, word: int) -> int:
        if not 0 <= int(word) < self.num_words:
            raise ValueError(f"word id {word} outside [0, {self.num_words})")
        return int(word)

    def is_word(self, tok: int) -> bool:
        return 0 <= tok < self.speaker_base

    def is_speaker(self, tok: int) -> bool:
        return self.speaker_base <= tok < self.time_base

    def is_time(self, tok: int) -> bool:
        return self.time_base <= tok < self.sot

    def token_time(self, tok: int) -> float:
        return round((tok - self.time_base) * self.time_step, 6)

    def token_speaker(self, tok: int) -> int:
        return tok - self.speaker_base + 1

    def describe(self, tok: int) -> str:
        if self.is_word(tok):
            return f"w{tok}"
        if self.is_speaker(tok):
            return f"<spk{self.token_speaker(tok)}>"
        if self.is_time(tok):
            return f"<t={self.token_time(tok):.2f}>"
        return {self.sot: "<SOT>", self.eos: "<EOS>", self.pad: "<PAD>"}.get(tok, f"<?{tok}>")


def serialize_transcript(tr: StructuredTranscript, vocab: TokenVocabulary) -> list[int]:
    tokens: list[int] = []
    for seg in sorted(tr.segments, key=_order_key):
        tokens.append(vocab.speaker_token(seg.speaker))
        tokens.append(vocab.time_token(seg.start))
        tokens.extend(vocab.word_token(w) for w in seg.words)
        tokens.append(vocab.time_token(seg.end))
    tokens.append(vocab.eos)
    return tokens


def parse_structured_tokens(tokens: Iterable[int], vocab: TokenVocabulary) -> tuple[StructuredTranscript, int]:
    """Best-effort inverse of :func:`serialize_transcript`.

    Never raises. Every discarded partial segment and every stray token
    outside a segment adds one to the returned warning count. Reading stops
    at the first ``<EOS>``.
    """
    segments: list[Segment] = []
    warnings = 0
    speaker = start = None
    words: list[int] = []
    state = "idle"  # idle -> have_speaker -> in_words

    for tok in tokens:
        tok = int(tok)
        if tok == vocab.eos:
            break
        if vocab.is_speaker(tok):
            if state != "idle":
                warnings += 1
            speaker, start, words, state = vocab.token_speaker(tok), None, [], "have_speaker"
        elif vocab.is_time(tok):
            if state == "have_speaker":
                start, state = vocab.token_time(tok), "in_words"
            elif state == "in_words":
                end = vocab.token_time(tok)
                if end < start:
                    start, end = end, start
                segments.append(Segment(speaker, start, tuple(words), end))
                state = "idle"
            else:
                warnings += 1
        elif vocab.is_word(tok):
            if state == "in_words":
                words.append(tok)
            else:
                if state == "have_speaker":
                    state = "idle"
                warnings += 1
        else:
            warnings += 1
    if state != "idle":
        warnings += 1
    return StructuredTranscript(segments), warnings


# -- JSONL ------------------------------------------------------------------

def transcript_to_json(dialogue_id: str, tr: StructuredTranscript) -> dict:
    return {
        "dialogue_id": dialogue_id,
        "segments": [
            {"speaker": s.speaker, "start": s.start, "end": s.end, "words": list(s.words)}
            for s in tr.segments
        ],
    }


def transcript_from_json(obj: dict) -> tuple[str, StructuredTranscript]:
    segs = [
        Segment(int(s["speaker"]), float(s["start"]), tuple(s["words"]), float(s["end"]))
        for s in obj["segments"]
    ]
    return str(obj["dialogue_id"]), StructuredTranscript(segs)


def write_transcript_jsonl(items: Iterable[tuple[str, StructuredTranscript]], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for did, tr in items:
            fh.write(json.dumps(transcript_to_json(did, tr), sort_keys=True) + "\n")


def iter_transcript_jsonl(path) -> Iterator[tuple[str, StructuredTranscript]]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                yield transcript_from_json(json.loads(line))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ParseError(str(exc), lineno) from exc


def read_transcript_jsonl(path) -> dict[str, StructuredTranscript]:
    return dict(iter_transcript_jsonl(Path(path)))


def segments_to_rttm(file_id: str, tr: StructuredTranscript) -> list[RttmSegment]:
    return [
        RttmSegment(file_id, seg.start, seg.end - seg.start, f"spk{seg.speaker}")
        for seg in tr.segments
    ]
