"""Synthetic multi-speaker dialogues.

A dialogue is a timeline of speaker turns. Each turn is one transcript
segment whose words split its span evenly. Frame features sum, over the
active speakers, a fixed speaker signature and the embedding of the word
being spoken, plus Gaussian noise. Signatures and word embeddings come from
a corpus-level bank so a speaker id sounds the same in every dialogue.
"""

from __future__ import annotations

import json
import logging
import zipfile
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from numpy.lib import format as npy_format
from scipy.ndimage import uniform_filter1d

from .rttm import RttmSegment, write_rttm
from .transcript import NUM_SPEAKERS, Segment, StructuredTranscript, segments_to_rttm, write_transcript_jsonl

log = logging.getLogger(__name__)

TIME_GRID = 0.1
SMOOTH_WIDTH = 5


@dataclass(frozen=True)
class DialogueConfig:
    num_speakers: int = 2
    duration: float = 20.0
    frame_rate: int = 50
    feature_dim: int = 32
    overlap_ratio: float = 0.2
    words_per_turn: tuple[int, int] = (2, 6)
    word_duration: tuple[float, float] = (0.3, 0.6)
    pause: tuple[float, float] = (0.1, 0.8)
    vocab_size: int = 64
    signature_scale: float = 1.0
    content_scale: float = 0.6
    noise_scale: float = 0.2
    signature_seed: int = 0
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.num_speakers <= NUM_SPEAKERS:
            raise ValueError(f"num_speakers must be in 1..{NUM_SPEAKERS}")
        if not self.duration > 0:
            raise ValueError("duration must be positive")
        if not 0 <= self.overlap_ratio <= 1:
            raise ValueError("overlap_ratio must lie in [0, 1]")
        if self.words_per_turn[0] < 1 or self.words_per_turn[0] > self.words_per_turn[1]:
            raise ValueError("words_per_turn must be an increasing pair starting at >= 1")
        object.__setattr__(self, "words_per_turn", tuple(self.words_per_turn))
        object.__setattr__(self, "word_duration", tuple(self.word_duration))
        object.__setattr__(self, "pause", tuple(self.pause))

    @property
    def num_frames(self) -> int:
        return int(round(self.duration * self.frame_rate))


@dataclass
class SyntheticDialogue:
    dialogue_id: str
    frames: np.ndarray  # [T, F]
    layer_stack: np.ndarray  # [3, T, F]
    activity_truth: np.ndarray  # [T, 4], 0/1
    transcript: StructuredTranscript
    rttm: list[RttmSegment]
    frame_rate: int
    achieved_overlap: float
    overlap_feasible: bool = True

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    def speakers(self) -> list[int]:
        return self.transcript.speakers()


@dataclass(frozen=True)
class SignatureBank:
    signatures: np.ndarray  # [4, F]
    word_embeddings: np.ndarray  # [V, F]


def signature_bank(cfg: DialogueConfig) -> SignatureBank:
    rng = np.random.Generator(np.random.PCG64(cfg.signature_seed))
    sig = rng.standard_normal((NUM_SPEAKERS, cfg.feature_dim)) * cfg.signature_scale
    words = rng.standard_normal((cfg.vocab_size, cfg.feature_dim)) * cfg.content_scale
    return SignatureBank(sig, words)


def _grid(t: float) -> float:
    return round(round(t / TIME_GRID) * TIME_GRID, 1)


def _frame(t: float, frame_rate: int) -> int:
    return int(round(t * frame_rate))


def _turn_length(rng, cfg, n_words) -> float:
    per_word = rng.uniform(*cfg.word_duration)
    return max(TIME_GRID, _grid(n_words * per_word))


def _sample_turns(cfg: DialogueConfig, rng, speakers: list[int]) -> tuple[list[tuple], bool]:
    """Return ``[(speaker, start, n_words, end)]`` and whether the overlap target was reachable."""
    if cfg.overlap_ratio >= 1.0:
        # fully overlapped mixture: one utterance per speaker, all spanning [0, length)
        counts = [int(rng.integers(cfg.words_per_turn[0], cfg.words_per_turn[1] + 1)) for _ in speakers]
        length = min(_turn_length(rng, cfg, max(counts)), _grid(cfg.duration))
        return [(spk, 0.0, n, length) for spk, n in zip(speakers, counts)], len(speakers) > 1

    turns: list[tuple] = []
    last_end = {s: -1.0 for s in speakers}
    speech = overlap = 0.0
    t = _grid(rng.uniform(0.0, cfg.pause[1]))
    feasible = len(speakers) > 1 or cfg.overlap_ratio == 0
    counts = {s: 0 for s in speakers}
    while True:
        n = int(rng.integers(cfg.words_per_turn[0], cfg.words_per_turn[1] + 1))
        length = _turn_length(rng, cfg, n)
        start = t
        if turns and len(speakers) > 1:
            _, prev_start, _, prev_end = turns[-1]
            ratio = overlap / speech if speech else 0.0
            if ratio < cfg.overlap_ratio:
                # pull the onset back into the previous turn by just enough to hit the target
                need = (cfg.overlap_ratio * (speech + length) - overlap) / (1 + cfg.overlap_ratio)
                room = min(prev_end - prev_start, length) - TIME_GRID
                shift = _grid(min(max(need, TIME_GRID), room))
                if shift > 0:
                    start = max(_grid(prev_end - shift), _grid(prev_start + TIME_GRID))
        busy = {s for s in speakers if last_end[s] > start}
        free = [s for s in speakers if s not in busy and (not turns or s != turns[-1][0] or len(speakers) == 1)]
        if not free:
            start = t
            free = [s for s in speakers if last_end[s] <= start and (not turns or s != turns[-1][0] or len(speakers) == 1)]
            if not free:
                free = [s for s in speakers if last_end[s] <= start]
        fewest = min(counts[s] for s in free)
        spk = int(rng.choice([s for s in free if counts[s] == fewest]))
        end = _grid(start + length)
        if end > cfg.duration:
            break
        # overlap added: time this turn shares with speech already on the timeline
        shared = _covered(turns, start, end)
        speech += (end - start) - shared
        overlap += shared
        turns.append((spk, start, n, end))
        counts[spk] += 1
        last_end[spk] = end
        t = _grid(max(t, end) + rng.uniform(*cfg.pause))
    return turns, feasible


def _covered(turns, start, end) -> float:
    """Length of ``[start, end)`` already covered by at least one turn."""
    spans = sorted((max(s, start), min(e, end)) for _, s, _, e in turns if e > start and s < end)
    total, cur_s, cur_e = 0.0, None, None
    for s, e in spans:
        if cur_e is None or s > cur_e:
            if cur_e is not None:
                total += cur_e - cur_s
            cur_s, cur_e = s, e
        else:
            cur_e = max(cur_e, e)
    if cur_e is not None:
        total += cur_e - cur_s
    return total


def activity_from_transcript(tr: StructuredTranscript, num_frames: int, frame_rate: int) -> np.ndarray:
    act = np.zeros((num_frames, NUM_SPEAKERS), dtype=np.float64)
    for seg in tr.segments:
        act[_frame(seg.start, frame_rate) : _frame(seg.end, frame_rate), seg.speaker - 1] = 1.0
    return act


def overlap_ratio(activity: np.ndarray) -> float:
    """Overlapped speech time over total speech time."""
    n = (np.asarray(activity) > 0.5).sum(axis=1)
    speech = int((n >= 1).sum())
    return float((n >= 2).sum()) / speech if speech else 0.0


def build_layer_stack(frames: np.ndarray, rng, noise_scale: float) -> np.ndarray:
    smooth = uniform_filter1d(frames, size=SMOOTH_WIDTH, axis=0, mode="nearest")
    noisy = frames + rng.standard_normal(frames.shape) * noise_scale
    return np.stack([frames, smooth, noisy])


def generate_dialogue(cfg: DialogueConfig, dialogue_id: str | None = None,
                      bank: SignatureBank | None = None) -> SyntheticDialogue:
    """Deterministic in ``cfg.seed`` (and ``cfg.signature_seed`` for the bank)."""
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    bank = bank or signature_bank(cfg)
    speakers = sorted(int(s) for s in rng.choice(np.arange(1, NUM_SPEAKERS + 1), cfg.num_speakers, replace=False))
    turns, feasible = _sample_turns(cfg, rng, speakers)
    segments = []
    for spk, start, n, end in turns:
        words = tuple(int(w) for w in rng.integers(0, cfg.vocab_size, n))
        segments.append(Segment(spk, start, words, end))
    tr = StructuredTranscript(segments)

    T = cfg.num_frames
    frames = rng.standard_normal((T, cfg.feature_dim)) * cfg.noise_scale
    for seg in tr.segments:
        a, b = _frame(seg.start, cfg.frame_rate), _frame(seg.end, cfg.frame_rate)
        frames[a:b] += bank.signatures[seg.speaker - 1]
        for w, (ws, we) in zip(seg.words, seg.word_times()):
            frames[_frame(ws, cfg.frame_rate) : _frame(we, cfg.frame_rate)] += bank.word_embeddings[w]
    activity = activity_from_transcript(tr, T, cfg.frame_rate)
    achieved = overlap_ratio(activity)
    did = dialogue_id or f"dlg{cfg.seed:06d}"
    if feasible and abs(achieved - cfg.overlap_ratio) > 0.1:
        log.warning("dialogue %s: overlap %.3f misses target %.3f", did, achieved, cfg.overlap_ratio)
    return SyntheticDialogue(
        dialogue_id=did,
        frames=frames,
        layer_stack=build_layer_stack(frames, rng, cfg.noise_scale),
        activity_truth=activity,
        transcript=tr,
        rttm=segments_to_rttm(did, tr),
        frame_rate=cfg.frame_rate,
        achieved_overlap=achieved,
        overlap_feasible=feasible,
    )


def turns_per_speaker(tr: StructuredTranscript) -> dict[int, int]:
    out: dict[int, int] = {}
    for seg in tr.segments:
        out[seg.speaker] = out.get(seg.speaker, 0) + 1
    return out


# -- corpus -------------------------------------------------------------------

SPLITS = ("train", "dev", "test")


@dataclass(frozen=True)
class CorpusConfig:
    dialogue: DialogueConfig = field(default_factory=DialogueConfig)
    max_speakers: int = 4
    min_speakers: int = 1
    num_train: int = 50
    num_dev: int = 0
    num_test: int = 10
    seed: int = 0

    def split_sizes(self) -> dict[str, int]:
        return {"train": self.num_train, "dev": self.num_dev, "test": self.num_test}

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dialogue"] = {k: list(v) if isinstance(v, tuple) else v for k, v in d["dialogue"].items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusConfig":
        d = dict(d)
        dlg = DialogueConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.pop("dialogue", {}).items()})
        return cls(dialogue=dlg, **d)


@dataclass
class Corpus:
    config: CorpusConfig
    splits: dict[str, list[SyntheticDialogue]]

    def all(self) -> list[SyntheticDialogue]:
        return [d for s in SPLITS for d in self.splits.get(s, [])]


def generate_corpus(cfg: CorpusConfig) -> Corpus:
    """Dialogue ``i`` (counted across splits) uses seed ``cfg.seed + i``."""
    if not 1 <= cfg.min_speakers <= cfg.max_speakers <= NUM_SPEAKERS:
        raise ValueError("speaker-count range must satisfy 1 <= min <= max <= 4")
    bank = signature_bank(cfg.dialogue)
    splits: dict[str, list[SyntheticDialogue]] = {}
    index = 0
    for split in SPLITS:
        items = []
        for _ in range(cfg.split_sizes()[split]):
            seed = cfg.seed + index
            pick = np.random.Generator(np.random.PCG64([seed, 1]))
            n_spk = int(pick.integers(cfg.min_speakers, cfg.max_speakers + 1))
            dcfg = replace(cfg.dialogue, num_speakers=n_spk, seed=seed)
            items.append(generate_dialogue(dcfg, f"{split}{index:05d}", bank))
            index += 1
        splits[split] = items
    return Corpus(cfg, splits)


def corpus_statistics(dialogues: list[SyntheticDialogue]) -> dict:
    speech = ovl = dur = 0.0
    counts = {n: 0 for n in range(1, NUM_SPEAKERS + 1)}
    for d in dialogues:
        n = d.activity_truth.sum(axis=1)
        speech += float((n >= 1).sum()) / d.frame_rate
        ovl += float((n >= 2).sum()) / d.frame_rate
        dur += d.num_frames / d.frame_rate
        counts[len(d.speakers()) or 1] += 1
    total = max(1, len(dialogues))
    return {
        "dialogues": len(dialogues),
        "duration_s": round(dur, 3),
        "speech_s": round(speech, 3),
        "overlap_s": round(ovl, 3),
        "overlap_ratio": ovl / speech if speech else 0.0,
        "speaker_proportion": {str(k): v / total for k, v in counts.items()},
    }


def format_statistics_table(stats: dict[str, dict]) -> str:
    head = f"{'split':<6} {'dlgs':>5} {'dur(s)':>9} {'speech(s)':>10} {'ovl(s)':>8} {'ovl%':>6} " + " ".join(
        f"{k}spk%".rjust(6) for k in range(1, NUM_SPEAKERS + 1)
    )
    lines = [head]
    for split, s in stats.items():
        props = " ".join(f"{100 * s['speaker_proportion'][str(k)]:6.1f}" for k in range(1, NUM_SPEAKERS + 1))
        lines.append(
            f"{split:<6} {s['dialogues']:>5} {s['duration_s']:>9.1f} {s['speech_s']:>10.1f} "
            f"{s['overlap_s']:>8.1f} {100 * s['overlap_ratio']:>6.1f} {props}"
        )
    return "\n".join(lines)


# fixed zip timestamp so archives are byte-identical across runs
_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)


def save_arrays(path, **arrays) -> None:
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            info = zipfile.ZipInfo(f"{name}.npy", date_time=_ZIP_EPOCH)
            with zf.open(info, "w") as fh:
                npy_format.write_array(fh, np.ascontiguousarray(arrays[name]), allow_pickle=False)


def load_arrays(path) -> dict[str, np.ndarray]:
    with np.load(path, allow_pickle=False) as data:
        return {k: data[k] for k in data.files}


def write_corpus(corpus: Corpus, out_dir) -> Path:
    out = Path(out_dir)
    (out / "dialogues").mkdir(parents=True, exist_ok=True)
    entries = []
    for split in SPLITS:
        items = corpus.splits.get(split, [])
        write_transcript_jsonl([(d.dialogue_id, d.transcript) for d in items], out / f"{split}.jsonl")
        for d in items:
            npz = Path("dialogues") / f"{d.dialogue_id}.npz"
            rttm = Path("dialogues") / f"{d.dialogue_id}.rttm"
            save_arrays(out / npz, frames=d.frames, layer_stack=d.layer_stack, activity=d.activity_truth)
            write_rttm(d.rttm, out / rttm)
            entries.append({
                "id": d.dialogue_id,
                "split": split,
                "arrays": npz.as_posix(),
                "rttm": rttm.as_posix(),
                "frame_rate": d.frame_rate,
                "achieved_overlap": d.achieved_overlap,
                "overlap_feasible": d.overlap_feasible,
            })
    stats = {s: corpus_statistics(corpus.splits.get(s, [])) for s in SPLITS}
    manifest = {
        "format_version": 1,
        "config": corpus.config.to_dict(),
        "transcripts": {s: f"{s}.jsonl" for s in SPLITS},
        "dialogues": entries,
        "statistics": stats,
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def load_corpus(path) -> Corpus:
    """Read a corpus written by :func:`write_corpus` (path to the manifest or its directory)."""
    from .rttm import read_rttm
    from .transcript import read_transcript_jsonl

    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    root = path.parent
    manifest = json.loads(path.read_text(encoding="utf-8"))
    cfg = CorpusConfig.from_dict(manifest["config"])
    transcripts = {}
    for split, name in manifest["transcripts"].items():
        transcripts.update(read_transcript_jsonl(root / name))
    splits: dict[str, list[SyntheticDialogue]] = {s: [] for s in SPLITS}
    for e in manifest["dialogues"]:
        arrays = load_arrays(root / e["arrays"])
        splits[e["split"]].append(SyntheticDialogue(
            dialogue_id=e["id"],
            frames=arrays["frames"],
            layer_stack=arrays["layer_stack"],
            activity_truth=arrays["activity"],
            transcript=transcripts[e["id"]],
            rttm=read_rttm(root / e["rttm"]),
            frame_rate=int(e["frame_rate"]),
            achieved_overlap=float(e["achieved_overlap"]),
            overlap_feasible=bool(e["overlap_feasible"]),
        ))
    return Corpus(cfg, splits)
