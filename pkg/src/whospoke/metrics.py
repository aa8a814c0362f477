"""Multi-speaker evaluation: DER and the CP / TCP / ORC / TCORC word error rates.

Streams are token sequences. Timed streams hold ``(word, start, end)``
triples; two timed words may be aligned (match or substitution) only when
their intervals, each widened by ``collar`` on both sides, overlap.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Hashable, Mapping, Sequence

import numba
import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import UnsupportedSizeError
from .rttm import RttmSegment

MAX_CP_STREAMS = 8
MAX_ORC_UTTERANCES = 12
MAX_ORC_STREAMS = 4
DEFAULT_COLLAR = 0.5
DER_COLLAR_PRESETS = (0.0, 0.25)
DER_FRAME = 0.01


@dataclass(frozen=True)
class WerBreakdown:
    substitutions: int = 0
    insertions: int = 0
    deletions: int = 0
    ref_words: int = 0

    @property
    def errors(self) -> int:
        return self.substitutions + self.insertions + self.deletions

    @property
    def rate(self) -> float:
        return self.errors / max(1, self.ref_words)

    def __add__(self, other: "WerBreakdown") -> "WerBreakdown":
        return WerBreakdown(
            self.substitutions + other.substitutions,
            self.insertions + other.insertions,
            self.deletions + other.deletions,
            self.ref_words + other.ref_words,
        )

    def to_dict(self) -> dict:
        return {
            "substitutions": self.substitutions,
            "insertions": self.insertions,
            "deletions": self.deletions,
            "ref_words": self.ref_words,
            "errors": self.errors,
            "rate": self.rate,
            "empty_reference": self.ref_words == 0,
        }


# -- edit distance kernels -------------------------------------------------

@numba.njit(cache=True)
def _edit_table(ref, hyp, rs, re, hs, he, collar, timed):
    n, m = ref.shape[0], hyp.shape[0]
    big = n + m + 1
    D = np.empty((n + 1, m + 1), dtype=np.int64)
    for i in range(n + 1):
        D[i, 0] = i
    for j in range(m + 1):
        D[0, j] = j
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            best = min(D[i - 1, j] + 1, D[i, j - 1] + 1)
            if (not timed) or (rs[i - 1] - collar <= he[j - 1] + collar and hs[j - 1] - collar <= re[i - 1] + collar):
                diag = D[i - 1, j - 1] + (0 if ref[i - 1] == hyp[j - 1] else 1)
            else:
                diag = big
            D[i, j] = min(best, diag)
    return D


@numba.njit(cache=True)
def _edit_cost(ref, hyp, rs, re, hs, he, collar, timed):
    n, m = ref.shape[0], hyp.shape[0]
    big = n + m + 1
    prev = np.arange(m + 1).astype(np.int64)
    cur = np.empty(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        cur[0] = i
        for j in range(1, m + 1):
            best = min(prev[j] + 1, cur[j - 1] + 1)
            if (not timed) or (rs[i - 1] - collar <= he[j - 1] + collar and hs[j - 1] - collar <= re[i - 1] + collar):
                diag = prev[j - 1] + (0 if ref[i - 1] == hyp[j - 1] else 1)
            else:
                diag = big
            cur[j] = min(best, diag)
        prev, cur = cur, prev
    return prev[m]


class _Encoder:
    """Maps hashable tokens onto dense ints for the compiled kernels."""

    def __init__(self):
        self.ids: dict[Hashable, int] = {}

    def words(self, stream, timed: bool):
        toks = [w[0] for w in stream] if timed else list(stream)
        ids = np.fromiter((self.ids.setdefault(t, len(self.ids)) for t in toks), dtype=np.int64, count=len(toks))
        if timed:
            starts = np.fromiter((float(w[1]) for w in stream), dtype=np.float64, count=len(toks))
            ends = np.fromiter((float(w[2]) for w in stream), dtype=np.float64, count=len(toks))
        else:
            starts = ends = np.zeros(len(toks))
        return ids, starts, ends


def _check_timed(stream):
    for w in stream:
        if not (isinstance(w, (tuple, list)) and len(w) == 3):
            raise ValueError(f"timed stream entries must be (word, start, end), got {w!r}")


def _pair_cost(enc: _Encoder, ref, hyp, collar: float | None) -> int:
    timed = collar is not None
    r, rs, re = enc.words(ref, timed)
    h, hs, he = enc.words(hyp, timed)
    return int(_edit_cost(r, h, rs, re, hs, he, float(collar or 0.0), timed))


def _breakdown(enc: _Encoder, ref, hyp, collar: float | None) -> WerBreakdown:
    timed = collar is not None
    r, rs, re = enc.words(ref, timed)
    h, hs, he = enc.words(hyp, timed)
    c = float(collar or 0.0)
    D = _edit_table(r, h, rs, re, hs, he, c, timed)
    i, j = len(r), len(h)
    S = I = Dl = 0
    # backtrace from the end; ties prefer substitution/match, then insertion, then deletion
    while i > 0 or j > 0:
        if i > 0 and j > 0:
            allowed = (not timed) or (rs[i - 1] - c <= he[j - 1] + c and hs[j - 1] - c <= re[i - 1] + c)
            cost = 0 if r[i - 1] == h[j - 1] else 1
            if allowed and D[i, j] == D[i - 1, j - 1] + cost:
                S += cost
                i, j = i - 1, j - 1
                continue
        if j > 0 and D[i, j] == D[i, j - 1] + 1:
            I += 1
            j -= 1
        else:
            Dl += 1
            i -= 1
    return WerBreakdown(S, I, Dl, len(r))


def word_error(ref: Sequence, hyp: Sequence) -> WerBreakdown:
    """Levenshtein alignment with unit costs."""
    return _breakdown(_Encoder(), ref, hyp, None)


def timed_word_error(ref: Sequence, hyp: Sequence, collar: float = DEFAULT_COLLAR) -> WerBreakdown:
    _check_timed(ref)
    _check_timed(hyp)
    return _breakdown(_Encoder(), ref, hyp, collar)


# -- CP / TCP --------------------------------------------------------------

def _as_streams(streams) -> tuple[list, list]:
    if isinstance(streams, Mapping):
        labels = list(streams.keys())
        return labels, [list(streams[k]) for k in labels]
    streams = [list(s) for s in streams]
    return list(range(len(streams))), streams


@dataclass
class CpResult:
    breakdown: WerBreakdown
    mapping: dict  # ref label -> hyp label (None when matched to padding)
    unmatched_hyp: list = field(default_factory=list)

    @property
    def rate(self) -> float:
        return self.breakdown.rate


def _cp(ref_streams, hyp_streams, collar, approx) -> CpResult:
    ref_labels, refs = _as_streams(ref_streams)
    hyp_labels, hyps = _as_streams(hyp_streams)
    if collar is not None:
        for s in refs + hyps:
            _check_timed(s)
    k = max(len(refs), len(hyps), 1)
    if k > MAX_CP_STREAMS and not approx:
        raise UnsupportedSizeError(f"{k} speaker streams exceed the exact-mode cap of {MAX_CP_STREAMS}")
    refs = refs + [[]] * (k - len(refs))
    hyps = hyps + [[]] * (k - len(hyps))
    enc = _Encoder()
    cost = np.array([[_pair_cost(enc, r, h, collar) for h in hyps] for r in refs], dtype=np.int64)
    rows, cols = linear_sum_assignment(cost)
    total = WerBreakdown()
    mapping, unmatched = {}, []
    for i, j in zip(rows, cols):
        total = total + _breakdown(enc, refs[i], hyps[j], collar)
        hyp_label = hyp_labels[j] if j < len(hyp_labels) else None
        if i < len(ref_labels):
            mapping[ref_labels[i]] = hyp_label
        elif hyp_label is not None:
            unmatched.append(hyp_label)
    return CpResult(total, mapping, unmatched)


def cp_wer(ref_streams, hyp_streams, approx: bool = False) -> CpResult:
    """Concatenated minimum-permutation WER.

    Both sides are per-speaker token lists (a mapping label -> tokens or a
    plain list). The smaller side is padded with empty streams and the
    bijection minimising the summed edit cost is found by optimal assignment.
    """
    return _cp(ref_streams, hyp_streams, None, approx)


def tcp_wer(ref_streams, hyp_streams, collar: float = DEFAULT_COLLAR, approx: bool = False) -> CpResult:
    """Time-constrained CP-WER over ``(word, start, end)`` streams."""
    return _cp(ref_streams, hyp_streams, float(collar), approx)


# -- ORC / TCORC -----------------------------------------------------------

@dataclass
class OrcResult:
    breakdown: WerBreakdown
    assignment: list  # stream label per reference utterance
    approximate: bool = False

    @property
    def rate(self) -> float:
        return self.breakdown.rate


def _subset_concat(utts, mask):
    out = []
    for u, utt in enumerate(utts):
        if mask >> u & 1:
            out.extend(utt)
    return out


def _orc_exact(enc, utts, hyps, collar):
    U, K = len(utts), len(hyps)
    full = (1 << U) - 1
    cost = np.empty((K, full + 1), dtype=np.int64)
    for k in range(K):
        for mask in range(full + 1):
            cost[k, mask] = _pair_cost(enc, _subset_concat(utts, mask), hyps[k], collar)
    best = cost[0].copy()
    choice = np.zeros((K, full + 1), dtype=np.int64)
    choice[0] = np.arange(full + 1)
    for k in range(1, K):
        nxt = np.empty_like(best)
        for mask in range(full + 1):
            # enumerate the submask handed to stream k
            sub, top, arg = mask, None, 0
            while True:
                val = best[mask ^ sub] + cost[k, sub]
                if top is None or val < top:
                    top, arg = val, sub
                if sub == 0:
                    break
                sub = (sub - 1) & mask
            nxt[mask], choice[k, mask] = top, arg
        best = nxt
    assignment = [0] * U
    mask = full
    for k in range(K - 1, -1, -1):
        sub = int(choice[k, mask])
        for u in range(U):
            if sub >> u & 1:
                assignment[u] = k
        mask ^= sub
    return assignment


def _orc_local_search(enc, utts, hyps, collar):
    U, K = len(utts), len(hyps)

    def total(assign):
        return sum(
            _pair_cost(enc, [w for u in range(U) if assign[u] == k for w in utts[u]], hyps[k], collar)
            for k in range(K)
        )

    assign = []
    for u in range(U):
        trials = []
        for k in range(K):
            cand = assign + [k]
            part = [w for v in range(u + 1) if cand[v] == k for w in utts[v]]
            prefix = hyps[k][: len(part) + 2] if collar is None else hyps[k]
            trials.append(_pair_cost(enc, part, prefix, collar))
        assign.append(int(np.argmin(trials)))
    current = total(assign)
    improved = True
    while improved:
        improved = False
        for u in range(U):
            for k in range(K):
                if k == assign[u]:
                    continue
                cand = assign.copy()
                cand[u] = k
                val = total(cand)
                if val < current:
                    assign, current, improved = cand, val, True
    return assign


def _orc(ref_utterances, hyp_streams, collar, approx) -> OrcResult:
    utts = [list(u) for u in ref_utterances]
    hyp_labels, hyps = _as_streams(hyp_streams)
    if collar is not None:
        for s in utts + hyps:
            _check_timed(s)
    if not hyps:
        hyp_labels, hyps = [None], [[]]
    too_big = len(utts) > MAX_ORC_UTTERANCES or len(hyps) > MAX_ORC_STREAMS
    if too_big and not approx:
        raise UnsupportedSizeError(
            f"{len(utts)} utterances x {len(hyps)} streams exceed the exact-mode cap "
            f"({MAX_ORC_UTTERANCES} x {MAX_ORC_STREAMS})"
        )
    enc = _Encoder()
    if too_big:
        assign = _orc_local_search(enc, utts, hyps, collar)
    else:
        assign = _orc_exact(enc, utts, hyps, collar)
    total = WerBreakdown()
    for k, hyp in enumerate(hyps):
        ref = [w for u, utt in enumerate(utts) if assign[u] == k for w in utt]
        total = total + _breakdown(enc, ref, hyp, collar)
    return OrcResult(total, [hyp_labels[k] for k in assign], approximate=too_big)


def orc_wer(ref_utterances, hyp_streams, approx: bool = False) -> OrcResult:
    """Optimal reference combination WER.

    Each reference utterance is assigned to one hypothesis stream; a stream's
    reference is the concatenation of its utterances in the given (temporal)
    order. Exact search is a subset dynamic program over memoised per-stream
    edit costs; above the caps ``approx=True`` switches to greedy assignment
    plus single-move local search.
    """
    return _orc(ref_utterances, hyp_streams, None, approx)


def tcorc_wer(ref_utterances, hyp_streams, collar: float = DEFAULT_COLLAR, approx: bool = False) -> OrcResult:
    return _orc(ref_utterances, hyp_streams, float(collar), approx)


# -- DER -------------------------------------------------------------------

@dataclass
class DerResult:
    missed: float
    false_alarm: float
    confusion: float
    total: float  # scored reference speech, speaker-seconds
    scored_time: float
    mapping: dict
    empty_reference: bool = False

    @property
    def errors(self) -> float:
        return self.missed + self.false_alarm + self.confusion

    @property
    def der(self) -> float:
        if self.total > 0:
            return self.errors / self.total
        return 0.0 if self.errors == 0 else math.inf

    def to_dict(self) -> dict:
        return {
            "missed": self.missed,
            "false_alarm": self.false_alarm,
            "confusion": self.confusion,
            "total": self.total,
            "scored_time": self.scored_time,
            "der": self.der,
            "mapping": self.mapping,
            "empty_reference": self.empty_reference,
        }


def _frames(t: float, step: float) -> int:
    return int(round(t / step))


def _activity(segments, labels, n_frames, step):
    act = np.zeros((n_frames, len(labels)), dtype=bool)
    index = {lab: i for i, lab in enumerate(labels)}
    for seg in segments:
        act[_frames(seg.onset, step) : _frames(seg.end, step), index[seg.speaker]] = True
    return act


def der(
    ref: Sequence[RttmSegment],
    hyp: Sequence[RttmSegment],
    collar: float = 0.0,
    frame: float = DER_FRAME,
) -> DerResult:
    """Frame-based DER with overlap scoring.

    Frames within ``collar`` seconds of any reference speaker boundary are not
    scored. Boundaries come from the merged per-speaker activity, so splitting
    a segment in two adjacent pieces changes nothing.
    """
    if collar < 0:
        raise ValueError("collar must be non-negative")
    files = {s.file_id for s in ref} | {s.file_id for s in hyp}
    if len(files) > 1:
        raise ValueError(f"der expects a single file id, got {sorted(files)}")
    ref_labels = sorted({s.speaker for s in ref})
    hyp_labels = sorted({s.speaker for s in hyp})
    end = max([s.end for s in ref] + [s.end for s in hyp] + [0.0])
    n = _frames(end, frame) + 1
    R = _activity(ref, ref_labels, n, frame)
    H = _activity(hyp, hyp_labels, n, frame)

    scored = np.ones(n, dtype=bool)
    if collar > 0 and R.size:
        padded = np.vstack([np.zeros((1, R.shape[1]), bool), R, np.zeros((1, R.shape[1]), bool)])
        edges = np.nonzero((padded[1:] != padded[:-1]).any(axis=1))[0]
        width = _frames(collar, frame)
        for b in edges:
            scored[max(0, b - width) : b + width] = False
    R, H = R[scored], H[scored]

    overlap = R.astype(np.int64).T @ H.astype(np.int64)
    mapping = {}
    correct = 0
    if overlap.size:
        rows, cols = linear_sum_assignment(-overlap)
        for i, j in zip(rows, cols):
            mapping[ref_labels[i]] = hyp_labels[j]
            correct += int(overlap[i, j])
    n_ref = R.sum(axis=1)
    n_hyp = H.sum(axis=1)
    missed = int(np.maximum(n_ref - n_hyp, 0).sum())
    fa = int(np.maximum(n_hyp - n_ref, 0).sum())
    conf = int(np.minimum(n_ref, n_hyp).sum()) - correct
    total = int(n_ref.sum())
    return DerResult(
        missed=missed * frame,
        false_alarm=fa * frame,
        confusion=conf * frame,
        total=total * frame,
        scored_time=int(scored.sum()) * frame,
        mapping=mapping,
        empty_reference=total == 0,
    )


# -- brute-force oracles ----------------------------------------------------

def levenshtein_reference(ref: Sequence, hyp: Sequence, collar: float | None = None) -> int:
    """Plain-Python edit distance, kept separate from the compiled kernels."""
    timed = collar is not None
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, 1):
        cur = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1)
            if timed:
                ok = r[1] - collar <= h[2] + collar and h[1] - collar <= r[2] + collar
                if ok:
                    cur[j] = min(cur[j], prev[j - 1] + (r[0] != h[0]))
            else:
                cur[j] = min(cur[j], prev[j - 1] + (r != h))
        prev = cur
    return prev[-1]


def cp_bruteforce(ref_streams, hyp_streams, collar: float | None = None) -> int:
    """Minimum total edit cost over every bijection (factorial enumeration)."""
    _, refs = _as_streams(ref_streams)
    _, hyps = _as_streams(hyp_streams)
    k = max(len(refs), len(hyps), 1)
    refs = refs + [[]] * (k - len(refs))
    hyps = hyps + [[]] * (k - len(hyps))
    return min(
        sum(levenshtein_reference(refs[i], hyps[p[i]], collar) for i in range(k))
        for p in itertools.permutations(range(k))
    )


def orc_bruteforce(ref_utterances, hyp_streams, collar: float | None = None) -> int:
    """Minimum total edit cost over all ``K ** U`` utterance assignments."""
    utts = [list(u) for u in ref_utterances]
    _, hyps = _as_streams(hyp_streams)
    if not hyps:
        hyps = [[]]
    best = None
    for assign in itertools.product(range(len(hyps)), repeat=len(utts)):
        cost = sum(
            levenshtein_reference([w for u, a in enumerate(assign) if a == k for w in utts[u]], hyps[k], collar)
            for k in range(len(hyps))
        )
        best = cost if best is None else min(best, cost)
    return best


# -- corpus evaluation -------------------------------------------------------

def _timed_streams(tr):
    return {spk: words for spk, words in tr.speaker_timed_words().items()}


def evaluate_file(ref, hyp, collar: float = DEFAULT_COLLAR, der_collars=DER_COLLAR_PRESETS,
                  approx: bool = False, file_id: str = "file") -> dict:
    """All five metrics for one dialogue given two structured transcripts."""
    from .transcript import segments_to_rttm

    cp = cp_wer(ref.speaker_words(), hyp.speaker_words(), approx=approx)
    tcp = tcp_wer(_timed_streams(ref), _timed_streams(hyp), collar=collar, approx=approx)
    orc = orc_wer(ref.utterances(), hyp.speaker_words(), approx=approx)
    tcorc = tcorc_wer(ref.timed_utterances(), _timed_streams(hyp), collar=collar, approx=approx)
    ref_rttm = segments_to_rttm(file_id, ref)
    hyp_rttm = segments_to_rttm(file_id, hyp)
    ders = {f"{c:g}": der(ref_rttm, hyp_rttm, collar=c) for c in der_collars}
    return {
        "cp_wer": cp,
        "tcp_wer": tcp,
        "orc_wer": orc,
        "tcorc_wer": tcorc,
        "der": ders,
    }


def _wer_json(res) -> dict:
    out = res.breakdown.to_dict()
    if isinstance(res, CpResult):
        out["mapping"] = {str(k): v for k, v in res.mapping.items()}
    else:
        out["assignment"] = res.assignment
        out["approximate"] = res.approximate
    return out


def evaluate_corpus(refs: Mapping, hyps: Mapping, collar: float = DEFAULT_COLLAR,
                    der_collars=DER_COLLAR_PRESETS, approx: bool = False) -> dict:
    """Score every reference dialogue; aggregates are micro averages.

    Hypothesis ids without a reference are listed and skipped; a reference
    without a hypothesis is scored against an empty transcript.
    """
    from .transcript import StructuredTranscript

    wer_names = ("cp_wer", "tcp_wer", "orc_wer", "tcorc_wer")
    totals = {name: WerBreakdown() for name in wer_names}
    der_frames = {f"{c:g}": [0, 0, 0, 0] for c in der_collars}
    files = {}
    for fid in sorted(refs):
        hyp = hyps.get(fid, StructuredTranscript([]))
        res = evaluate_file(refs[fid], hyp, collar, der_collars, approx, file_id=fid)
        entry = {}
        for name in wer_names:
            totals[name] = totals[name] + res[name].breakdown
            entry[name] = _wer_json(res[name])
        entry["der"] = {}
        for key, d in res["der"].items():
            acc = der_frames[key]
            for i, v in enumerate((d.missed, d.false_alarm, d.confusion, d.total)):
                acc[i] += int(round(v / DER_FRAME))
            entry["der"][key] = d.to_dict()
        entry["missing_hypothesis"] = fid not in hyps
        files[fid] = entry
    aggregate = {name: totals[name].to_dict() for name in wer_names}
    aggregate["der"] = {}
    for key, (m, fa, cf, tot) in der_frames.items():
        agg = DerResult(m * DER_FRAME, fa * DER_FRAME, cf * DER_FRAME, tot * DER_FRAME, 0.0, {}, tot == 0)
        aggregate["der"][key] = {k: v for k, v in agg.to_dict().items() if k not in ("mapping", "scored_time")}
    return {
        "collar": collar,
        "der_collars": list(der_collars),
        "files": files,
        "aggregate": aggregate,
        "unmatched_hypothesis_ids": sorted(set(hyps) - set(refs)),
        "missing_hypothesis_ids": sorted(set(refs) - set(hyps)),
    }


def oracle_cross_check(refs: Mapping, hyps: Mapping, collar: float = DEFAULT_COLLAR,
                       max_streams: int = 5, max_utterances: int = 6) -> list[dict]:
    """Compare the assignment solvers with brute force on every small dialogue.

    Returns one record per disagreement; dialogues above the size limits are skipped.
    """
    from .transcript import StructuredTranscript

    mismatches = []
    for fid in sorted(refs):
        ref, hyp = refs[fid], hyps.get(fid, StructuredTranscript([]))
        rs, hs = ref.speaker_words(), hyp.speaker_words()
        if max(len(rs), len(hs)) <= max_streams:
            checks = [
                ("cp_wer", cp_wer(rs, hs).breakdown.errors, cp_bruteforce(rs, hs)),
                ("tcp_wer", tcp_wer(_timed_streams(ref), _timed_streams(hyp), collar).breakdown.errors,
                 cp_bruteforce(_timed_streams(ref), _timed_streams(hyp), collar)),
            ]
        else:
            checks = []
        if len(ref.segments) <= max_utterances and len(hs) <= MAX_ORC_STREAMS:
            checks += [
                ("orc_wer", orc_wer(ref.utterances(), hs).breakdown.errors, orc_bruteforce(ref.utterances(), hs)),
                ("tcorc_wer", tcorc_wer(ref.timed_utterances(), _timed_streams(hyp), collar).breakdown.errors,
                 orc_bruteforce(ref.timed_utterances(), _timed_streams(hyp), collar)),
            ]
        for name, fast, slow in checks:
            if fast != slow:
                mismatches.append({"file": fid, "metric": name, "solver": fast, "oracle": slow})
    return mismatches
