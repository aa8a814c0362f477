"""Time/speaker rotary position encoding.

Positions come from a per-frame speaker activity matrix ``pi`` of shape
``[T, 4]``: one temporal index per frame plus one speaker coordinate per
speaker, built from cumulative turn counts and the activity itself. Query
frames get an extra ``1 - pi`` phase on the speaker coordinates.

Rotary pairs are laid out in groups of 16 channels (8 pairs). Inside a group
the pairs cycle ``time, spk1, time, spk2, time, spk3, time, spk4`` and share
one inverse frequency.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from enum import IntEnum
from typing import Literal

import numpy as np
import torch

NUM_SPEAKERS = 4
GROUP_SIZE = 16
DEFAULT_TAU = 0.1
ROPE_BASE = 10000.0


class Region(IntEnum):
    TIME = 0
    SPK1 = 1
    SPK2 = 2
    SPK3 = 3
    SPK4 = 4


@dataclass(frozen=True)
class PositionVector:
    psi_time: int
    psi_spk: tuple[float, float, float, float]
    psi_spk_query: tuple[float, float, float, float]


@dataclass(frozen=True)
class ActivityDerivatives:
    a: np.ndarray  # thresholded activity, int8 [T, S]
    r: np.ndarray  # rising edges, int8 [T, S]
    C: np.ndarray  # cumulative turn counts, int64 [T, S]


@dataclass(frozen=True)
class TsRopeLayout:
    head_dim: int
    omega: np.ndarray  # [head_dim // 16]
    pair_region: np.ndarray  # [head_dim // 2], values of Region
    pair_group: np.ndarray  # [head_dim // 2]

    @property
    def group_count(self) -> int:
        return self.head_dim // GROUP_SIZE

    @property
    def pair_omega(self) -> np.ndarray:
        return self.omega[self.pair_group]


@dataclass(frozen=True)
class PositionAblation:
    """Switches for the speaker-coordinate ablations.

    ``use_turns=False`` drops the cumulative turn counts, ``use_activity=False``
    drops the within-turn activity term, ``use_query_bias=False`` removes the
    query-only phase. With both coordinate terms off the speaker coordinate is
    the constant 0.
    """

    use_query_bias: bool = True
    use_turns: bool = True
    use_activity: bool = True


ABLATIONS: dict[str, PositionAblation] = {
    "full": PositionAblation(),
    "no_query": PositionAblation(use_query_bias=False),
    "no_query_no_turns": PositionAblation(use_query_bias=False, use_turns=False),
    "no_query_no_turns_no_activity": PositionAblation(
        use_query_bias=False, use_turns=False, use_activity=False
    ),
}


def binarize_activity(pi, tau: float = DEFAULT_TAU) -> np.ndarray:
    """``a = 1`` where ``pi >= tau``."""
    if not 0 < tau < 1:
        raise ValueError(f"tau must lie in (0, 1), got {tau}")
    return (np.asarray(pi, dtype=np.float64) >= tau).astype(np.int8)


def cumulative_turns(a) -> ActivityDerivatives:
    """Rising edges and their running count along the time axis.

    The state before the first frame counts as inactive, so a speaker active
    at frame 0 opens a turn there.
    """
    a = np.asarray(a)
    if a.ndim == 1:
        a = a[:, None]
    if not np.isin(a, (0, 1)).all():
        raise ValueError("cumulative_turns expects a binary matrix")
    a = a.astype(np.int8)
    prev = np.vstack([np.zeros((1, a.shape[1]), dtype=np.int8), a[:-1]])
    r = (a * (1 - prev)).astype(np.int8)
    return ActivityDerivatives(a=a, r=r, C=np.cumsum(r, axis=0, dtype=np.int64))


def speaker_position(C, pi):
    return np.asarray(C, dtype=np.float64) + np.asarray(pi, dtype=np.float64)


def query_phase_bias(psi, pi):
    return np.asarray(psi, dtype=np.float64) + (1.0 - np.asarray(pi, dtype=np.float64))


def build_layout(head_dim: int) -> TsRopeLayout:
    if head_dim < GROUP_SIZE or head_dim % GROUP_SIZE:
        raise ValueError(f"head_dim must be a positive multiple of {GROUP_SIZE}, got {head_dim}")
    groups = head_dim // GROUP_SIZE
    omega = ROPE_BASE ** (-2.0 * np.arange(groups, dtype=np.float64) / head_dim)
    local = np.tile(np.arange(8), groups)
    region = np.where(local % 2 == 0, Region.TIME, (local + 1) // 2).astype(np.int64)
    group = np.repeat(np.arange(groups), 8)
    for arr in (omega, region, group):
        arr.setflags(write=False)
    return TsRopeLayout(head_dim=head_dim, omega=omega, pair_region=region, pair_group=group)


@dataclass(frozen=True)
class SequencePositions:
    """Per-frame coordinates of a whole sequence."""

    psi_time: np.ndarray  # [T]
    psi_spk: np.ndarray  # [T, 4], key side
    psi_spk_query: np.ndarray  # [T, 4]
    derivatives: ActivityDerivatives

    def at(self, t: int) -> PositionVector:
        return PositionVector(
            psi_time=int(self.psi_time[t]),
            psi_spk=tuple(float(v) for v in self.psi_spk[t]),
            psi_spk_query=tuple(float(v) for v in self.psi_spk_query[t]),
        )


def sequence_positions(
    pi,
    tau: float = DEFAULT_TAU,
    ablation: PositionAblation = PositionAblation(),
) -> SequencePositions:
    pi = np.asarray(pi, dtype=np.float64)
    if pi.ndim != 2 or pi.shape[1] != NUM_SPEAKERS:
        raise ValueError(f"activity must have shape [T, {NUM_SPEAKERS}], got {pi.shape}")
    deriv = cumulative_turns(binarize_activity(pi, tau))
    turns = deriv.C if ablation.use_turns else np.zeros_like(deriv.C)
    within = pi if ablation.use_activity else np.zeros_like(pi)
    psi = speaker_position(turns, within)
    psi_q = query_phase_bias(psi, pi) if ablation.use_query_bias else psi.copy()
    return SequencePositions(
        psi_time=np.arange(pi.shape[0], dtype=np.int64),
        psi_spk=psi,
        psi_spk_query=psi_q,
        derivatives=deriv,
    )


def rotation_angles(
    position: PositionVector, layout: TsRopeLayout, role: Literal["query", "key"]
) -> np.ndarray:
    if role not in ("query", "key"):
        raise ValueError(f"role must be 'query' or 'key', got {role!r}")
    spk = position.psi_spk_query if role == "query" else position.psi_spk
    coords = np.concatenate([[float(position.psi_time)], np.asarray(spk, dtype=np.float64)])
    return coords[layout.pair_region] * layout.pair_omega


def sequence_angles(
    psi_time, psi_spk, layout: TsRopeLayout
) -> np.ndarray:
    """Angles for every frame, shape ``[T, head_dim // 2]`` (float64)."""
    coords = np.concatenate(
        [np.asarray(psi_time, dtype=np.float64)[:, None], np.asarray(psi_spk, dtype=np.float64)],
        axis=1,
    )
    return coords[:, layout.pair_region] * layout.pair_omega[None, :]


def apply_rotation(x, angles):
    """Rotate consecutive channel pairs ``(2i, 2i+1)`` by ``angles[..., i]``.

    Works on numpy arrays and torch tensors; leading dimensions broadcast.
    """
    if isinstance(x, torch.Tensor):
        angles = torch.as_tensor(angles, dtype=x.dtype, device=x.device)
        cos, sin = torch.cos(angles), torch.sin(angles)
        even, odd = x[..., 0::2], x[..., 1::2]
        return torch.stack((even * cos - odd * sin, even * sin + odd * cos), dim=-1).flatten(-2)
    x = np.asarray(x, dtype=np.float64)
    angles = np.asarray(angles, dtype=np.float64)
    if x.shape[-1] % 2 or angles.shape[-1] != x.shape[-1] // 2:
        raise ValueError("apply_rotation: need an even dimension and one angle per pair")
    cos, sin = np.cos(angles), np.sin(angles)
    even, odd = x[..., 0::2], x[..., 1::2]
    pairs = np.stack((even * cos - odd * sin, even * sin + odd * cos), axis=-1)
    return pairs.reshape(pairs.shape[:-2] + (-1,))


def ts_attention_logits(
    q, k, pos_q: PositionVector, pos_k: PositionVector, layout: TsRopeLayout
) -> float:
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    if q.shape != (layout.head_dim,) or k.shape != (layout.head_dim,):
        raise ValueError(
            f"query/key must have shape ({layout.head_dim},), got {q.shape} and {k.shape}"
        )
    rq = apply_rotation(q, rotation_angles(pos_q, layout, "query"))
    rk = apply_rotation(k, rotation_angles(pos_k, layout, "key"))
    return float(rq @ rk) / np.sqrt(layout.head_dim)


def resample_activity(pi, num_frames: int) -> np.ndarray:
    """Nearest-frame resampling of ``pi`` onto ``num_frames`` frames."""
    pi = np.asarray(pi, dtype=np.float64)
    src = pi.shape[0]
    if src == num_frames:
        return pi.copy()
    centres = (np.arange(num_frames) + 0.5) * src / num_frames
    idx = np.clip(np.floor(centres).astype(np.int64), 0, src - 1)
    return pi[idx]


INSPECT_COLUMNS = ("t", "s", "pi", "a", "r", "C", "psi_spk", "psi_spk_query")


def inspect_rows(pi, tau: float = DEFAULT_TAU) -> list[dict]:
    pos = sequence_positions(pi, tau)
    d = pos.derivatives
    pi = np.asarray(pi, dtype=np.float64)
    rows = []
    for t in range(pi.shape[0]):
        for s in range(NUM_SPEAKERS):
            rows.append({
                "t": t,
                "s": s + 1,
                "pi": float(pi[t, s]),
                "a": int(d.a[t, s]),
                "r": int(d.r[t, s]),
                "C": int(d.C[t, s]),
                "psi_spk": float(pos.psi_spk[t, s]),
                "psi_spk_query": float(pos.psi_spk_query[t, s]),
            })
    return rows


def inspect_csv(pi, tau: float = DEFAULT_TAU) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=INSPECT_COLUMNS, lineterminator="\n")
    writer.writeheader()
    writer.writerows(inspect_rows(pi, tau))
    return buf.getvalue()
