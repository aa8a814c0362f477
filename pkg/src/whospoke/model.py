"""Toy speaker/time aware encoder-decoder for structured transcripts.

The encoder runs self-attention over frame features. Its positional
mechanism is selectable: time/speaker rotary rotations driven by the
activity matrix, time-only rotations, or added sinusoidal vectors. The
decoder attends to the encoder output and emits
``<spk> <t_start> words <t_end>`` segments terminated by ``<EOS>``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from . import ts_rope
from .checkpoint import load_checkpoint, save_checkpoint, state_dict_arrays
from .errors import NumericalError
from .transcript import StructuredTranscript, TokenVocabulary, parse_structured_tokens, serialize_transcript

log = logging.getLogger(__name__)

MODES = ("ts_rope", "time_only_rope", "absolute")
CHECKPOINT_KIND = "asr"


@dataclass(frozen=True)
class AsrConfig:
    feature_dim: int = 32
    layers: int = 2
    heads: int = 2
    head_dim: int = 32
    ffn_dim: int = 128
    decoder_layers: int = 2
    mode: str = "ts_rope"
    ablation: str = "full"
    tau: float = ts_rope.DEFAULT_TAU
    num_words: int = 64
    max_time: float = 30.0
    time_step: float = 0.1
    frame_rate: int = 25
    activity_noise: float = 0.05
    lr: float = 1e-3
    weight_decay: float = 1e-2
    batch_size: int = 8
    stage1_steps: int = 200
    stage2_steps: int = 2000
    grad_clip: float = 1.0
    grad_check: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.ablation not in ts_rope.ABLATIONS:
            raise ValueError(f"unknown ablation {self.ablation!r}")
        if self.mode != "absolute" and (self.head_dim % ts_rope.GROUP_SIZE or self.head_dim <= 0):
            raise ValueError(f"head_dim must be a multiple of {ts_rope.GROUP_SIZE} for rotary modes")

    @property
    def model_dim(self) -> int:
        return self.heads * self.head_dim

    def vocabulary(self) -> TokenVocabulary:
        return TokenVocabulary(self.num_words, self.max_time, self.time_step)

    def to_dict(self) -> dict:
        return asdict(self)


def sinusoid_table(T: int, dim: int, dtype=torch.float32) -> torch.Tensor:
    pos = torch.arange(T, dtype=torch.float64)[:, None]
    freq = torch.pow(10000.0, -torch.arange(0, dim, 2, dtype=torch.float64) / dim)
    pe = torch.zeros(T, dim, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(pos * freq)
    pe[:, 1::2] = torch.cos(pos * freq)[:, : dim // 2]
    return pe.to(dtype)


# -- positions ---------------------------------------------------------------------

@dataclass
class EncoderPositions:
    """Rotation angles for one batch, ``[B, T, head_dim // 2]`` each (float64)."""

    query: torch.Tensor | None
    key: torch.Tensor | None


def encoder_angles(activity, cfg: AsrConfig, layout: ts_rope.TsRopeLayout) -> tuple[np.ndarray, np.ndarray]:
    """Query and key angles ``[T, D/2]`` for one activity matrix ``[T, 4]``."""
    activity = np.asarray(activity, dtype=np.float64)
    T = activity.shape[0]
    if cfg.mode == "time_only_rope":
        zero = np.zeros((T, ts_rope.NUM_SPEAKERS))
        a = ts_rope.sequence_angles(np.arange(T), zero, layout)
        return a, a
    pos = ts_rope.sequence_positions(activity, cfg.tau, ts_rope.ABLATIONS[cfg.ablation])
    q = ts_rope.sequence_angles(pos.psi_time, pos.psi_spk_query, layout)
    k = ts_rope.sequence_angles(pos.psi_time, pos.psi_spk, layout)
    return q, k


# -- attention ----------------------------------------------------------------------

class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)
        self.last_weights: torch.Tensor | None = None

    def _split(self, x):
        B, T, _ = x.shape
        return x.view(B, T, self.heads, self.head_dim).transpose(1, 2)

    def forward(self, x, memory=None, q_angles=None, k_angles=None, key_mask=None, causal=False, keep_weights=False):
        src = x if memory is None else memory
        q, k, v = self._split(self.q(x)), self._split(self.k(src)), self._split(self.v(src))
        if q_angles is not None:
            q = ts_rope.apply_rotation(q, q_angles.unsqueeze(1))
            k = ts_rope.apply_rotation(k, k_angles.unsqueeze(1))
        logits = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        if key_mask is not None:
            logits = logits.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        if causal:
            T = x.shape[1]
            future = torch.ones(T, T, dtype=torch.bool).triu(1)
            logits = logits.masked_fill(future, float("-inf"))
        weights = torch.softmax(logits, dim=-1)
        if keep_weights:
            self.last_weights = weights.detach()
        out = (weights @ v).transpose(1, 2).reshape(x.shape[0], x.shape[1], -1)
        return self.out(out)


class FeedForward(nn.Sequential):
    def __init__(self, dim: int, hidden: int):
        super().__init__(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))


class EncoderLayer(nn.Module):
    def __init__(self, dim, heads, ffn):
        super().__init__()
        self.norm1, self.attn = nn.LayerNorm(dim), Attention(dim, heads)
        self.norm2, self.ff = nn.LayerNorm(dim), FeedForward(dim, ffn)

    def forward(self, x, q_angles, k_angles, key_mask, keep_weights=False):
        x = x + self.attn(self.norm1(x), q_angles=q_angles, k_angles=k_angles, key_mask=key_mask,
                          keep_weights=keep_weights)
        return x + self.ff(self.norm2(x))


class DecoderLayer(nn.Module):
    def __init__(self, dim, heads, ffn):
        super().__init__()
        self.norm1, self.self_attn = nn.LayerNorm(dim), Attention(dim, heads)
        self.norm2, self.cross = nn.LayerNorm(dim), Attention(dim, heads)
        self.norm3, self.ff = nn.LayerNorm(dim), FeedForward(dim, ffn)

    def forward(self, y, memory, memory_mask):
        y = y + self.self_attn(self.norm1(y), causal=True)
        y = y + self.cross(self.norm2(y), memory=memory, key_mask=memory_mask)
        return y + self.ff(self.norm3(y))


class StructuredAsr(nn.Module):
    def __init__(self, cfg: AsrConfig):
        super().__init__()
        self.cfg = cfg
        self.vocab = cfg.vocabulary()
        self.layout = ts_rope.build_layout(cfg.head_dim) if cfg.mode != "absolute" else None
        dim = cfg.model_dim
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(cfg.seed)
            self.input = nn.Linear(cfg.feature_dim, dim)
            self.encoder = nn.ModuleList(EncoderLayer(dim, cfg.heads, cfg.ffn_dim) for _ in range(cfg.layers))
            self.enc_norm = nn.LayerNorm(dim)
            self.embed = nn.Embedding(self.vocab.size, dim)
            self.decoder = nn.ModuleList(DecoderLayer(dim, cfg.heads, cfg.ffn_dim) for _ in range(cfg.decoder_layers))
            self.dec_norm = nn.LayerNorm(dim)
            self.logits = nn.Linear(dim, self.vocab.size)

    @property
    def dtype(self):
        return self.input.weight.dtype

    def positions(self, activity: list[np.ndarray], T: int) -> EncoderPositions:
        if self.cfg.mode == "absolute":
            return EncoderPositions(None, None)
        qs, ks = [], []
        for act in activity:
            act = ts_rope.resample_activity(act, T) if len(act) != T else np.asarray(act, dtype=np.float64)
            q, k = encoder_angles(act, self.cfg, self.layout)
            qs.append(q)
            ks.append(k)
        return EncoderPositions(torch.from_numpy(np.stack(qs)), torch.from_numpy(np.stack(ks)))

    def encode(self, frames, activity=None, frame_mask=None, keep_weights=False):
        """``frames [B, T, F]`` (or ``[T, F]``) and activity ``[B, T', 4]`` -> ``[B, T, dim]``."""
        frames = torch.as_tensor(frames, dtype=self.dtype)
        single = frames.dim() == 2
        if single:
            frames = frames.unsqueeze(0)
            activity = None if activity is None else [activity]
        B, T, F = frames.shape
        if F != self.cfg.feature_dim:
            raise ValueError(f"expected feature dim {self.cfg.feature_dim}, got {F}")
        if self.cfg.mode == "ts_rope":
            if activity is None or len(activity) != B:
                raise ValueError("ts_rope mode needs one activity matrix per sequence")
            for act in activity:
                if np.ndim(act) != 2 or np.shape(act)[1] != ts_rope.NUM_SPEAKERS:
                    raise ValueError(f"activity must be [T, {ts_rope.NUM_SPEAKERS}], got {np.shape(act)}")
        else:
            activity = activity if activity is not None else [np.zeros((T, ts_rope.NUM_SPEAKERS))] * B
        pos = self.positions(activity, T)
        x = self.input(frames)
        if self.cfg.mode == "absolute":
            x = x + sinusoid_table(T, x.shape[-1], x.dtype)
        for layer in self.encoder:
            x = layer(x, pos.query, pos.key, frame_mask, keep_weights)
        x = self.enc_norm(x)
        return x.squeeze(0) if single else x

    def decode(self, memory, tokens, memory_mask=None):
        """Next-token logits for decoder inputs ``tokens [B, L]``."""
        T = memory.shape[1]
        # frame-time readout for timestamps, identical in every mode
        memory = memory + sinusoid_table(T, memory.shape[-1], memory.dtype)
        y = self.embed(tokens) + sinusoid_table(tokens.shape[1], memory.shape[-1], memory.dtype)
        for layer in self.decoder:
            y = layer(y, memory, memory_mask)
        return self.logits(self.dec_norm(y))

    def forward(self, frames, activity, tokens, frame_mask=None):
        return self.decode(self.encode(frames, activity, frame_mask), tokens, frame_mask)

    def attention_weights(self) -> list[torch.Tensor]:
        return [layer.attn.last_weights for layer in self.encoder]

    def save(self, path, extra: dict | None = None) -> None:
        save_checkpoint(path, CHECKPOINT_KIND, self.cfg.to_dict(), state_dict_arrays(self), extra)

    @classmethod
    def load(cls, path) -> "StructuredAsr":
        config, params, _ = load_checkpoint(path, CHECKPOINT_KIND)
        model = cls(AsrConfig(**config))
        model.load_state_dict({k: torch.from_numpy(np.array(v)) for k, v in params.items()})
        return model


def encoder_forward(frames, activity, model: StructuredAsr):
    return model.encode(frames, activity)


# -- data -------------------------------------------------------------------------

def noisy_activity(activity, rng: np.random.Generator, amount: float) -> np.ndarray:
    """Move each entry towards the opposite label by ``U[0, amount]``."""
    activity = np.asarray(activity, dtype=np.float64)
    if amount <= 0:
        return activity.copy()
    u = rng.uniform(0.0, amount, activity.shape)
    return np.abs(activity - u)


@dataclass
class Batch:
    frames: torch.Tensor
    frame_mask: torch.Tensor
    activity: list[np.ndarray]
    inputs: torch.Tensor
    targets: torch.Tensor


def make_batch(dialogues, vocab: TokenVocabulary, rng: np.random.Generator, noise: float,
               dtype=torch.float32) -> Batch:
    T = max(d.num_frames for d in dialogues)
    F = dialogues[0].frames.shape[1]
    frames = torch.zeros(len(dialogues), T, F, dtype=dtype)
    mask = torch.zeros(len(dialogues), T, dtype=torch.bool)
    acts = []
    seqs = [serialize_transcript(d.transcript, vocab) for d in dialogues]
    L = max(len(s) for s in seqs)
    inputs = torch.full((len(dialogues), L), vocab.pad, dtype=torch.long)
    targets = torch.full((len(dialogues), L), vocab.pad, dtype=torch.long)
    for i, (d, seq) in enumerate(zip(dialogues, seqs)):
        frames[i, : d.num_frames] = torch.as_tensor(d.frames, dtype=dtype)
        mask[i, : d.num_frames] = True
        act = np.zeros((T, ts_rope.NUM_SPEAKERS))
        act[: d.num_frames] = noisy_activity(d.activity_truth, rng, noise)
        acts.append(act)
        inputs[i, : len(seq)] = torch.tensor([vocab.sot] + seq[:-1])
        targets[i, : len(seq)] = torch.tensor(seq)
    return Batch(frames, mask, acts, inputs, targets)


def batch_loss(model: StructuredAsr, batch: Batch):
    logits = model(batch.frames, batch.activity, batch.inputs, batch.frame_mask)
    loss = nn.functional.cross_entropy(
        logits.reshape(-1, logits.shape[-1]), batch.targets.reshape(-1), ignore_index=model.vocab.pad
    )
    return loss, logits


def token_accuracy(model: StructuredAsr, dialogues, batch_size: int = 8) -> float:
    rng = np.random.Generator(np.random.PCG64(0))
    correct = total = 0
    with torch.no_grad():
        for a in range(0, len(dialogues), batch_size):
            batch = make_batch(dialogues[a : a + batch_size], model.vocab, rng, 0.0, model.dtype)
            _, logits = batch_loss(model, batch)
            keep = batch.targets != model.vocab.pad
            correct += int(((logits.argmax(-1) == batch.targets) & keep).sum())
            total += int(keep.sum())
    return correct / max(1, total)


# -- gradient check -------------------------------------------------------------------

def gradient_check(mode: str = "ts_rope", ablation: str = "full", seed: int = 0, h: float = 1e-6,
                   samples: int = 24) -> float:
    """Finite-difference check of the attention paths on a miniature float64 model.

    Returns the largest relative error over sampled query/key/value weights of
    every encoder layer.
    """
    cfg = AsrConfig(feature_dim=6, layers=1, heads=1, head_dim=16, ffn_dim=8, decoder_layers=1,
                    mode=mode, ablation=ablation, num_words=4, max_time=1.0, grad_check=False, seed=seed)
    model = StructuredAsr(cfg).double()
    gen = torch.Generator().manual_seed(seed)
    T = 4
    frames = torch.randn(1, T, cfg.feature_dim, generator=gen, dtype=torch.float64)
    activity = [np.array([[0.9, 0.0, 0.4, 0.0], [0.8, 0.3, 0.0, 0.0], [0.0, 0.7, 0.05, 1.0], [0.6, 0.6, 0.2, 0.9]])]
    tokens = torch.randint(0, model.vocab.size, (1, 5), generator=gen)
    targets = torch.randint(0, model.vocab.size, (1, 5), generator=gen)

    def loss_fn():
        logits = model(frames, activity, tokens)
        return nn.functional.cross_entropy(logits.reshape(-1, logits.shape[-1]), targets.reshape(-1))

    loss = loss_fn()
    params = [p for layer in model.encoder for p in (layer.attn.q.weight, layer.attn.k.weight, layer.attn.v.weight)]
    grads = torch.autograd.grad(loss, params)
    worst = 0.0
    with torch.no_grad():
        for p, g in zip(params, grads):
            flat, gflat = p.view(-1), g.reshape(-1)
            for i in torch.randperm(flat.numel(), generator=gen)[: samples // len(params) + 1].tolist():
                old = flat[i].item()
                flat[i] = old + h
                up = loss_fn().item()
                flat[i] = old - h
                down = loss_fn().item()
                flat[i] = old
                fd = (up - down) / (2 * h)
                an = gflat[i].item()
                worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-7))
    return worst


# -- training ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: StructuredAsr
    losses: list[tuple[int, str, float]] = field(default_factory=list)  # (step, stage, loss)
    grad_check_error: float | None = None


def train_asr(dialogues, cfg: AsrConfig = AsrConfig(), model: StructuredAsr | None = None,
              stage2_only: bool = False, activity_source=None) -> TrainResult:
    """Teacher-forced cross-entropy training, single-speaker stage first.

    ``activity_source`` optionally maps a dialogue to the activity matrix fed
    to the encoder (for example Hyper-SD predictions); ground truth plus
    uniform noise is used otherwise.
    """
    if not dialogues:
        raise ValueError("train_asr: empty dataset")
    model = model or StructuredAsr(cfg)
    result = TrainResult(model)
    if cfg.grad_check and cfg.mode != "absolute":
        err = gradient_check(cfg.mode, cfg.ablation, cfg.seed)
        result.grad_check_error = err
        if err > 1e-3:
            raise NumericalError(f"rotary attention gradient check failed: relative error {err:.2e}")
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    gen = torch.Generator().manual_seed(cfg.seed)
    single = [d for d in dialogues if len(d.transcript.speakers()) <= 1]
    stages = []
    if not stage2_only and single and cfg.stage1_steps > 0:
        stages.append(("stage1", single, cfg.stage1_steps))
    stages.append(("stage2", list(dialogues), cfg.stage2_steps))
    step = 0
    model.train()
    for stage, pool, n_steps in stages:
        for _ in range(n_steps):
            idx = torch.randint(0, len(pool), (min(cfg.batch_size, len(pool)),), generator=gen).tolist()
            chosen = [pool[i] for i in idx]
            batch = make_batch(chosen, model.vocab, rng, cfg.activity_noise, model.dtype)
            if activity_source is not None:
                batch.activity = [_pad_activity(activity_source(d), batch.frames.shape[1]) for d in chosen]
            loss, _ = batch_loss(model, batch)
            if not math.isfinite(loss.item()):
                raise NumericalError("non-finite ASR training loss", step=step)
            opt.zero_grad()
            loss.backward()
            if cfg.grad_clip > 0:
                nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            opt.step()
            result.losses.append((step, stage, loss.item()))
            step += 1
            if step % 200 == 0:
                log.info("asr %s step %d loss %.4f", stage, step, loss.item())
    model.eval()
    return result


def _pad_activity(act, T):
    act = np.asarray(act, dtype=np.float64)
    out = np.zeros((T, ts_rope.NUM_SPEAKERS))
    out[: min(T, len(act))] = act[:T]
    return out


# -- decoding ----------------------------------------------------------------------------

@torch.no_grad()
def generate_tokens(model: StructuredAsr, frames, activity=None, max_tokens: int = 128) -> list[int]:
    memory = model.encode(torch.as_tensor(frames).unsqueeze(0), None if activity is None else [activity])
    tokens = [model.vocab.sot]
    out: list[int] = []
    for _ in range(max_tokens):
        logits = model.decode(memory, torch.tensor([tokens]))
        nxt = int(logits[0, -1].argmax())
        out.append(nxt)
        if nxt == model.vocab.eos:
            break
        tokens.append(nxt)
    return out


def generate(model: StructuredAsr, frames, activity=None, max_tokens: int = 128) -> StructuredTranscript:
    """Greedy decoding, parsed leniently into a transcript."""
    if max_tokens <= 0:
        return StructuredTranscript([])
    tr, _ = parse_structured_tokens(generate_tokens(model, frames, activity, max_tokens), model.vocab)
    return tr


def transcribe_corpus(model: StructuredAsr, dialogues, activity_source=None, max_tokens: int = 128,
                      noise: float = 0.0, seed: int = 0) -> dict[str, StructuredTranscript]:
    rng = np.random.Generator(np.random.PCG64(seed))
    out = {}
    for d in dialogues:
        act = activity_source(d) if activity_source is not None else noisy_activity(d.activity_truth, rng, noise)
        out[d.dialogue_id] = generate(model, d.frames, act, max_tokens)
    return out
