"""Hyperbolic prototype speaker-activity estimation.

Pipeline per frame: softmax-weighted sum of feature layers, a small
self-attention context encoder, a linear map with norm clipping, the
exponential map onto the Poincare ball, distances to 16 class prototypes
(one per subset of four speakers) and a sigmoid marginalisation back to
per-speaker activity.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from scipy.stats import rankdata
from torch import nn

from . import geometry as geo
from .checkpoint import load_checkpoint, save_checkpoint, state_dict_arrays
from .errors import NumericalError
from .metrics import der
from .rttm import activity_to_segments

log = logging.getLogger(__name__)

NUM_SPEAKERS = 4
NUM_CLASSES = 2**NUM_SPEAKERS
CHECKPOINT_KIND = "hyper_sd"


# -- classes ------------------------------------------------------------------

def class_label_from_speaker_set(active) -> int:
    """Bitmask code: speaker ``s`` contributes ``2 ** (s - 1)``; silence is 0."""
    index = 0
    for s in set(active):
        if not 1 <= int(s) <= NUM_SPEAKERS:
            raise ValueError(f"speaker id must be in 1..{NUM_SPEAKERS}, got {s}")
        index |= 1 << (int(s) - 1)
    return index


def speaker_set_from_class(index: int) -> frozenset[int]:
    return frozenset(s + 1 for s in range(NUM_SPEAKERS) if index >> s & 1)


def class_labels_from_activity(activity, threshold: float = 0.5) -> np.ndarray:
    bits = (np.asarray(activity) >= threshold).astype(np.int64)
    return (bits * (1 << np.arange(NUM_SPEAKERS))).sum(axis=-1)


def membership_matrix() -> np.ndarray:
    """``B[s, n] = 1`` iff speaker ``s + 1`` belongs to class ``n``."""
    n = np.arange(NUM_CLASSES)
    return np.stack([(n >> s) & 1 for s in range(NUM_SPEAKERS)]).astype(np.float64)


def activity_from_classes(classes) -> np.ndarray:
    classes = np.asarray(classes, dtype=np.int64)
    return ((classes[..., None] >> np.arange(NUM_SPEAKERS)) & 1).astype(np.float64)


# -- per-frame operations ------------------------------------------------------

def weighted_layer_sum(stack, alpha):
    """``sum_l softmax(alpha)_l * stack[l]`` over the leading layer axis.

    ``stack`` may carry a batch axis in front (``[B, L, T, F]``).
    """
    stack = torch.as_tensor(stack)
    alpha = torch.as_tensor(alpha, dtype=stack.dtype)
    layer_axis = stack.dim() - 3
    if layer_axis < 0 or alpha.shape != (stack.shape[layer_axis],):
        raise ValueError(f"layer weights {tuple(alpha.shape)} do not match stack {tuple(stack.shape)}")
    w = torch.softmax(alpha, dim=0)
    return torch.tensordot(w, stack.movedim(layer_axis, 0), dims=1)


def clip_norm(v, radius: float, eps: float = 1e-8):
    """``v * min(1, radius / (|v| + eps))``."""
    norm = v.norm(dim=-1, keepdim=True)
    return v * torch.clamp(radius / (norm + eps), max=1.0)


def clip_and_project(u, weight, bias, radius: float = 2.0, c: float = geo.DEFAULT_CURVATURE, eps: float = 1e-8):
    v = u @ weight.T + bias
    if not bool(torch.isfinite(v).all()):
        raise NumericalError("clip_and_project: non-finite linear output")
    return geo.exp_map_origin(clip_norm(v, radius, eps), c)


def prototype_distances(v, prototypes, c: float = geo.DEFAULT_CURVATURE):
    """Distances from points ``[..., I]`` to every prototype ``[N, I]`` -> ``[..., N]``."""
    v = torch.as_tensor(v, dtype=torch.float64)
    return geo.poincare_distance(v.unsqueeze(-2), prototypes, c)


def marginalize_activity(d, membership=None):
    """``pi_s = clamp(sum_n B[s, n] * sigmoid(-d_n), 0, 1)``."""
    d = torch.as_tensor(d, dtype=torch.float64)
    B = torch.as_tensor(membership if membership is not None else membership_matrix(), dtype=d.dtype)
    return (torch.sigmoid(-d) @ B.T).clamp(0.0, 1.0)


def classifier_loss(d, true_class: int, margin: float = 0.3) -> tuple[float, np.ndarray]:
    """Margin-penalised softmax cross-entropy over negative distances.

    Returns the loss and its analytic gradient with respect to ``d``. The
    true class competes with its distance increased by ``margin``.
    """
    d = np.asarray(d, dtype=np.float64)
    logits = -d.copy()
    logits[true_class] -= margin
    shift = logits.max()
    z = np.exp(logits - shift)
    log_norm = shift + math.log(z.sum())
    loss = log_norm - logits[true_class]
    grad = -(z / z.sum())
    grad[true_class] += 1.0
    # dL/dlogit = p - onehot and dlogit/dd = -1
    return float(loss), grad


def margin_cross_entropy(d, labels, margin: float):
    logits = -d - margin * nn.functional.one_hot(labels, d.shape[-1]).to(d.dtype)
    return nn.functional.cross_entropy(logits.reshape(-1, d.shape[-1]), labels.reshape(-1))


# -- model -------------------------------------------------------------------

@dataclass(frozen=True)
class HyperSdConfig:
    feature_dim: int = 32
    num_layers: int = 3
    hidden: int = 64
    heads: int = 4
    encoder_layers: int = 2
    ffn_dim: int = 128
    embed_dim: int = 16
    clip_radius: float = 2.0
    clip_eps: float = 1e-8
    curvature: float = geo.DEFAULT_CURVATURE
    margin: float = 0.3
    proto_init: float = 0.1
    lr: float = 1e-3
    proto_lr: float = 1e-2
    weight_decay: float = 1e-2
    epochs: int = 20
    batch_size: int = 16
    chunk_frames: int = 200
    loss_threshold: float = 0.0
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def sinusoidal_positions(T: int, dim: int, dtype=torch.float64) -> torch.Tensor:
    pos = torch.arange(T, dtype=torch.float64)[:, None]
    i = torch.arange(0, dim, 2, dtype=torch.float64)
    angle = pos / torch.pow(10000.0, i / dim)
    pe = torch.zeros(T, dim, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(angle)
    pe[:, 1::2] = torch.cos(angle[:, : dim // 2])
    return pe.to(dtype)


class EncoderBlock(nn.Module):
    """Pre-norm self-attention + feed-forward block with residuals."""

    def __init__(self, dim: int, heads: int, ffn_dim: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.ff = nn.Sequential(nn.Linear(dim, ffn_dim), nn.GELU(), nn.Linear(ffn_dim, dim))

    def forward(self, x):
        h = self.norm1(x)
        x = x + self.attn(h, h, h, need_weights=False)[0]
        return x + self.ff(self.norm2(x))


class ContextEncoder(nn.Module):
    def __init__(self, in_dim: int, hidden: int, heads: int, layers: int, ffn_dim: int):
        super().__init__()
        self.proj = nn.Linear(in_dim, hidden)
        self.blocks = nn.ModuleList(EncoderBlock(hidden, heads, ffn_dim) for _ in range(layers))
        self.norm = nn.LayerNorm(hidden)

    def forward(self, z):
        squeeze = z.dim() == 2
        if squeeze:
            z = z.unsqueeze(0)
        x = self.proj(z) + sinusoidal_positions(z.shape[1], self.proj.out_features, z.dtype)
        for block in self.blocks:
            x = block(x)
        x = self.norm(x)
        return x.squeeze(0) if squeeze else x


class HyperSD(nn.Module):
    def __init__(self, cfg: HyperSdConfig):
        super().__init__()
        self.cfg = cfg
        gen = torch.Generator().manual_seed(cfg.seed)
        self.alpha = nn.Parameter(torch.zeros(cfg.num_layers, dtype=torch.float64))
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(cfg.seed)
            self.encoder = ContextEncoder(cfg.feature_dim, cfg.hidden, cfg.heads, cfg.encoder_layers, cfg.ffn_dim).double()
            self.head = nn.Linear(cfg.hidden, cfg.embed_dim).double()
        tangent = (torch.rand(NUM_CLASSES, cfg.embed_dim, generator=gen, dtype=torch.float64) * 2 - 1) * cfg.proto_init
        self.prototypes = nn.Parameter(geo.exp_map_origin(tangent, cfg.curvature))
        self.register_buffer("membership", torch.as_tensor(membership_matrix()))

    def embed(self, stack):
        """Layer stack ``[L, T, F]`` or ``[B, L, T, F]`` to ball points ``[..., T, I]``."""
        stack = torch.as_tensor(stack, dtype=torch.float64)
        z = weighted_layer_sum(stack, self.alpha)
        u = self.encoder(z)
        return clip_and_project(u, self.head.weight, self.head.bias, self.cfg.clip_radius,
                                self.cfg.curvature, self.cfg.clip_eps)

    def distances(self, stack):
        return prototype_distances(self.embed(stack), self.prototypes, self.cfg.curvature)

    def forward(self, stack):
        return self.distances(stack)

    def euclidean_parameters(self):
        return [p for n, p in self.named_parameters() if n != "prototypes"]

    @torch.no_grad()
    def infer_activity(self, stack, chunk_frames: int | None = None) -> np.ndarray:
        """Activity ``[T, 4]`` computed chunk by chunk at the training chunk length."""
        d = self.infer_distances(stack, chunk_frames)
        return marginalize_activity(d, self.membership).numpy()

    @torch.no_grad()
    def infer_distances(self, stack, chunk_frames: int | None = None) -> torch.Tensor:
        stack = torch.as_tensor(np.asarray(stack), dtype=torch.float64)
        if stack.dim() == 2:
            stack = stack.unsqueeze(0)
        chunk = chunk_frames or self.cfg.chunk_frames
        parts = [self.distances(stack[:, a : a + chunk]) for a in range(0, stack.shape[1], chunk)]
        return torch.cat(parts, dim=0) if parts else torch.zeros(0, NUM_CLASSES, dtype=torch.float64)

    def predict_classes(self, stack) -> np.ndarray:
        return self.infer_distances(stack).argmin(dim=-1).numpy()

    def save(self, path, extra: dict | None = None) -> None:
        save_checkpoint(path, CHECKPOINT_KIND, self.cfg.to_dict(), state_dict_arrays(self), extra)

    @classmethod
    def load(cls, path) -> "HyperSD":
        config, params, _ = load_checkpoint(path, CHECKPOINT_KIND)
        model = cls(HyperSdConfig(**config))
        model.load_state_dict({k: torch.from_numpy(np.array(v)) for k, v in params.items()})
        return model


# -- Riemannian Adam -----------------------------------------------------------

class RiemannianAdam(torch.optim.Optimizer):
    """Adam on the Poincare ball.

    Euclidean gradients are rescaled to Riemannian ones, the update moves
    along the exact exponential map, and the first moment is parallel
    transported to the new point. The second moment is a scalar per point
    (the squared Riemannian norm).
    """

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, c: float = geo.DEFAULT_CURVATURE):
        super().__init__(params, dict(lr=lr, betas=betas, eps=eps, c=c))

    @torch.no_grad()
    def step(self, closure=None):
        loss = closure() if closure is not None else None
        for group in self.param_groups:
            b1, b2 = group["betas"]
            c = group["c"]
            for p in group["params"]:
                if p.grad is None:
                    continue
                state = self.state[p]
                if not state:
                    state["step"] = 0
                    state["exp_avg"] = torch.zeros_like(p)
                    state["exp_avg_sq"] = torch.zeros(p.shape[:-1] + (1,), dtype=p.dtype)
                state["step"] += 1
                x = p.detach()
                rgrad = geo.riemannian_rescale(p.grad, x, c)
                lam = geo.conformal_factor(x, c)
                m = state["exp_avg"].mul_(b1).add_(rgrad, alpha=1 - b1)
                v = state["exp_avg_sq"].mul_(b2).add_((lam * rgrad).pow(2).sum(-1, keepdim=True), alpha=1 - b2)
                m_hat = m / (1 - b1 ** state["step"])
                v_hat = v / (1 - b2 ** state["step"])
                direction = m_hat / (v_hat.sqrt() + group["eps"])
                new = geo.retract(x, -group["lr"] * direction, c)
                state["exp_avg"] = geo.transport(x, new, m, c)
                p.copy_(new)
        return loss


# -- training ----------------------------------------------------------------

@dataclass
class FitResult:
    model: HyperSD
    history: list[float] = field(default_factory=list)
    steps: int = 0
    ball_checks: int = 0


def make_chunks(dialogues, chunk_frames: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Cut every dialogue into full-length chunks of its layer stack and class labels."""
    stacks, labels = [], []
    for d in dialogues:
        y = class_labels_from_activity(d.activity_truth)
        T = d.layer_stack.shape[1]
        for a in range(0, T - chunk_frames + 1, chunk_frames):
            stacks.append(d.layer_stack[:, a : a + chunk_frames])
            labels.append(y[a : a + chunk_frames])
    if not stacks:
        raise ValueError("no training chunks: dataset empty or dialogues shorter than one chunk")
    return torch.as_tensor(np.stack(stacks)), torch.as_tensor(np.stack(labels))


def fit_hyper_sd(dialogues, cfg: HyperSdConfig = HyperSdConfig(), model: HyperSD | None = None,
                 on_step=None) -> FitResult:
    """Train on labelled dialogues; deterministic for a fixed ``cfg.seed``."""
    if not dialogues:
        raise ValueError("fit_hyper_sd: empty dataset")
    model = model or HyperSD(cfg)
    X, Y = make_chunks(dialogues, cfg.chunk_frames)
    euclid = torch.optim.AdamW(model.euclidean_parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    riem = RiemannianAdam([model.prototypes], lr=cfg.proto_lr, c=cfg.curvature)
    gen = torch.Generator().manual_seed(cfg.seed + 1)
    result = FitResult(model)
    limit = geo.max_norm(cfg.curvature)
    for epoch in range(cfg.epochs):
        order = torch.randperm(X.shape[0], generator=gen)
        total, count = 0.0, 0
        for a in range(0, len(order), cfg.batch_size):
            idx = order[a : a + cfg.batch_size]
            d = model(X[idx])
            loss = margin_cross_entropy(d, Y[idx], cfg.margin)
            if not math.isfinite(loss.item()):
                raise NumericalError("non-finite Hyper-SD training loss", step=result.steps)
            euclid.zero_grad()
            riem.zero_grad()
            loss.backward()
            euclid.step()
            riem.step()
            result.steps += 1
            norms = model.prototypes.detach().norm(dim=-1)
            if not bool((norms <= limit * (1 + 1e-12)).all()):
                raise NumericalError("prototype left the ball", step=result.steps)
            result.ball_checks += 1
            if on_step is not None:
                on_step(result.steps, model)
            total += loss.item() * len(idx)
            count += len(idx)
        result.history.append(total / count)
        log.info("hyper-sd epoch %d loss %.4f", epoch + 1, result.history[-1])
        if result.history[-1] < cfg.loss_threshold:
            break
    return result


# -- evaluation / reporting ------------------------------------------------------

def prototype_report(prototypes, c: float = geo.DEFAULT_CURVATURE) -> dict:
    p = torch.as_tensor(prototypes, dtype=torch.float64).detach()
    matrix = geo.poincare_distance(p[:, None, :], p[None, :, :], c)
    matrix = 0.5 * (matrix + matrix.T)
    matrix.fill_diagonal_(0.0)
    radii = geo.poincare_distance(p, torch.zeros_like(p), c)
    off = matrix[~torch.eye(len(p), dtype=torch.bool)]
    return {
        "curvature": c,
        "classes": [sorted(speaker_set_from_class(n)) for n in range(len(p))],
        "distance_matrix": matrix.tolist(),
        "radii": radii.tolist(),
        "min_pairwise_distance": float(off.min()) if off.numel() else 0.0,
    }


def roc_auc(scores, labels) -> float:
    """Mann-Whitney estimate of the area under the ROC curve (ties count half)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    pos, neg = int(labels.sum()), int((~labels).sum())
    if pos == 0 or neg == 0:
        return float("nan")
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - pos * (pos + 1) / 2) / (pos * neg))


def evaluate_hyper_sd(model: HyperSD, dialogues, collars=(0.0, 0.25)) -> dict:
    correct = total = 0
    scores, truth = [], []
    der_sums = {f"{c:g}": [0.0, 0.0] for c in collars}
    for d in dialogues:
        dist = model.infer_distances(d.layer_stack)
        pred = dist.argmin(dim=-1).numpy()
        y = class_labels_from_activity(d.activity_truth)
        correct += int((pred == y).sum())
        total += len(y)
        scores.append(marginalize_activity(dist, model.membership).numpy())
        truth.append(d.activity_truth)
        hyp = activity_to_segments(d.dialogue_id, activity_from_classes(pred), d.frame_rate)
        for c in collars:
            res = der(d.rttm, hyp, collar=c)
            der_sums[f"{c:g}"][0] += res.errors
            der_sums[f"{c:g}"][1] += res.total
    scores_all, truth_all = np.concatenate(scores), np.concatenate(truth)
    auc = {}
    for s in range(NUM_SPEAKERS):
        val = roc_auc(scores_all[:, s], truth_all[:, s] > 0.5)
        if not math.isnan(val):
            auc[str(s + 1)] = val
    return {
        "frames": total,
        "frame_accuracy": correct / max(1, total),
        "activity_auc": auc,
        "der": {k: (e / t if t > 0 else 0.0) for k, (e, t) in der_sums.items()},
        "layer_weights": torch.softmax(model.alpha.detach(), 0).tolist(),
    }
