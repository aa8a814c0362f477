import itertools
import math

import numpy as np
import pytest
import torch

from whospoke import geometry as geo
from whospoke.errors import NumericalError
from whospoke.hyper_sd import (
    HyperSD,
    HyperSdConfig,
    RiemannianAdam,
    class_label_from_speaker_set,
    class_labels_from_activity,
    classifier_loss,
    clip_and_project,
    clip_norm,
    evaluate_hyper_sd,
    fit_hyper_sd,
    marginalize_activity,
    membership_matrix,
    prototype_distances,
    prototype_report,
    roc_auc,
    speaker_set_from_class,
    weighted_layer_sum,
)
from whospoke.synth import CorpusConfig, DialogueConfig, generate_corpus

F64 = torch.float64


def power_set_oracle(d):
    out = np.zeros(4)
    for n in range(16):
        members = {s for s in range(1, 5) if n >> (s - 1) & 1}
        for s in members:
            out[s - 1] += 1.0 / (1.0 + math.exp(d[n]))
    return np.clip(out, 0, 1)


# -- classes -------------------------------------------------------------------

def test_class_codes():
    assert class_label_from_speaker_set(set()) == 0
    assert class_label_from_speaker_set({2}) == 2
    assert class_label_from_speaker_set({1, 3, 4}) == 13
    with pytest.raises(ValueError):
        class_label_from_speaker_set({5})
    codes = {class_label_from_speaker_set(s) for k in range(5) for s in itertools.combinations(range(1, 5), k)}
    assert codes == set(range(16))
    for n in range(16):
        assert class_label_from_speaker_set(speaker_set_from_class(n)) == n


def test_membership_matrix():
    B = membership_matrix()
    assert B.shape == (4, 16)
    assert (B.sum(axis=1) == 8).all()
    assert (B[:, 0] == 0).all()
    assert len({tuple(col) for col in B.T}) == 16


def test_labels_from_activity():
    act = np.array([[0, 0, 0, 0], [1, 0, 1, 1], [0, 1, 0, 0]])
    assert class_labels_from_activity(act).tolist() == [0, 13, 2]


# -- layer sum -----------------------------------------------------------------

def test_weighted_layer_sum():
    rng = np.random.default_rng(0)
    one = torch.as_tensor(rng.standard_normal((1, 5, 3)))
    assert torch.equal(weighted_layer_sum(one, torch.zeros(1, dtype=F64)), one[0])
    two = torch.as_tensor(rng.standard_normal((2, 5, 3)))
    assert torch.allclose(weighted_layer_sum(two, torch.zeros(2, dtype=F64)), two.mean(0), atol=1e-15)
    stack = rng.standard_normal((3, 6, 4))
    alpha = rng.standard_normal(3)
    w = np.exp(alpha) / np.exp(alpha).sum()
    oracle = np.zeros((6, 4))
    for t in range(6):
        for f in range(4):
            oracle[t, f] = sum(w[l] * stack[l, t, f] for l in range(3))
    got = weighted_layer_sum(torch.as_tensor(stack), torch.as_tensor(alpha)).numpy()
    np.testing.assert_allclose(got, oracle, atol=1e-9)
    with pytest.raises(ValueError):
        weighted_layer_sum(torch.as_tensor(stack), torch.zeros(2, dtype=F64))


# -- encoder ---------------------------------------------------------------------

def test_encoder_shapes_and_context():
    model = HyperSD(HyperSdConfig(seed=1))
    enc = model.encoder
    z = torch.randn(7, 32, dtype=F64, generator=torch.Generator().manual_seed(0))
    u = enc(z)
    assert u.shape == (7, 64)
    assert enc(z[:1]).shape == (1, 64) and torch.isfinite(enc(z[:1])).all()
    swapped = z.clone()
    swapped[[1, 5]] = swapped[[5, 1]]
    assert not torch.allclose(enc(swapped), u)
    # global receptive field: changing the last frame moves the first output
    moved = z.clone()
    moved[-1] += 1.0
    assert not torch.allclose(enc(moved)[0], u[0])
    assert torch.isfinite(enc(torch.zeros(4, 32, dtype=F64))).all()


# -- projection --------------------------------------------------------------------

def test_clip_and_project_branches():
    u = torch.tensor([[1.0, 0.0]], dtype=F64)
    W = torch.eye(2, dtype=F64)
    b = torch.zeros(2, dtype=F64)
    small = clip_and_project(u * 0.5, W, b, radius=2.0)
    assert torch.allclose(small, geo.exp_map_origin(u * 0.5), atol=0, rtol=0)
    v = torch.tensor([[4.0, 0.0]], dtype=F64)  # norm 2r
    clipped = clip_norm(v, 2.0)
    assert 2.0 - 1e-6 <= clipped.norm().item() <= 2.0
    out = clip_and_project(v, W, b, radius=2.0)
    assert torch.allclose(out, geo.exp_map_origin(clipped), atol=1e-15)
    zero = clip_and_project(torch.randn(3, 2, dtype=F64), torch.zeros(2, 2, dtype=F64), b)
    assert torch.equal(zero, torch.zeros(3, 2, dtype=F64))
    with pytest.raises(NumericalError):
        clip_and_project(torch.tensor([[math.inf, 0.0]], dtype=F64), W, b)


# -- distances and marginalisation -----------------------------------------------

def test_prototype_distances():
    rng = np.random.default_rng(1)
    protos = geo.exp_map_origin(torch.as_tensor(rng.uniform(-1, 1, (16, 5))))
    v = protos[3].clone()
    d = prototype_distances(v, protos)
    assert d[3] == 0
    w = geo.exp_map_origin(torch.as_tensor(rng.uniform(-1, 1, 5)))
    d = prototype_distances(w, protos)
    for n in range(16):
        assert abs(d[n].item() - geo.poincare_distance(w, protos[n]).item()) <= 1e-12
    zeros = prototype_distances(torch.zeros(5, dtype=F64), torch.zeros(16, 5, dtype=F64))
    assert torch.equal(zeros, torch.zeros(16, dtype=F64))


def test_marginalize_examples():
    assert torch.all(marginalize_activity(torch.full((16,), 1e4)) < 1e-12)
    d = torch.full((16,), 50.0, dtype=F64)
    d[1] = 0.0  # class {1}
    pi = marginalize_activity(d).numpy()
    np.testing.assert_allclose(pi, power_set_oracle(d.numpy()), atol=1e-15)
    assert abs(pi[0] - (0.5 + 7 / (1 + math.exp(50)))) < 1e-15
    assert (pi[1:] < 1e-20).all()


def test_marginalize_matches_power_set_1000():
    rng = np.random.default_rng(2)
    D = rng.uniform(-2, 8, (1000, 16))
    got = marginalize_activity(torch.as_tensor(D)).numpy()
    for row, d in zip(got, D):
        np.testing.assert_allclose(row, power_set_oracle(d), atol=1e-12, rtol=0)
    assert got.min() >= 0 and got.max() <= 1


# -- loss ------------------------------------------------------------------------

def test_classifier_loss_examples():
    d = np.full(16, 1e3)
    d[5] = 0
    assert classifier_loss(d, 5, 0.0)[0] < 1e-12
    assert classifier_loss(np.ones(16), 3, 0.0)[0] == pytest.approx(math.log(16), abs=1e-12)


def test_classifier_loss_gradient_and_margin():
    rng = np.random.default_rng(3)
    for _ in range(50):
        d = rng.uniform(0, 5, 16)
        k = int(rng.integers(16))
        loss, grad = classifier_loss(d, k, 0.3)
        h = 1e-5
        for n in range(16):
            e = np.zeros(16)
            e[n] = h
            fd = (classifier_loss(d + e, k, 0.3)[0] - classifier_loss(d - e, k, 0.3)[0]) / (2 * h)
            assert abs(fd - grad[n]) <= 1e-4 * max(abs(fd), abs(grad[n]), 1e-6)
        losses = [classifier_loss(d, k, m)[0] for m in (0.0, 0.1, 0.3, 1.0)]
        assert all(a <= b for a, b in zip(losses, losses[1:]))


def _fd_check(fn, x, h=1e-5, tol=1e-4):
    x = x.detach().clone().requires_grad_(True)
    y = fn(x)
    (g,) = torch.autograd.grad(y, x)
    flat = x.detach().reshape(-1)
    for i in range(flat.numel()):
        e = torch.zeros_like(flat)
        e[i] = h
        fd = (fn((flat + e).reshape(x.shape)) - fn((flat - e).reshape(x.shape))).item() / (2 * h)
        an = g.reshape(-1)[i].item()
        assert abs(fd - an) <= tol * max(abs(fd), abs(an), 1e-6), (i, fd, an)


def test_pipeline_gradients_match_finite_differences():
    rng = np.random.default_rng(4)
    protos = geo.exp_map_origin(torch.as_tensor(rng.uniform(-0.5, 0.5, (16, 4))))
    u = torch.as_tensor(rng.standard_normal((3, 6)))
    W = torch.as_tensor(rng.standard_normal((4, 6)) * 0.3)
    b = torch.as_tensor(rng.standard_normal(4) * 0.1)
    weights = torch.as_tensor(rng.standard_normal((3, 16)))
    # d w.r.t. v
    v = clip_and_project(u, W, b)
    _fd_check(lambda x: (prototype_distances(x, protos) * weights).sum(), v)
    # v w.r.t. W and b (including the clipping branch via a large input)
    big = u * 10
    probe = torch.as_tensor(rng.standard_normal((3, 4)))
    _fd_check(lambda x: (clip_and_project(u, x, b) * probe).sum(), W)
    _fd_check(lambda x: (clip_and_project(big, W, x) * probe).sum(), b)
    # d w.r.t. prototypes
    _fd_check(lambda p: (prototype_distances(v, p) * weights).sum(), protos)


# -- optimiser --------------------------------------------------------------------

def test_riemannian_adam_first_step_and_ball():
    x0 = geo.exp_map_origin(torch.tensor([[0.3, -0.2]], dtype=F64))
    p = torch.nn.Parameter(x0.clone())
    opt = RiemannianAdam([p], lr=0.05)
    target = torch.tensor([[0.9, 0.3]], dtype=F64)
    for _ in range(200):
        opt.zero_grad()
        geo.poincare_distance(p, target).sum().backward()
        opt.step()
        assert geo.in_ball(p.detach())
    assert geo.poincare_distance(p.detach(), target).item() < 0.1


def test_riemannian_adam_zero_lr_is_identity():
    x0 = geo.exp_map_origin(torch.rand(4, 3, dtype=F64))
    p = torch.nn.Parameter(x0.clone())
    opt = RiemannianAdam([p], lr=0.0)
    for _ in range(3):
        opt.zero_grad()
        p.pow(2).sum().backward()
        opt.step()
    assert torch.equal(p.detach(), x0)


# -- training ----------------------------------------------------------------------

@pytest.fixture(scope="module")
def small_corpus():
    cfg = CorpusConfig(dialogue=DialogueConfig(duration=8.0, overlap_ratio=0.2), max_speakers=3,
                       num_train=8, num_test=3, seed=50)
    return generate_corpus(cfg)


SMALL = HyperSdConfig(hidden=32, ffn_dim=64, epochs=2, chunk_frames=100, batch_size=8, seed=3)


def test_fit_deterministic(small_corpus):
    a = fit_hyper_sd(small_corpus.splits["train"], SMALL)
    b = fit_hyper_sd(small_corpus.splits["train"], SMALL)
    assert a.history == b.history
    for (n1, p1), (n2, p2) in zip(a.model.state_dict().items(), b.model.state_dict().items()):
        assert n1 == n2 and torch.equal(p1, p2)
    assert a.ball_checks == a.steps > 0


def test_fit_zero_lr_keeps_parameters(small_corpus):
    cfg = HyperSdConfig(**{**SMALL.to_dict(), "lr": 0.0, "proto_lr": 0.0, "epochs": 1})
    model = HyperSD(cfg)
    before = {k: v.clone() for k, v in model.state_dict().items()}
    fit_hyper_sd(small_corpus.splits["train"], cfg, model=model)
    for k, v in model.state_dict().items():
        assert torch.equal(v, before[k]), k


def test_fit_checks_prototypes_every_step(small_corpus):
    seen = []
    fit_hyper_sd(small_corpus.splits["train"], SMALL,
                 on_step=lambda step, m: seen.append(geo.in_ball(m.prototypes.detach())))
    assert seen and all(seen)


def test_fit_errors(small_corpus):
    with pytest.raises(ValueError):
        fit_hyper_sd([], SMALL)

    class Exploding(HyperSD):
        def forward(self, stack):
            return super().forward(stack) * math.nan

    with pytest.raises(NumericalError, match="step 0"):
        fit_hyper_sd(small_corpus.splits["train"], SMALL, model=Exploding(SMALL))


def test_inference_contract(small_corpus):
    model = HyperSD(SMALL)
    d = small_corpus.splits["test"][0]
    pi = model.infer_activity(d.layer_stack)
    assert pi.shape == (d.num_frames, 4)
    assert pi.min() >= 0 and pi.max() <= 1
    assert model.infer_activity(d.layer_stack[:, :1]).shape == (1, 4)
    report = evaluate_hyper_sd(model, small_corpus.splits["test"])
    assert 0 <= report["frame_accuracy"] <= 1


def test_checkpoint_round_trip(tmp_path, small_corpus):
    model = fit_hyper_sd(small_corpus.splits["train"], SMALL).model
    model.save(tmp_path / "sd.json")
    back = HyperSD.load(tmp_path / "sd.json")
    for k, v in model.state_dict().items():
        assert torch.equal(v, back.state_dict()[k])
    stack = small_corpus.splits["test"][0].layer_stack
    assert np.array_equal(model.infer_activity(stack), back.infer_activity(stack))


def test_prototype_report():
    model = HyperSD(HyperSdConfig(proto_init=1e-6))
    rep = prototype_report(model.prototypes)
    M = np.array(rep["distance_matrix"])
    assert M.shape == (16, 16)
    assert np.array_equal(M, M.T) and (np.diag(M) == 0).all()
    assert max(rep["radii"]) < 1e-5


def test_roc_auc():
    assert roc_auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75
    assert roc_auc([1, 1], [0, 1]) == 0.5
    assert math.isnan(roc_auc([1, 2], [1, 1]))
