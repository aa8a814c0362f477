import math

import mpmath
import numpy as np
import pytest
import torch

from whospoke import geometry as geo
from whospoke.errors import NumericalError


def random_points(rng, n, dim, c=1.0, max_radius=0.9):
    direction = rng.normal(size=(n, dim))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    radius = rng.uniform(0, max_radius, size=(n, 1)) / math.sqrt(c)
    return torch.as_tensor(direction * radius)


def test_exp_map_origin_fixes_origin():
    out = geo.exp_map_origin(torch.zeros(5))
    assert torch.equal(out, torch.zeros(5, dtype=torch.float64))


def test_exp_map_origin_closed_form():
    mpmath.mp.dps = 40
    expected = float(mpmath.tanh(mpmath.mpf("0.5")))
    out = geo.exp_map_origin(torch.tensor([0.5, 0.0, 0.0]), c=1.0)
    assert out[0].item() == pytest.approx(expected, abs=1e-15)
    assert out[0].item() == pytest.approx(0.46212, abs=1e-5)
    assert out[1].item() == 0.0


@pytest.mark.parametrize("c", [0.5, 1.0, 1.5])
def test_exp_map_origin_stays_inside(c):
    rng = np.random.default_rng(0)
    v = torch.as_tensor(rng.normal(scale=20.0, size=(200, 6)))
    out = geo.exp_map_origin(v, c)
    assert (out.norm(dim=-1) < 1 / math.sqrt(c)).all()
    assert geo.in_ball(out, c)


def test_exp_map_origin_rejects_nonfinite():
    with pytest.raises(ValueError):
        geo.exp_map_origin(torch.tensor([float("nan"), 0.0]))


def test_exp_map_monotone_in_norm():
    direction = torch.tensor([0.6, -0.8])
    norms = torch.linspace(0.0, 5.0, 400, dtype=torch.float64)
    radii = [geo.exp_map_origin(direction * n).norm().item() for n in norms]
    assert all(a < b for a, b in zip(radii, radii[1:]))


def test_log_map_inverts_exp_map():
    rng = np.random.default_rng(1)
    v = torch.as_tensor(rng.normal(size=(50, 4)))
    back = geo.log_map_origin(geo.exp_map_origin(v, 1.3), 1.3)
    assert torch.allclose(back, v, atol=1e-10)


def test_project_interior_unchanged():
    p = torch.tensor([0.3, 0.4], dtype=torch.float64)  # norm 0.5
    assert torch.equal(geo.project_to_ball(p, 1.0, 1e-5), p)
    assert torch.equal(geo.project_to_ball(torch.zeros(3), 1.0), torch.zeros(3, dtype=torch.float64))


def test_project_rescales_radially():
    p = torch.tensor([0.9999999, 0.0], dtype=torch.float64)
    out = geo.project_to_ball(p, 1.0, 1e-5)
    # radial rescale oracle: direction kept, norm set to 1 - eps
    assert out.norm().item() == pytest.approx(0.99999, abs=1e-15)
    assert out[1].item() == 0.0


def test_project_rejects_bad_eps():
    with pytest.raises(ValueError):
        geo.project_to_ball(torch.zeros(2), 1.0, 0.5)


def test_mobius_add_identity_and_inverse():
    rng = np.random.default_rng(2)
    x = random_points(rng, 100, 5)
    assert torch.allclose(geo.mobius_add(torch.zeros_like(x), x), x, atol=0)
    assert geo.mobius_add(-x, x).abs().max().item() <= 1e-9


def test_mobius_add_one_dimensional_reduction():
    x = torch.tensor([0.3, 0.0], dtype=torch.float64)
    y = torch.tensor([0.4, 0.0], dtype=torch.float64)
    out = geo.mobius_add(x, y, 1.0)
    assert out[0].item() == pytest.approx((0.3 + 0.4) / (1 + 0.12), abs=1e-15)
    assert out[0].item() == pytest.approx(0.625, abs=1e-15)


def test_mobius_add_boundary_operands_retry_after_projection():
    # antipodal boundary points: raw denominator 1 - 2 + 1 = 0
    out = geo.mobius_add(torch.tensor([1.0, 0.0]), torch.tensor([-1.0, 0.0]))
    assert torch.isfinite(out).all()
    assert geo.in_ball(out)


def test_mobius_add_still_degenerate_raises():
    with pytest.raises(NumericalError):
        geo.mobius_add(torch.tensor([float("nan"), 0.0]), torch.tensor([0.1, 0.0]))


def test_distance_from_origin_closed_form():
    mpmath.mp.dps = 40
    r = mpmath.mpf("0.5")
    expected = float(mpmath.log((1 + r) / (1 - r)))
    d = geo.poincare_distance(torch.zeros(4), torch.tensor([0.5, 0, 0, 0]), 1.0)
    assert d.item() == pytest.approx(expected, abs=1e-14)
    assert d.item() == pytest.approx(1.09861, abs=1e-5)


def test_distance_self_is_exact_zero():
    rng = np.random.default_rng(3)
    x = random_points(rng, 20, 3)
    assert torch.equal(geo.poincare_distance(x, x), torch.zeros(20, dtype=torch.float64))


def test_distance_matches_high_precision_oracle():
    mpmath.mp.dps = 50
    rng = np.random.default_rng(4)
    for c in (0.5, 1.0, 1.5):
        x = random_points(rng, 10, 3, c=c)
        y = random_points(rng, 10, 3, c=c)
        got = geo.poincare_distance(x, y, c)
        for i in range(10):
            # arcosh form of the distance, independent of the Mobius route
            xs = [mpmath.mpf(float(a)) for a in x[i]]
            ys = [mpmath.mpf(float(a)) for a in y[i]]
            cc = mpmath.mpf(c)
            diff2 = sum((a - b) ** 2 for a, b in zip(xs, ys))
            nx = sum(a * a for a in xs)
            ny = sum(b * b for b in ys)
            arg = 1 + 2 * cc * diff2 / ((1 - cc * nx) * (1 - cc * ny))
            expected = float(mpmath.acosh(arg) / mpmath.sqrt(cc))
            assert got[i].item() == pytest.approx(expected, rel=1e-9, abs=1e-12)


def test_distance_axioms():
    rng = np.random.default_rng(5)
    for dim in range(1, 9):
        n = 125
        x, y, z = (random_points(rng, n, dim, max_radius=0.95) for _ in range(3))
        dxy = geo.poincare_distance(x, y)
        dyx = geo.poincare_distance(y, x)
        dxz = geo.poincare_distance(x, z)
        dyz = geo.poincare_distance(y, z)
        assert (dxy >= 0).all()
        assert (dxy - dyx).abs().max().item() <= 1e-9
        assert (dxz <= dxy + dyz + 1e-7).all()
        assert (geo.poincare_distance(x, x) == 0).all()
        # distinct points are at positive distance
        assert (dxy[(x - y).norm(dim=-1) > 1e-9] > 0).all()


def test_euclidean_limit():
    rng = np.random.default_rng(6)
    x = random_points(rng, 200, 4, c=1.0, max_radius=0.1)
    y = random_points(rng, 200, 4, c=1.0, max_radius=0.1)
    d = geo.poincare_distance(x, y, c=1e-6)
    euclid = 2 * (x - y).norm(dim=-1)
    assert ((d - euclid).abs() / euclid).max().item() <= 1e-3


def test_riemannian_rescale_values():
    g = torch.tensor([1.0, -2.0, 4.0], dtype=torch.float64)
    assert torch.equal(geo.riemannian_rescale(g, torch.zeros(3)), g / 4)
    x = torch.tensor([math.sqrt(0.5), 0.0, 0.0], dtype=torch.float64)
    scale = geo.riemannian_rescale(torch.ones(3), x, 1.0)
    assert scale[0].item() == pytest.approx(0.0625, abs=1e-15)
    near = torch.tensor([0.999999, 0.0, 0.0])
    assert geo.riemannian_rescale(torch.ones(3), near)[0].item() < 1e-11


def test_retract_zero_step_and_origin():
    rng = np.random.default_rng(7)
    x = random_points(rng, 10, 4)
    assert torch.equal(geo.retract(x, torch.zeros_like(x)), x)
    step = torch.as_tensor(rng.normal(size=(10, 4)))
    assert torch.allclose(geo.retract(torch.zeros_like(step), step), geo.exp_map_origin(step), atol=1e-15)


def test_retract_is_exact_exponential_map():
    # geodesic distance travelled equals the Riemannian length lambda_x |u|
    rng = np.random.default_rng(8)
    x = random_points(rng, 50, 3, max_radius=0.7)
    u = torch.as_tensor(rng.normal(scale=0.1, size=(50, 3)))
    y = geo.retract(x, u)
    travelled = geo.poincare_distance(x, y)
    length = (geo.conformal_factor(x) * u.norm(dim=-1, keepdim=True)).squeeze(-1)
    assert torch.allclose(travelled, length, rtol=1e-9)


def test_repeated_retractions_stay_inside():
    x = torch.zeros(3, dtype=torch.float64)
    step = torch.tensor([0.3, 0.1, -0.2], dtype=torch.float64)
    for _ in range(500):
        x = geo.retract(x, step)
        assert geo.in_ball(x)


def test_gyration_matches_definition():
    rng = np.random.default_rng(9)
    u, v, w = (random_points(rng, 30, 4, max_radius=0.8) for _ in range(3))
    left = geo.mobius_add(-geo.mobius_add(u, v, project=False),
                          geo.mobius_add(u, geo.mobius_add(v, w, project=False), project=False),
                          project=False)
    assert torch.allclose(geo.gyration(u, v, w), left, atol=1e-10)


def test_transport_preserves_riemannian_norm():
    rng = np.random.default_rng(10)
    x, y = (random_points(rng, 30, 4) for _ in range(2))
    v = torch.as_tensor(rng.normal(size=(30, 4)))
    moved = geo.transport(x, y, v)
    before = geo.conformal_factor(x) * v.norm(dim=-1, keepdim=True)
    after = geo.conformal_factor(y) * moved.norm(dim=-1, keepdim=True)
    assert torch.allclose(before, after, rtol=1e-10)


def _central_difference(fn, arg, h=1e-5):
    grad = torch.zeros_like(arg)
    for i in range(arg.numel()):
        plus, minus = arg.clone(), arg.clone()
        plus[i] += h
        minus[i] -= h
        grad[i] = (fn(plus) - fn(minus)) / (2 * h)
    return grad


def test_distance_gradient_matches_finite_differences():
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(100):
        x, p = random_points(rng, 2, 4, max_radius=0.85)
        xa = x.clone().requires_grad_(True)
        pa = p.clone().requires_grad_(True)
        geo.poincare_distance(xa, pa).backward()
        fd_x = _central_difference(lambda z: geo.poincare_distance(z, p).item(), x.clone())
        fd_p = _central_difference(lambda z: geo.poincare_distance(x, z).item(), p.clone())
        for analytic, numeric in ((xa.grad, fd_x), (pa.grad, fd_p)):
            worst = max(worst, ((analytic - numeric).norm() / numeric.norm()).item())
    assert worst <= 1e-4
