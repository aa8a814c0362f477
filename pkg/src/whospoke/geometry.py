"""Poincare ball primitives with curvature ``c`` (sectional curvature ``-c``).

Every function works on the last tensor dimension and broadcasts over the
leading ones. Inputs are promoted to float64; artanh close to 1 is badly
conditioned in single precision.
"""

from __future__ import annotations

import math

import torch

from .errors import NumericalError

BOUNDARY_EPS = 1e-5
DEFAULT_CURVATURE = 1.0

# floor for squared norms, keeps sqrt differentiable at the origin
_MIN_SQNORM = 1e-30
_MIN_DENOM = 1e-15


def _as_f64(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x if x.dtype == torch.float64 else x.to(torch.float64)
    return torch.as_tensor(x, dtype=torch.float64)


def _check_curvature(c: float) -> float:
    c = float(c)
    if not math.isfinite(c) or c <= 0:
        raise ValueError(f"curvature must be positive and finite, got {c}")
    return c


def _norm(x: torch.Tensor) -> torch.Tensor:
    return x.pow(2).sum(-1, keepdim=True).clamp_min(_MIN_SQNORM).sqrt()


def max_norm(c: float, boundary_eps: float = BOUNDARY_EPS) -> float:
    """Largest Euclidean norm a projected point may have."""
    return (1.0 - boundary_eps) / math.sqrt(c)


def project_to_ball(p, c: float = DEFAULT_CURVATURE, boundary_eps: float = BOUNDARY_EPS) -> torch.Tensor:
    """Rescale points radially so that ``sqrt(c) * |p| <= 1 - boundary_eps``.

    Points already inside that radius are returned unchanged (same values,
    not merely close).
    """
    c = _check_curvature(c)
    if not 0 < boundary_eps <= 1e-2:
        raise ValueError(f"boundary_eps must lie in (0, 1e-2], got {boundary_eps}")
    p = _as_f64(p)
    limit = max_norm(c, boundary_eps)
    norm = _norm(p)
    return torch.where(norm > limit, p / norm * limit, p)


def exp_map_origin(v, c: float = DEFAULT_CURVATURE, project: bool = True) -> torch.Tensor:
    """Exponential map at the origin: ``tanh(sqrt(c)|v|) v / (sqrt(c)|v|)``.

    The zero vector maps to the origin exactly. With ``project=True`` the
    result is additionally pulled inside the ``boundary_eps`` margin, which
    only matters once ``sqrt(c)|v|`` exceeds roughly 6.
    """
    c = _check_curvature(c)
    v = _as_f64(v)
    if not torch.isfinite(v).all():
        raise ValueError("exp_map_origin: non-finite tangent vector")
    sqrt_c = math.sqrt(c)
    norm = _norm(v)
    out = torch.tanh(sqrt_c * norm) * v / (sqrt_c * norm)
    return project_to_ball(out, c) if project else out


def log_map_origin(p, c: float = DEFAULT_CURVATURE) -> torch.Tensor:
    """Inverse of :func:`exp_map_origin`."""
    c = _check_curvature(c)
    p = _as_f64(p)
    sqrt_c = math.sqrt(c)
    norm = _norm(p)
    return torch.atanh((sqrt_c * norm).clamp_max(1 - 1e-15)) * p / (sqrt_c * norm)


def _mobius_add_raw(x: torch.Tensor, y: torch.Tensor, c: float):
    xy = (x * y).sum(-1, keepdim=True)
    x2 = x.pow(2).sum(-1, keepdim=True)
    y2 = y.pow(2).sum(-1, keepdim=True)
    num = (1 + 2 * c * xy + c * y2) * x + (1 - c * x2) * y
    denom = 1 + 2 * c * xy + c * c * x2 * y2
    return num, denom


def mobius_add(x, y, c: float = DEFAULT_CURVATURE, project: bool = True) -> torch.Tensor:
    """Mobius addition ``x (+)_c y``.

    A vanishing denominator (only possible for points on or outside the
    boundary) triggers one retry with projected operands before giving up.
    """
    c = _check_curvature(c)
    x, y = _as_f64(x), _as_f64(y)
    num, denom = _mobius_add_raw(x, y, c)
    if not bool((denom.abs() >= _MIN_DENOM).all()):
        x, y = project_to_ball(x, c), project_to_ball(y, c)
        num, denom = _mobius_add_raw(x, y, c)
        if not bool((denom.abs() >= _MIN_DENOM).all()):
            raise NumericalError("mobius_add: degenerate denominator after projection")
    out = num / denom
    return project_to_ball(out, c) if project else out


def poincare_distance(x, y, c: float = DEFAULT_CURVATURE) -> torch.Tensor:
    """Geodesic distance ``(2/sqrt(c)) artanh(sqrt(c) |(-x) (+)_c y|)``.

    Returns a tensor with the last dimension reduced. Identical inputs give
    an exact zero.
    """
    c = _check_curvature(c)
    x, y = _as_f64(x), _as_f64(y)
    sqrt_c = math.sqrt(c)
    diff = mobius_add(-x, y, c)
    arg = sqrt_c * _norm(diff).squeeze(-1)
    if bool((arg >= 1).any()):
        raise NumericalError("poincare_distance: artanh argument reached 1")
    dist = 2.0 / sqrt_c * torch.atanh(arg)
    same = (x == y).all(-1)
    if bool(same.any()):
        dist = torch.where(same, torch.zeros_like(dist), dist)
    return dist


def conformal_factor(x, c: float = DEFAULT_CURVATURE) -> torch.Tensor:
    """``lambda_x = 2 / (1 - c|x|^2)``, keepdim on the last axis."""
    x = _as_f64(x)
    return 2.0 / (1.0 - c * x.pow(2).sum(-1, keepdim=True)).clamp_min(_MIN_DENOM)


def riemannian_rescale(grad, x, c: float = DEFAULT_CURVATURE) -> torch.Tensor:
    """Convert a Euclidean gradient at ``x`` into the Riemannian gradient."""
    c = _check_curvature(c)
    grad = _as_f64(grad)
    return grad / conformal_factor(x, c).pow(2)


def retract(x, step, c: float = DEFAULT_CURVATURE) -> torch.Tensor:
    """Move ``x`` along tangent ``step`` with the exact exponential map at ``x``.

    ``exp_x(u) = x (+)_c exp_0(lambda_x u / 2)``; the result is projected.
    """
    c = _check_curvature(c)
    x, step = _as_f64(x), _as_f64(step)
    scaled = step * conformal_factor(x, c) / 2.0
    return mobius_add(x, exp_map_origin(scaled, c, project=False), c)


def gyration(u, v, w, c: float = DEFAULT_CURVATURE) -> torch.Tensor:
    """Closed form of ``gyr[u, v] w``, used for parallel transport."""
    u, v, w = _as_f64(u), _as_f64(v), _as_f64(w)
    k = -c
    u2 = u.pow(2).sum(-1, keepdim=True)
    v2 = v.pow(2).sum(-1, keepdim=True)
    uv = (u * v).sum(-1, keepdim=True)
    uw = (u * w).sum(-1, keepdim=True)
    vw = (v * w).sum(-1, keepdim=True)
    k2 = k * k
    a = -k2 * uw * v2 - k * vw + 2 * k2 * uv * vw
    b = -k2 * vw * u2 + k * uw
    d = 1 - 2 * k * uv + k2 * u2 * v2
    return w + 2 * (a * u + b * v) / d.clamp_min(_MIN_DENOM)


def transport(x, y, v, c: float = DEFAULT_CURVATURE) -> torch.Tensor:
    """Parallel transport of tangent vector ``v`` from ``x`` to ``y``."""
    return gyration(y, -_as_f64(x), v, c) * conformal_factor(x, c) / conformal_factor(y, c)


def in_ball(p, c: float = DEFAULT_CURVATURE, boundary_eps: float = BOUNDARY_EPS) -> bool:
    """True when every point respects the projected-norm bound."""
    p = _as_f64(p)
    limit = max_norm(c, boundary_eps)
    return bool((p.pow(2).sum(-1).sqrt() <= limit * (1 + 1e-12)).all())
