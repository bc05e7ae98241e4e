"""Rotary position embeddings with adjacent-pair layout.

A vector of even dimension d is treated as d/2 pairs (x1,x2), (x3,x4), ...
Pair j is rotated by the angle m * theta_j for a token at position m, where
theta_j = base**(-2*(j-1)/d) decays exponentially with j. Dot products of
rotated queries and keys then depend only on the position difference.

Angle products m * theta_j are accumulated in float64 (position indices can
reach 1e4, where float32 products lose enough precision to break rotation
composition); the rotation itself is applied in float32.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import DimensionError, ParameterError


@dataclass(frozen=True)
class RotationSpec:
    """Per-pair angular rates for a head dimension d."""

    d: int
    base: float
    angles: torch.Tensor  # (d/2,) float64, strictly decreasing, angles[0] == 1


def build_angles(d: int, base: float = 10000.0) -> RotationSpec:
    """Build the angular-rate table theta_1..theta_{d/2}."""
    if d < 2 or d % 2 != 0:
        raise DimensionError(f"rotation dimension must be even and >= 2, got {d}")
    if base <= 0:
        raise ParameterError(f"rotation base must be positive, got {base}")
    i = torch.arange(d // 2, dtype=torch.float64)
    angles = float(base) ** (-2.0 * i / d)
    return RotationSpec(d=d, base=float(base), angles=angles)


def _check_positions(m: torch.Tensor) -> torch.Tensor:
    if m.is_floating_point():
        if not torch.equal(m, m.round()):
            raise ParameterError("positions must be integers (fractional position)")
        m = m.long()
    if m.numel() and int(m.min()) < 0:
        raise ParameterError("positions must be non-negative")
    return m


def rotation_tables(
    spec: RotationSpec, positions: torch.Tensor, dtype: torch.dtype = torch.float32
) -> tuple[torch.Tensor, torch.Tensor]:
    """cos/sin tables for integer positions, shape (*positions.shape, d/2)."""
    positions = _check_positions(torch.as_tensor(positions))
    theta = positions.to(torch.float64).unsqueeze(-1) * spec.angles
    return theta.cos().to(dtype), theta.sin().to(dtype)


def apply_rotation(x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor) -> torch.Tensor:
    """Rotate adjacent pairs of the last axis by precomputed cos/sin tables.

    cos/sin must broadcast against x's leading axes and have last dim d/2.
    """
    x1 = x[..., 0::2]
    x2 = x[..., 1::2]
    out = torch.empty_like(x)
    out[..., 0::2] = x1 * cos - x2 * sin
    out[..., 1::2] = x2 * cos + x1 * sin
    return out


def rotate(spec: RotationSpec, x: torch.Tensor, m) -> torch.Tensor:
    """Rotate vector(s) x of dimension spec.d by position(s) m.

    x: (..., d). m: a scalar position applied to every vector, or a tensor of
    positions matching x's leading shape.
    """
    x = torch.as_tensor(x)
    if x.shape[-1] != spec.d:
        raise DimensionError(f"expected last dimension {spec.d}, got {x.shape[-1]}")
    m = torch.as_tensor(m)
    dtype = x.dtype if x.is_floating_point() else torch.float32
    cos, sin = rotation_tables(spec, m, dtype=dtype)
    if m.ndim > 0 and m.shape != x.shape[:-1]:
        raise DimensionError(f"positions shape {tuple(m.shape)} does not match vectors {tuple(x.shape[:-1])}")
    return apply_rotation(x, cos, sin)


def condition_positions(n_cond: int, n_query: int) -> torch.Tensor:
    """Map condition frame indices onto the query timeline.

    When lengths match this is the identity; otherwise frame n lands at
    round(n * M / N) so rotary offsets stay aligned between the grids.
    """
    if n_cond <= 0:
        return torch.zeros(0, dtype=torch.long)
    if n_cond == n_query:
        return torch.arange(n_cond, dtype=torch.long)
    n = torch.arange(n_cond, dtype=torch.float64)
    return torch.round(n * (n_query / n_cond)).long()
