"""Rotation algebra for transformable latent factors.

Every factor of image variation owns an embedding (a stack of short row
vectors) and a condition (an angle vector whose length is the factor's
degrees of freedom).  Retargeting a factor means rotating its embedding
rows from the source condition back to the canonical state and then
forward to the target condition:

    z_target = R(target) @ R(source)^-1 @ z_source      (applied per row)

All functions here are pure, differentiable torch ops that broadcast over
arbitrary leading batch dimensions.  No learned components.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor

# Cosine clamp inside arccos.  arccos is non-differentiable at +-1, so the
# cosine is clamped to [-1 + ANG_EPS, 1 - ANG_EPS] before the call; angular
# errors therefore saturate at pi - sqrt(2 * ANG_EPS) rather than pi.
ANG_EPS = 1e-7


@dataclass(frozen=True)
class FactorSpec:
    """Declarative description of one latent factor.

    Attributes
    ----------
    name : str
        Identifier, unique within a model configuration.
    dof : int
        Degrees of freedom, one of {0, 1, 2}.  0-DoF factors carry no
        condition and are passed through untransformed.
    units : int
        Number of embedding rows.  The embedding is units x (dof + 1) for
        dof >= 1 and a flat vector of length ``units`` for dof == 0.
    supervised : bool
        True only for the two ground-truth-labeled factors (gaze, head).
    """

    name: str
    dof: int
    units: int
    supervised: bool = False

    def __post_init__(self):
        if self.dof not in (0, 1, 2):
            raise ValueError(f"factor {self.name!r}: dof must be 0, 1 or 2, got {self.dof}")
        if self.units <= 0:
            raise ValueError(f"factor {self.name!r}: units must be positive, got {self.units}")
        if self.supervised and self.dof != 2:
            raise ValueError(f"supervised factor {self.name!r} must have dof=2")

    @property
    def embedding_width(self) -> int:
        return self.dof + 1 if self.dof >= 1 else 1

    @property
    def embedding_size(self) -> int:
        return self.units * self.embedding_width


@dataclass(frozen=True)
class FactorState:
    """Embedding plus the condition it was encoded at.

    ``embedding`` has shape (..., units, dof + 1) and ``pseudo_condition``
    shape (..., dof), with matching leading batch dimensions.
    """

    embedding: Tensor
    pseudo_condition: Tensor

    @property
    def dof(self) -> int:
        return self.pseudo_condition.shape[-1]


def _as_angles(c, dof: int | None = None) -> Tensor:
    t = torch.as_tensor(c)
    if not t.is_floating_point():
        t = t.double()
    if not torch.isfinite(t).all():
        raise ValueError("condition angles must be finite")
    if dof is not None:
        if t.ndim == 0:
            if dof != 1:
                raise ValueError(f"expected {dof} angle components, got a scalar")
        elif t.shape[-1] != dof:
            raise ValueError(f"expected {dof} angle components, got {t.shape[-1]}")
    return t


def rotation_1dof(c) -> Tensor:
    """2x2 rotation matrix for a 1-DoF condition.

    ``c`` is an angle in radians (scalar or any batch shape); the result has
    shape (..., 2, 2) and rotates row vectors counterclockwise when applied
    as ``row @ R.T``.
    """
    c = _as_angles(c)
    cos, sin = torch.cos(c), torch.sin(c)
    row0 = torch.stack([cos, -sin], dim=-1)
    row1 = torch.stack([sin, cos], dim=-1)
    return torch.stack([row0, row1], dim=-2)


def rotation_2dof(c) -> Tensor:
    """3x3 rotation matrix for a 2-DoF condition ``(pitch, yaw)``.

    Composed as yaw about the vertical axis applied after pitch about the
    horizontal axis: ``R = R_yaw(phi) @ R_pitch(theta)``.  Input shape
    (..., 2), output (..., 3, 3).
    """
    c = _as_angles(c, dof=2)
    theta, phi = c[..., 0], c[..., 1]
    ct, st = torch.cos(theta), torch.sin(theta)
    cp, sp = torch.cos(phi), torch.sin(phi)
    zero = torch.zeros_like(ct)
    one = torch.ones_like(ct)
    pitch = torch.stack(
        [
            torch.stack([one, zero, zero], dim=-1),
            torch.stack([zero, ct, -st], dim=-1),
            torch.stack([zero, st, ct], dim=-1),
        ],
        dim=-2,
    )
    yaw = torch.stack(
        [
            torch.stack([cp, zero, sp], dim=-1),
            torch.stack([zero, one, zero], dim=-1),
            torch.stack([-sp, zero, cp], dim=-1),
        ],
        dim=-2,
    )
    return yaw @ pitch


def rotation_matrix(c, dof: int) -> Tensor:
    """Rotation matrix for a condition with the given degrees of freedom."""
    if dof == 1:
        c = _as_angles(c)
        if c.ndim and c.shape[-1] == 1:
            c = c[..., 0]
        return rotation_1dof(c)
    if dof == 2:
        return rotation_2dof(c)
    raise ValueError(f"no rotation is defined for dof={dof}")


def transform_embedding(embedding: Tensor, source, target, dof: int) -> Tensor:
    """Rotate embedding rows from a source condition to a target condition.

    Applies ``R(target) @ R(source)^-1`` to every row of ``embedding``
    (shape (..., units, dof + 1)).  The inverse is the transpose.
    """
    r_src = rotation_matrix(source, dof)
    r_tgt = rotation_matrix(target, dof)
    rot = r_tgt @ r_src.transpose(-1, -2)
    return embedding @ rot.transpose(-1, -2)


def transform(state: FactorState, target) -> FactorState:
    """Retarget a factor state to a new condition.

    0-DoF factors have no rotation and must be routed through the
    pass-through path by the caller; asking to transform one is an error.
    """
    dof = state.dof
    if dof == 0:
        raise ValueError("0-DoF factors cannot be transformed; pass them through unchanged")
    target = _as_angles(target, dof=dof)
    emb = transform_embedding(state.embedding, state.pseudo_condition, target, dof)
    return FactorState(embedding=emb, pseudo_condition=target)


def angular_error(v: Tensor, w: Tensor, eps: float = ANG_EPS) -> Tensor:
    """Angle in radians between two 3-vectors (batched over leading dims).

    The cosine similarity is clamped to [-1 + eps, 1 - eps] before arccos to
    keep the gradient finite at parallel / antiparallel inputs, so the
    result lives in (0, pi) strictly.
    """
    v = torch.as_tensor(v)
    w = torch.as_tensor(w)
    nv = torch.linalg.vector_norm(v, dim=-1)
    nw = torch.linalg.vector_norm(w, dim=-1)
    if (nv == 0).any() or (nw == 0).any():
        raise ValueError("angular_error is undefined for zero-norm vectors")
    cos = (v * w).sum(dim=-1) / (nv * nw)
    return torch.arccos(torch.clamp(cos, -1.0 + eps, 1.0 - eps))


def pitchyaw_to_vector(c) -> Tensor:
    """Unit 3-vector for a ``(pitch, yaw)`` condition.

    Convention: y up, z toward the camera, yaw positive to the subject's
    left: ``(cos(pitch) sin(yaw), sin(pitch), cos(pitch) cos(yaw))``.
    Input shape (..., 2), output (..., 3).
    """
    c = _as_angles(c, dof=2)
    theta, phi = c[..., 0], c[..., 1]
    ct = torch.cos(theta)
    return torch.stack([ct * torch.sin(phi), torch.sin(theta), ct * torch.cos(phi)], dim=-1)


def vector_to_pitchyaw(v: Tensor) -> Tensor:
    """Inverse of :func:`pitchyaw_to_vector` (vectors need not be unit)."""
    v = torch.as_tensor(v)
    n = torch.linalg.vector_norm(v, dim=-1)
    theta = torch.arcsin(torch.clamp(v[..., 1] / n, -1.0, 1.0))
    phi = torch.atan2(v[..., 0], v[..., 2])
    return torch.stack([theta, phi], dim=-1)
