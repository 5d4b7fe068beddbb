"""Training objectives for the redirector.

Six terms drive the generator: pixel reconstruction, a perceptual match
through a gaze/head estimator, agreement of pseudo-conditions with ground
truth labels, consistency of factor embeddings across two images of the
same person, a factor-mixing round-trip check, and an adversarial term.
:func:`loss_full` evaluates whichever terms carry nonzero weight and
reports each raw value alongside the weighted total.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import ClassVar

import torch
import torch.nn.functional as F
from torch import Tensor

from .errors import ConfigurationError
from .model import Generator, LatentState, ModelConfig
from .rotor import FactorState, angular_error, pitchyaw_to_vector, transform


@dataclass(frozen=True)
class LossWeights:
    """Per-term weights.

    ``functional_feature`` scales the feature-map part inside the
    functional term instead of contributing to the total on its own;
    ``adversarial`` multiplies the generator's GAN term, which the combined
    objective otherwise counts at unit weight.
    """

    reconstruction: float = 200.0
    functional: float = 20.0
    functional_feature: float = 1.0
    pseudo_labels: float = 5.0
    embedding_consistency: float = 2.0
    disentanglement: float = 2.0
    adversarial: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not isinstance(v, (int, float)) or isinstance(v, bool) or not math.isfinite(v):
                raise ConfigurationError(f"weight {f.name!r} must be a finite number")
            if v < 0:
                raise ConfigurationError(f"weight {f.name!r} must be nonnegative, got {v}")


@dataclass
class LossBreakdown:
    """Raw per-term values plus the weighted total, all 0-dim tensors."""

    reconstruction: Tensor
    functional: Tensor
    pseudo_labels: Tensor
    embedding_consistency: Tensor
    disentanglement: Tensor
    adversarial: Tensor
    total: Tensor

    TERMS: ClassVar[tuple] = (
        "reconstruction",
        "functional",
        "pseudo_labels",
        "embedding_consistency",
        "disentanglement",
        "adversarial",
    )

    def term(self, name: str) -> Tensor:
        if name not in self.TERMS:
            raise KeyError(name)
        return getattr(self, name)

    def as_dict(self) -> dict:
        out = {name: float(self.term(name).detach()) for name in self.TERMS}
        out["total"] = float(self.total.detach())
        return out


@dataclass
class TrainingBatch:
    """One step's worth of paired tensors.

    Images are (B, 3, S, S) in [-1, 1]; labels are (B, 2) radians in
    (pitch, yaw) order; ``labeled_i`` masks the rows whose input-side
    labels may be used for supervision.
    """

    image_i: Tensor
    image_t: Tensor
    gaze_i: Tensor
    head_i: Tensor
    gaze_t: Tensor
    head_t: Tensor
    labeled_i: Tensor

    def __post_init__(self):
        b = self.image_i.shape[0]
        if self.image_t.shape != self.image_i.shape:
            raise ValueError("image_i and image_t must share a shape")
        for name in ("gaze_i", "head_i", "gaze_t", "head_t"):
            if getattr(self, name).shape != (b, 2):
                raise ValueError(f"{name} must be shaped ({b}, 2)")
        if self.labeled_i.shape != (b,) or self.labeled_i.dtype != torch.bool:
            raise ValueError(f"labeled_i must be a ({b},) bool tensor")


def loss_reconstruction(generated: Tensor, target: Tensor) -> Tensor:
    """Mean absolute error over every pixel and channel."""
    if generated.shape != target.shape:
        raise ValueError(
            f"shape mismatch: generated {tuple(generated.shape)} vs target {tuple(target.shape)}"
        )
    return (generated - target).abs().mean()


def loss_functional(
    estimator, generated: Tensor, target: Tensor, feature_weight: float = 1.0
) -> Tensor:
    """Perceptual distance through a gaze/head estimator.

    Sums, over the estimator's feature maps, the batch-mean L2 norm of the
    difference divided by one sample's element count, scaled by
    ``feature_weight``; then adds the angular error between the gaze
    directions and between the head orientations read off the two images.
    """
    est_g = estimator(generated)
    est_t = estimator(target)
    out = generated.new_zeros(())
    if feature_weight:
        feat = generated.new_zeros(())
        for fg, ft in zip(est_g.features, est_t.features):
            diff = (fg - ft).reshape(fg.shape[0], -1)
            feat = feat + torch.linalg.vector_norm(diff, dim=1).mean() / diff.shape[1]
        out = feature_weight * feat
    for a, b in ((est_g.gaze, est_t.gaze), (est_g.head, est_t.head)):
        out = out + angular_error(pitchyaw_to_vector(a), pitchyaw_to_vector(b)).mean()
    return out


def mix_factors(
    state_i: LatentState, state_t: LatentState, rng: torch.Generator
) -> tuple[LatentState, list]:
    """Reassemble per-factor states from two sources with fair coin flips.

    For each factor and batch row, the embedding and its pseudo-condition
    move together from either ``state_i`` or ``state_t``; the invariant
    code always comes from ``state_i``.  Returns the mixed state and one
    (B,) bool mask per factor, True where the row took the ``state_t``
    side.
    """
    if len(state_i.factors) != len(state_t.factors):
        raise ValueError("states carry different factor counts")
    batch = state_i.z0.shape[0]
    mixed, masks = [], []
    for fi, ft in zip(state_i.factors, state_t.factors):
        take_t = torch.rand(batch, generator=rng) < 0.5
        emb_mask = take_t.view((-1,) + (1,) * (fi.embedding.ndim - 1))
        emb = torch.where(emb_mask, ft.embedding, fi.embedding)
        cond = torch.where(take_t.view(-1, 1), ft.pseudo_condition, fi.pseudo_condition)
        mixed.append(FactorState(embedding=emb, pseudo_condition=cond))
        masks.append(take_t)
    return LatentState(z0=state_i.z0, factors=mixed), masks


def loss_disentanglement(generator: Generator, mixed_state: LatentState) -> Tensor:
    """Decode a mixed state, re-encode the image, and demand agreement.

    The supervised pseudo-conditions must survive the round trip (angular
    error), and so must the full flattened latent (one minus cosine).
    """
    recoded = generator.encode(generator.decode(mixed_state))
    out = mixed_state.z0.new_zeros(())
    for i, spec in enumerate(generator.cfg.factors):
        if spec.supervised:
            a = pitchyaw_to_vector(mixed_state.factors[i].pseudo_condition)
            b = pitchyaw_to_vector(recoded.factors[i].pseudo_condition)
            out = out + angular_error(a, b).mean()
    cos = F.cosine_similarity(mixed_state.flatten(), recoded.flatten(), dim=1)
    return out + (1.0 - cos).mean()


def loss_pseudo_labels(
    state: LatentState, cfg: ModelConfig, gaze: Tensor, head: Tensor
) -> Tensor:
    """Angular error of the supervised pseudo-conditions against labels."""
    out = state.z0.new_zeros(())
    for i, spec in enumerate(cfg.factors):
        if spec.supervised:
            labels = gaze if spec.name == "gaze" else head
            pred = pitchyaw_to_vector(state.factors[i].pseudo_condition)
            out = out + angular_error(pred, pitchyaw_to_vector(labels)).mean()
    return out


def _factor_flat(state: LatentState) -> Tensor:
    return torch.cat(
        [f.embedding.reshape(f.embedding.shape[0], -1) for f in state.factors], dim=1
    )


def loss_embedding_consistency(state_a: LatentState, state_b: LatentState) -> Tensor:
    """One minus mean cosine between concatenated factor embeddings.

    The invariant code does not participate; only the factor embeddings
    are expected to agree between two images of the same person.
    """
    if len(state_a.factors) != len(state_b.factors):
        raise ValueError("states carry different factor counts")
    cos = F.cosine_similarity(_factor_flat(state_a), _factor_flat(state_b), dim=1)
    return (1.0 - cos).mean()


def loss_gan(
    discriminator, generated: Tensor, real: Tensor | None = None, role: str = "generator"
) -> Tensor:
    """Patch adversarial loss in the stable log-sigmoid form.

    ``log sigmoid(x)`` is evaluated as ``-softplus(-x)`` so extreme logits
    stay finite.  The discriminator role pushes real patches up and
    generated patches (detached) down; the generator role is the
    non-saturating ``-log sigmoid(D(generated))``.  Values are means over
    patches.
    """
    if role == "generator":
        return F.softplus(-discriminator(generated)).mean()
    if role == "discriminator":
        if real is None:
            raise ValueError("discriminator role needs a real batch")
        real_term = F.softplus(-discriminator(real)).mean()
        fake_term = F.softplus(discriminator(generated.detach())).mean()
        return real_term + fake_term
    raise ValueError(f"unknown role {role!r}; expected 'generator' or 'discriminator'")


def _retarget(
    generator: Generator,
    state_i: LatentState,
    state_t: LatentState,
    batch: TrainingBatch,
    condition_source: str,
) -> LatentState:
    """Move every rotatable factor of the input state onto the target image.

    With pseudo conditions the supervised factors aim at the target's
    predicted conditions and the extraneous ones align to it as well; with
    label conditions the supervised factors rotate from the input's ground
    truth to the target's ground truth instead of trusting the encoder.
    """
    cfg = generator.cfg
    if condition_source == "pseudo":
        targets = {
            spec.name: state_t.factors[i].pseudo_condition
            for i, spec in enumerate(cfg.factors)
            if spec.supervised
        }
        return generator.transform_state(state_i, targets, align_extraneous=state_t)
    out = []
    for i, spec in enumerate(cfg.factors):
        f = state_i.factors[i]
        if spec.supervised:
            src = batch.gaze_i if spec.name == "gaze" else batch.head_i
            tgt = batch.gaze_t if spec.name == "gaze" else batch.head_t
            out.append(transform(FactorState(f.embedding, src), tgt))
        elif spec.dof:
            out.append(transform(f, state_t.factors[i].pseudo_condition))
        else:
            out.append(f)
    return LatentState(z0=state_i.z0, factors=out)


def loss_full(
    generator: Generator,
    discriminator,
    estimator,
    batch: TrainingBatch,
    weights: LossWeights,
    rng: torch.Generator,
    condition_source: str = "pseudo",
) -> tuple[LossBreakdown, Tensor]:
    """Full generator objective for one paired batch.

    Encodes both images, retargets the input state onto the target, decodes
    the redirected image, and evaluates every term whose weight is nonzero;
    zero-weight terms are reported as 0 without being computed.  The coin
    flips for the mixing term are drawn unconditionally so reported values
    never depend on which other terms are active.  Returns the breakdown
    and the redirected image (for the discriminator step).
    """
    if condition_source not in ("pseudo", "label"):
        raise ConfigurationError(
            f"condition_source must be 'pseudo' or 'label', got {condition_source!r}"
        )
    w = weights
    state_i = generator.encode(batch.image_i)
    state_t = generator.encode(batch.image_t)
    transformed = _retarget(generator, state_i, state_t, batch, condition_source)
    generated = generator.decode(transformed)

    zero = batch.image_i.new_zeros(())
    l_rec = loss_reconstruction(generated, batch.image_t) if w.reconstruction else zero
    l_fun = (
        loss_functional(estimator, generated, batch.image_t, w.functional_feature)
        if w.functional
        else zero
    )
    l_pl = zero
    if w.pseudo_labels and bool(batch.labeled_i.any()):
        m = batch.labeled_i
        sub = LatentState(
            z0=state_i.z0[m],
            factors=[
                FactorState(f.embedding[m], f.pseudo_condition[m]) for f in state_i.factors
            ],
        )
        l_pl = loss_pseudo_labels(sub, generator.cfg, batch.gaze_i[m], batch.head_i[m])
    l_ec = loss_embedding_consistency(state_i, state_t) if w.embedding_consistency else zero
    mixed, _ = mix_factors(state_i, transformed, rng)
    l_dis = loss_disentanglement(generator, mixed) if w.disentanglement else zero
    l_adv = loss_gan(discriminator, generated, role="generator") if w.adversarial else zero

    total = (
        w.reconstruction * l_rec
        + w.functional * l_fun
        + w.pseudo_labels * l_pl
        + w.embedding_consistency * l_ec
        + w.disentanglement * l_dis
        + w.adversarial * l_adv
    )
    breakdown = LossBreakdown(
        reconstruction=l_rec,
        functional=l_fun,
        pseudo_labels=l_pl,
        embedding_consistency=l_ec,
        disentanglement=l_dis,
        adversarial=l_adv,
        total=total,
    )
    return breakdown, generated
