"""Oracle checks for the training objectives.

Every derived value is recomputed through an independent route (python
loops or numpy) before being asserted; trivial identities are pinned
directly.  Pixel gradients are compared against central finite
differences on an 8x8 crop.
"""
import math

import numpy as np
import pytest
import torch

from sted.errors import ConfigurationError
from sted.losses import (
    LossBreakdown,
    LossWeights,
    TrainingBatch,
    loss_disentanglement,
    loss_embedding_consistency,
    loss_full,
    loss_functional,
    loss_gan,
    loss_pseudo_labels,
    loss_reconstruction,
    mix_factors,
)
from sted.model import (
    EstimatorFd,
    Generator,
    LatentState,
    ModelConfig,
    PatchDiscriminator,
    default_factors,
)
from sted.rotor import FactorState

# Strictly clamped arccos never returns exactly zero; two angular terms of
# identical vectors sit at this floor.
ANG_FLOOR = math.acos(1.0 - 1e-7)


def tiny_cfg(size=32):
    return ModelConfig(
        image_size=size,
        base_width=8,
        growth=4,
        z0_units=16,
        factors=default_factors(1, 1, units=4),
        disc_width=8,
        est_width=8,
    )


def make_models(seed=0, double=False, size=32):
    cfg = tiny_cfg(size)
    torch.manual_seed(seed)
    g = Generator(cfg)
    d = PatchDiscriminator(cfg)
    e = EstimatorFd(cfg)
    if double:
        g.double()
        d.double()
        e.double()
    return cfg, g, d, e


def make_batch(b=4, size=32, seed=1, dtype=torch.float32, labeled="half"):
    gen = torch.Generator().manual_seed(seed)

    def u(shape, scale=1.0):
        return (torch.rand(shape, generator=gen, dtype=dtype) * 2 - 1) * scale

    if labeled == "all":
        mask = torch.ones(b, dtype=torch.bool)
    elif labeled == "none":
        mask = torch.zeros(b, dtype=torch.bool)
    else:
        mask = torch.arange(b) % 2 == 0
    return TrainingBatch(
        image_i=u((b, 3, size, size)),
        image_t=u((b, 3, size, size)),
        gaze_i=u((b, 2), 0.5),
        head_i=u((b, 2), 0.4),
        gaze_t=u((b, 2), 0.5),
        head_t=u((b, 2), 0.4),
        labeled_i=mask,
    )


def np_pitchyaw_vec(c):
    t, p = c[..., 0], c[..., 1]
    return np.stack([np.cos(t) * np.sin(p), np.sin(t), np.cos(t) * np.cos(p)], axis=-1)


def np_angular(a, b):
    va, vb = np_pitchyaw_vec(np.asarray(a, dtype=np.float64)), np_pitchyaw_vec(
        np.asarray(b, dtype=np.float64)
    )
    cos = (va * vb).sum(-1) / (np.linalg.norm(va, axis=-1) * np.linalg.norm(vb, axis=-1))
    return np.arccos(np.clip(cos, -1.0 + 1e-7, 1.0 - 1e-7))


class ConstD(torch.nn.Module):
    """Discriminator stub emitting a constant logit map."""

    def __init__(self, value, patches=(1, 6, 6)):
        super().__init__()
        self.value = value
        self.patches = patches

    def forward(self, x):
        return torch.full((x.shape[0],) + self.patches, self.value, dtype=x.dtype)


class SliceD(torch.nn.Module):
    """Discriminator stub whose logits are a strided view of the pixels."""

    def forward(self, x):
        return x[:, 0, ::8, ::8]


# ---------------------------------------------------------------- weights


def test_weight_defaults():
    w = LossWeights()
    assert w.reconstruction == 200.0
    assert w.functional == 20.0
    assert w.functional_feature == 1.0
    assert w.pseudo_labels == 5.0
    assert w.embedding_consistency == 2.0
    assert w.disentanglement == 2.0
    assert w.adversarial == 1.0


def test_weight_validation():
    with pytest.raises(ConfigurationError, match="nonnegative"):
        LossWeights(reconstruction=-1.0)
    with pytest.raises(ConfigurationError, match="finite"):
        LossWeights(functional=float("nan"))


# --------------------------------------------------------- reconstruction


def test_reconstruction_identical_zero():
    img = torch.rand(2, 3, 8, 8)
    assert loss_reconstruction(img, img.clone()).item() == 0.0


def test_reconstruction_constant_gap_two():
    a = torch.full((2, 3, 8, 8), -1.0)
    b = torch.full((2, 3, 8, 8), 1.0)
    assert loss_reconstruction(a, b).item() == pytest.approx(2.0, abs=1e-12)


def test_reconstruction_shape_mismatch_raises():
    with pytest.raises(ValueError, match="shape mismatch"):
        loss_reconstruction(torch.zeros(2, 3, 8, 8), torch.zeros(2, 3, 4, 4))


def test_reconstruction_loop_oracle():
    gen = torch.Generator().manual_seed(5)
    a = torch.rand((2, 3, 4, 4), generator=gen, dtype=torch.float64)
    b = torch.rand((2, 3, 4, 4), generator=gen, dtype=torch.float64)
    acc, n = 0.0, 0
    for bi in range(2):
        for c in range(3):
            for r in range(4):
                for col in range(4):
                    acc += abs(a[bi, c, r, col].item() - b[bi, c, r, col].item())
                    n += 1
    assert loss_reconstruction(a, b).item() == pytest.approx(acc / n, rel=1e-9)


# ------------------------------------------------------------- functional


def test_functional_identical_images_floor():
    _, _, _, e = make_models(seed=1, double=True)
    img = torch.rand(2, 3, 32, 32, dtype=torch.float64) * 2 - 1
    val = loss_functional(e, img, img.clone()).item()
    # feature part vanishes exactly; only the arccos clamp floor remains
    assert 0.0 <= val <= 2 * ANG_FLOOR + 1e-9


def test_functional_two_pass_oracle():
    _, _, _, e = make_models(seed=2, double=True)
    gen = torch.Generator().manual_seed(3)
    a = torch.rand((3, 3, 32, 32), generator=gen, dtype=torch.float64) * 2 - 1
    b = torch.rand((3, 3, 32, 32), generator=gen, dtype=torch.float64) * 2 - 1
    with torch.no_grad():
        ea, eb = e(a), e(b)
        expected = 0.0
        for fa, fb in zip(ea.features, eb.features):
            diff = (fa - fb).reshape(3, -1).numpy()
            expected += 0.7 * np.linalg.norm(diff, axis=1).mean() / diff.shape[1]
        expected += np_angular(ea.gaze.numpy(), eb.gaze.numpy()).mean()
        expected += np_angular(ea.head.numpy(), eb.head.numpy()).mean()
        val = loss_functional(e, a, b, feature_weight=0.7).item()
    assert val == pytest.approx(expected, rel=1e-7)
    assert len(ea.features) == 5


def test_functional_zero_feature_weight_keeps_angular_part():
    _, _, _, e = make_models(seed=2, double=True)
    gen = torch.Generator().manual_seed(4)
    a = torch.rand((2, 3, 32, 32), generator=gen, dtype=torch.float64) * 2 - 1
    b = torch.rand((2, 3, 32, 32), generator=gen, dtype=torch.float64) * 2 - 1
    with torch.no_grad():
        ea, eb = e(a), e(b)
        expected = np_angular(ea.gaze.numpy(), eb.gaze.numpy()).mean()
        expected += np_angular(ea.head.numpy(), eb.head.numpy()).mean()
        val = loss_functional(e, a, b, feature_weight=0.0).item()
    assert val == pytest.approx(float(expected), rel=1e-7)


# ----------------------------------------------------------------- mixing


def two_valued_states(n):
    """state_i filled with zeros, state_t with ones (conditions 0.3)."""

    def state(emb_val, cond_val):
        factors = [
            FactorState(torch.full((n, 2, 3), emb_val), torch.full((n, 2), cond_val)),
            FactorState(torch.full((n, 2, 2), emb_val), torch.full((n, 1), cond_val)),
            FactorState(torch.full((n, 2), emb_val), torch.zeros(n, 0)),
        ]
        return LatentState(z0=torch.full((n, 4), emb_val), factors=factors)

    return state(0.0, 0.0), state(1.0, 0.3)


def test_mix_frequency_and_z0_source():
    n = 10000
    s_i, s_t = two_valued_states(n)
    mixed, masks = mix_factors(s_i, s_t, torch.Generator().manual_seed(8))
    assert len(masks) == 3
    sigma = 0.5 / math.sqrt(n)
    for m in masks:
        assert abs(m.float().mean().item() - 0.5) < 3 * sigma
    assert torch.equal(mixed.z0, s_i.z0)


def test_mix_embedding_and_condition_travel_together():
    n = 256
    s_i, s_t = two_valued_states(n)
    mixed, masks = mix_factors(s_i, s_t, torch.Generator().manual_seed(9))
    for f, m in zip(mixed.factors, masks):
        emb_from_t = f.embedding.reshape(n, -1).mean(dim=1) == 1.0
        assert torch.equal(emb_from_t, m)
        if f.pseudo_condition.shape[1]:
            cond_from_t = f.pseudo_condition.mean(dim=1) == 0.3
            assert torch.equal(cond_from_t, m)


def test_mix_deterministic_under_seed():
    s_i, s_t = two_valued_states(512)
    _, m1 = mix_factors(s_i, s_t, torch.Generator().manual_seed(9))
    _, m2 = mix_factors(s_i, s_t, torch.Generator().manual_seed(9))
    _, m3 = mix_factors(s_i, s_t, torch.Generator().manual_seed(10))
    assert all(torch.equal(a, b) for a, b in zip(m1, m2))
    assert any(not torch.equal(a, b) for a, b in zip(m1, m3))


def test_mix_factor_count_mismatch_raises():
    s_i, s_t = two_valued_states(4)
    short = LatentState(z0=s_t.z0, factors=s_t.factors[:2])
    with pytest.raises(ValueError, match="factor counts"):
        mix_factors(s_i, short, torch.Generator().manual_seed(0))


# ------------------------------------------------------- disentanglement


def supervised_targets(cfg, state):
    return {
        spec.name: state.factors[i].pseudo_condition
        for i, spec in enumerate(cfg.factors)
        if spec.supervised
    }


def test_disentanglement_recomposition_oracle():
    cfg, g, _, _ = make_models(seed=4, double=True)
    gen = torch.Generator().manual_seed(11)
    a = torch.rand((2, 3, 32, 32), generator=gen, dtype=torch.float64) * 2 - 1
    b = torch.rand((2, 3, 32, 32), generator=gen, dtype=torch.float64) * 2 - 1
    with torch.no_grad():
        s_i, s_t = g.encode(a), g.encode(b)
        transformed = g.transform_state(s_i, supervised_targets(cfg, s_t), align_extraneous=s_t)
        mixed, _ = mix_factors(s_i, transformed, torch.Generator().manual_seed(21))
        val = loss_disentanglement(g, mixed).item()
        recoded = g.encode(g.decode(mixed))
        expected = 0.0
        for i, spec in enumerate(cfg.factors):
            if spec.supervised:
                expected += np_angular(
                    mixed.factors[i].pseudo_condition.numpy(),
                    recoded.factors[i].pseudo_condition.numpy(),
                ).mean()
        za = mixed.flatten().numpy()
        zb = recoded.flatten().numpy()
        cos = (za * zb).sum(1) / (np.linalg.norm(za, axis=1) * np.linalg.norm(zb, axis=1))
        expected += float(np.mean(1.0 - cos))
    assert val == pytest.approx(expected, rel=1e-7)


def test_disentanglement_gradients_reach_both_paths():
    cfg, g, _, _ = make_models(seed=5)
    gen = torch.Generator().manual_seed(12)
    a = torch.rand((2, 3, 32, 32), generator=gen) * 2 - 1
    b = torch.rand((2, 3, 32, 32), generator=gen) * 2 - 1
    s_i, s_t = g.encode(a), g.encode(b)
    transformed = g.transform_state(s_i, supervised_targets(cfg, s_t), align_extraneous=s_t)
    mixed, _ = mix_factors(s_i, transformed, torch.Generator().manual_seed(2))
    loss_disentanglement(g, mixed).backward()
    dec = sum(p.grad.abs().sum().item() for p in g.decoder.parameters())
    enc = sum(p.grad.abs().sum().item() for p in g.encoder.parameters() if p.grad is not None)
    assert dec > 0 and enc > 0


# ---------------------------------------------------------- pseudo labels


def test_pseudo_labels_oracle():
    cfg, g, _, _ = make_models(seed=6, double=True)
    gen = torch.Generator().manual_seed(13)
    img = torch.rand((3, 3, 32, 32), generator=gen, dtype=torch.float64) * 2 - 1
    gaze = (torch.rand((3, 2), generator=gen, dtype=torch.float64) - 0.5) * 0.8
    head = (torch.rand((3, 2), generator=gen, dtype=torch.float64) - 0.5) * 0.8
    with torch.no_grad():
        state = g.encode(img)
        val = loss_pseudo_labels(state, cfg, gaze, head).item()
        idx = {spec.name: i for i, spec in enumerate(cfg.factors)}
        expected = np_angular(
            state.factors[idx["gaze"]].pseudo_condition.numpy(), gaze.numpy()
        ).mean()
        expected += np_angular(
            state.factors[idx["head"]].pseudo_condition.numpy(), head.numpy()
        ).mean()
    assert val == pytest.approx(float(expected), rel=1e-7)


def test_pseudo_labels_perfect_prediction_floor():
    cfg, g, _, _ = make_models(seed=6, double=True)
    img = torch.rand((2, 3, 32, 32), dtype=torch.float64) * 2 - 1
    with torch.no_grad():
        state = g.encode(img)
        idx = {spec.name: i for i, spec in enumerate(cfg.factors)}
        gaze = state.factors[idx["gaze"]].pseudo_condition
        head = state.factors[idx["head"]].pseudo_condition
        val = loss_pseudo_labels(state, cfg, gaze, head).item()
    assert 0.0 <= val <= 2 * ANG_FLOOR + 1e-9


# -------------------------------------------------- embedding consistency


def ec_state(z0, embs, conds):
    return LatentState(
        z0=z0, factors=[FactorState(e, c) for e, c in zip(embs, conds)]
    )


def test_embedding_consistency_identical_zero():
    gen = torch.Generator().manual_seed(14)
    embs = [torch.randn((3, 4, 3), generator=gen), torch.randn((3, 2, 2), generator=gen)]
    conds = [torch.zeros(3, 2), torch.zeros(3, 1)]
    a = ec_state(torch.randn((3, 5), generator=gen), embs, conds)
    b = ec_state(torch.randn((3, 5), generator=gen) * 50, embs, conds)
    # wildly different invariant codes must not matter
    assert loss_embedding_consistency(a, b).item() == pytest.approx(0.0, abs=1e-6)


def test_embedding_consistency_negated_is_two():
    gen = torch.Generator().manual_seed(15)
    embs = [torch.randn((2, 4, 3), generator=gen), torch.randn((2, 2, 2), generator=gen)]
    conds = [torch.zeros(2, 2), torch.zeros(2, 1)]
    a = ec_state(torch.randn((2, 5), generator=gen), embs, conds)
    b = ec_state(a.z0, [-e for e in embs], conds)
    assert loss_embedding_consistency(a, b).item() == pytest.approx(2.0, abs=1e-6)


def test_embedding_consistency_numpy_oracle():
    gen = torch.Generator().manual_seed(16)

    def rand_state():
        embs = [
            torch.randn((4, 4, 3), generator=gen, dtype=torch.float64),
            torch.randn((4, 2, 2), generator=gen, dtype=torch.float64),
        ]
        conds = [torch.zeros(4, 2, dtype=torch.float64), torch.zeros(4, 1, dtype=torch.float64)]
        return ec_state(torch.randn((4, 5), generator=gen, dtype=torch.float64), embs, conds)

    a, b = rand_state(), rand_state()
    va = np.concatenate([f.embedding.reshape(4, -1).numpy() for f in a.factors], axis=1)
    vb = np.concatenate([f.embedding.reshape(4, -1).numpy() for f in b.factors], axis=1)
    cos = (va * vb).sum(1) / (np.linalg.norm(va, axis=1) * np.linalg.norm(vb, axis=1))
    expected = float(np.mean(1.0 - cos))
    assert loss_embedding_consistency(a, b).item() == pytest.approx(expected, rel=1e-9)


# -------------------------------------------------------------------- gan


def test_gan_zero_logits_pin_values():
    img = torch.zeros(2, 3, 32, 32)
    d = ConstD(0.0)
    assert loss_gan(d, img, img, role="discriminator").item() == pytest.approx(
        2 * math.log(2), rel=1e-6
    )
    assert loss_gan(d, img, role="generator").item() == pytest.approx(math.log(2), rel=1e-6)


def test_gan_saturated_logits_stay_finite():
    img = torch.zeros(2, 3, 32, 32)
    gen_loss = loss_gan(ConstD(-30.0), img, role="generator").item()
    assert math.isfinite(gen_loss) and gen_loss == pytest.approx(30.0, abs=1e-6)
    dis_loss = loss_gan(ConstD(30.0), img, img, role="discriminator").item()
    assert math.isfinite(dis_loss)


def test_gan_generator_gradient_formula():
    gen = torch.Generator().manual_seed(17)
    img = (torch.rand((2, 3, 32, 32), generator=gen) * 2 - 1).requires_grad_(True)
    loss_gan(SliceD(), img, role="generator").backward()
    logits = img.detach()[:, 0, ::8, ::8]
    expected = -torch.sigmoid(-logits) / logits.numel()
    got = img.grad[:, 0, ::8, ::8]
    assert torch.allclose(got, expected, rtol=1e-4, atol=1e-8)
    untouched = img.grad.clone()
    untouched[:, 0, ::8, ::8] = 0
    assert untouched.abs().sum().item() == 0.0


def test_gan_discriminator_role_detaches_generated():
    _, _, d, _ = make_models(seed=7)
    gen = torch.Generator().manual_seed(18)
    fake = (torch.rand((2, 3, 32, 32), generator=gen) * 2 - 1).requires_grad_(True)
    real = (torch.rand((2, 3, 32, 32), generator=gen) * 2 - 1).requires_grad_(True)
    loss_gan(d, fake, real, role="discriminator").backward()
    assert fake.grad is None
    assert real.grad is not None and real.grad.abs().sum() > 0


def test_gan_role_validation():
    img = torch.zeros(1, 3, 32, 32)
    with pytest.raises(ValueError, match="unknown role"):
        loss_gan(ConstD(0.0), img, role="critic")
    with pytest.raises(ValueError, match="real batch"):
        loss_gan(ConstD(0.0), img, role="discriminator")


def test_gan_with_patch_discriminator_finite():
    _, _, d, _ = make_models(seed=8)
    gen = torch.Generator().manual_seed(19)
    a = torch.rand((2, 3, 32, 32), generator=gen) * 2 - 1
    b = torch.rand((2, 3, 32, 32), generator=gen) * 2 - 1
    assert math.isfinite(loss_gan(d, a, role="generator").item())
    assert math.isfinite(loss_gan(d, a, b, role="discriminator").item())


# ------------------------------------------------------------- loss_full


def test_full_total_matches_weighted_sum():
    _, g, d, e = make_models(seed=9)
    batch = make_batch(seed=20)
    w = LossWeights()
    bd, generated = loss_full(g, d, e, batch, w, torch.Generator().manual_seed(30))
    recomposed = (
        w.reconstruction * bd.reconstruction
        + w.functional * bd.functional
        + w.pseudo_labels * bd.pseudo_labels
        + w.embedding_consistency * bd.embedding_consistency
        + w.disentanglement * bd.disentanglement
        + w.adversarial * bd.adversarial
    )
    assert bd.total.item() == pytest.approx(recomposed.item(), rel=1e-5)
    for name in LossBreakdown.TERMS:
        v = bd.term(name).item()
        assert math.isfinite(v) and v >= 0.0
    assert generated.shape == batch.image_t.shape
    assert generated.min().item() >= -1.0 and generated.max().item() <= 1.0


def test_full_linearity_and_term_stability():
    _, g, d, e = make_models(seed=10)
    batch = make_batch(seed=21)
    # feature scale is internal to the functional term and held fixed
    a = LossWeights(3.0, 0.0, 1.0, 0.0, 0.5, 1.5, 0.0)
    b = LossWeights(1.0, 2.0, 1.0, 4.0, 1.0, 0.5, 2.0)
    ab = LossWeights(4.0, 2.0, 1.0, 4.0, 1.5, 2.0, 2.0)
    bd_a, _ = loss_full(g, d, e, batch, a, torch.Generator().manual_seed(40))
    bd_b, _ = loss_full(g, d, e, batch, b, torch.Generator().manual_seed(40))
    bd_ab, _ = loss_full(g, d, e, batch, ab, torch.Generator().manual_seed(40))
    # terms are weight-independent wherever computed
    assert torch.equal(bd_a.reconstruction, bd_ab.reconstruction)
    assert torch.equal(bd_b.functional, bd_ab.functional)
    assert torch.equal(bd_b.pseudo_labels, bd_ab.pseudo_labels)
    assert torch.equal(bd_a.disentanglement, bd_ab.disentanglement)
    assert torch.equal(bd_a.embedding_consistency, bd_ab.embedding_consistency)
    assert bd_ab.total.item() == pytest.approx(
        bd_a.total.item() + bd_b.total.item(), rel=1e-6
    )


def test_full_single_active_term_is_exact():
    _, g, d, e = make_models(seed=11)
    batch = make_batch(seed=22)
    w = LossWeights(200.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0)
    # inactive terms are skipped entirely, so a missing estimator is fine
    bd, _ = loss_full(g, d, None, batch, w, torch.Generator().manual_seed(41))
    assert torch.equal(bd.total, 200.0 * bd.reconstruction)
    for name in ("functional", "pseudo_labels", "embedding_consistency", "disentanglement", "adversarial"):
        assert bd.term(name).item() == 0.0


def test_full_pseudo_label_masking():
    _, g, d, e = make_models(seed=12)
    none = make_batch(seed=23, labeled="none")
    bd, _ = loss_full(g, d, e, none, LossWeights(), torch.Generator().manual_seed(42))
    assert bd.pseudo_labels.item() == 0.0

    half = make_batch(seed=23, labeled="half")
    bd2, _ = loss_full(g, d, e, half, LossWeights(), torch.Generator().manual_seed(42))
    with torch.no_grad():
        state = g.encode(half.image_i)
        m = half.labeled_i
        sub = LatentState(
            z0=state.z0[m],
            factors=[FactorState(f.embedding[m], f.pseudo_condition[m]) for f in state.factors],
        )
        expected = loss_pseudo_labels(sub, g.cfg, half.gaze_i[m], half.head_i[m]).item()
    assert bd2.pseudo_labels.item() == pytest.approx(expected, rel=1e-6)


def test_full_label_conditions_route():
    _, g, d, e = make_models(seed=13)
    batch = make_batch(seed=24, labeled="all")
    rng = torch.Generator().manual_seed(43)
    bd_lab, gen_lab = loss_full(g, d, e, batch, LossWeights(), rng, condition_source="label")
    rng = torch.Generator().manual_seed(43)
    bd_pse, gen_pse = loss_full(g, d, e, batch, LossWeights(), rng, condition_source="pseudo")
    assert math.isfinite(bd_lab.total.item())
    assert not torch.equal(gen_lab, gen_pse)
    with pytest.raises(ConfigurationError, match="condition_source"):
        loss_full(g, d, e, batch, LossWeights(), rng, condition_source="truth")


def test_full_gradient_reaches_every_generator_parameter():
    _, g, d, e = make_models(seed=14)
    batch = make_batch(seed=25)
    bd, _ = loss_full(g, d, e, batch, LossWeights(), torch.Generator().manual_seed(44))
    bd.total.backward()
    for name, p in g.named_parameters():
        assert p.grad is not None, name
        assert p.grad.abs().sum().item() > 0, name


def test_training_batch_validation():
    b = make_batch(seed=26)
    with pytest.raises(ValueError, match="share a shape"):
        TrainingBatch(b.image_i, b.image_t[:, :, :16, :16], b.gaze_i, b.head_i, b.gaze_t, b.head_t, b.labeled_i)
    with pytest.raises(ValueError, match="gaze_i"):
        TrainingBatch(b.image_i, b.image_t, b.gaze_i[:, :1], b.head_i, b.gaze_t, b.head_t, b.labeled_i)
    with pytest.raises(ValueError, match="bool"):
        TrainingBatch(b.image_i, b.image_t, b.gaze_i, b.head_i, b.gaze_t, b.head_t, b.labeled_i.float())


# ------------------------------------------- finite-difference gradients


@pytest.fixture(scope="module")
def fd_setup():
    cfg, g, d, e = make_models(seed=3, double=True)
    g.eval()
    d.eval()
    e.eval()
    # Fresh heads predict near-zero angles, which parks the angular terms
    # next to the arccos singularity where finite differences degrade;
    # spreading the head biases keeps the compared directions apart.
    with torch.no_grad():
        torch.manual_seed(51)
        for h in g.condition_heads:
            if h is not None:
                h.bias.uniform_(-0.6, 0.6)
        e.head[-1].bias.uniform_(-0.5, 0.5)
    gen = torch.Generator().manual_seed(50)
    image = torch.rand((2, 3, 32, 32), generator=gen, dtype=torch.float64) * 2 - 1
    other = torch.rand((2, 3, 32, 32), generator=gen, dtype=torch.float64) * 2 - 1
    gaze = (torch.rand((2, 2), generator=gen, dtype=torch.float64) - 0.5) * 0.8
    head = (torch.rand((2, 2), generator=gen, dtype=torch.float64) - 0.5) * 0.8
    with torch.no_grad():
        state_b = g.encode(other)
        transformed = g.transform_state(
            g.encode(other), supervised_targets(cfg, state_b), align_extraneous=state_b
        )

    losses = {
        "reconstruction": lambda img: loss_reconstruction(img, other),
        "functional": lambda img: loss_functional(e, img, other, 0.7),
        "adversarial": lambda img: loss_gan(d, img, role="generator"),
        "embedding_consistency": lambda img: loss_embedding_consistency(
            g.encode(img), state_b
        ),
        "pseudo_labels": lambda img: loss_pseudo_labels(g.encode(img), cfg, gaze, head),
        "disentanglement": lambda img: loss_disentanglement(
            g, mix_factors(g.encode(img), transformed, torch.Generator().manual_seed(5))[0]
        ),
    }
    # 8x8 crop; channel varies with position so all three are exercised
    pixels = [(0, (r + c) % 3, r, c) for r in range(12, 20) for c in range(12, 20)]
    return {"losses": losses, "image": image, "pixels": pixels}


@pytest.mark.parametrize(
    "name",
    [
        "reconstruction",
        "functional",
        "adversarial",
        "embedding_consistency",
        "pseudo_labels",
        "disentanglement",
    ],
)
def test_pixel_gradients_match_finite_differences(fd_setup, name):
    loss_fn = fd_setup["losses"][name]
    image = fd_setup["image"]
    leaf = image.clone().requires_grad_(True)
    loss_fn(leaf).backward()
    grad = leaf.grad
    step = 1e-4
    base = image.clone()
    for b, c, r, col in fd_setup["pixels"]:
        plus, minus = base.clone(), base.clone()
        plus[b, c, r, col] += step
        minus[b, c, r, col] -= step
        with torch.no_grad():
            fd = (loss_fn(plus) - loss_fn(minus)).item() / (2 * step)
        assert grad[b, c, r, col].item() == pytest.approx(fd, rel=1e-3, abs=1e-6)
