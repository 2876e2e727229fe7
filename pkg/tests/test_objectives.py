import math

import mpmath
import pytest
import torch
from hypothesis import given, settings, strategies as st

from clippatch.core import PatchSpec, PlacementPolicy, apply_patch, preprocess
from clippatch.encoders import embed_images, embed_texts, make_toy_encoder, LabelVocabulary
from clippatch.errors import CapabilityError, ParameterError
from clippatch.objectives import AttackBudget, clip_loss, patch_loss, pgd_attack, siglip_loss

f64 = torch.float64


def unit_rows(n, d, seed=0):
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(n, d, generator=g, dtype=f64)
    return x / x.norm(dim=1, keepdim=True)


def test_clip_loss_single_pair_is_zero():
    x, y = unit_rows(1, 5), unit_rows(1, 5, seed=1)
    assert clip_loss(x, y, 37.0).item() == 0.0


def test_clip_loss_degenerate_pair_is_ln2():
    v = unit_rows(1, 4)
    x = v.expand(2, 4)
    assert abs(clip_loss(x, x, 100.0).item() - math.log(2)) < 1e-9


def _clip_oracle(x, y, t):
    # literal double sum at 50 digits
    mpmath.mp.dps = 50
    B = len(x)
    s = lambda i, j: t * mpmath.fsum(mpmath.mpf(a) * mpmath.mpf(b) for a, b in zip(x[i], y[j]))
    total = 0
    for i in range(B):
        total += s(i, i) - mpmath.log(mpmath.fsum(mpmath.e ** s(i, j) for j in range(B)))
        total += s(i, i) - mpmath.log(mpmath.fsum(mpmath.e ** s(j, i) for j in range(B)))
    return -total / (2 * B)


def test_clip_loss_orthonormal_pairs_vanish():
    x = torch.eye(2, dtype=f64)
    ref = _clip_oracle(x.tolist(), x.tolist(), 100)
    assert ref < 1e-40
    assert clip_loss(x, x, 100.0).item() < 1e-10


def test_clip_loss_matches_oracle_random():
    x, y = unit_rows(4, 3), unit_rows(4, 3, seed=9)
    assert abs(clip_loss(x, y, 2.5).item() - float(_clip_oracle(x.tolist(), y.tolist(), 2.5))) < 1e-12


def test_clip_loss_empty_batch():
    with pytest.raises(ParameterError):
        clip_loss(torch.zeros(0, 3), torch.zeros(0, 3), 1.0)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 6), st.integers(0, 10_000))
def test_clip_loss_permutation_invariant(B, seed):
    x, y = unit_rows(B, 4, seed), unit_rows(B, 4, seed + 1)
    perm = torch.randperm(B, generator=torch.Generator().manual_seed(seed))
    a, b = clip_loss(x, y, 10.0), clip_loss(x[perm], y[perm], 10.0)
    assert abs(a.item() - b.item()) <= 1e-12


def test_siglip_single_orthogonal_is_ln2():
    x = torch.tensor([[1.0, 0.0]], dtype=f64)
    y = torch.tensor([[0.0, 1.0]], dtype=f64)
    assert abs(siglip_loss(x, y, 7.0, 0.0).item() - math.log(2)) < 1e-9


def test_siglip_two_by_two_zero_similarity():
    x = torch.tensor([[1.0, 0, 0, 0], [0, 1.0, 0, 0]], dtype=f64)
    y = torch.tensor([[0, 0, 1.0, 0], [0, 0, 0, 1.0]], dtype=f64)
    assert abs(siglip_loss(x, y, 1.0, 0.0).item() - 2 * math.log(2)) < 1e-12


def test_siglip_saturation():
    x = torch.eye(2, dtype=f64)
    y = -torch.eye(2, dtype=f64)
    z = -torch.ones(2, 2, dtype=f64)
    # every cell has z*(t*sim - b) = 1000 * 1 or 1000 * ... >= large
    assert siglip_loss(x, x, 1000.0, -1000.0, z=-z).item() < 1e-100
    assert siglip_loss(x, y, 1000.0, 1000.0, z=z).item() < 1e-100


def test_siglip_shape_mismatch():
    with pytest.raises(ParameterError):
        siglip_loss(unit_rows(2, 3), unit_rows(3, 3), 1.0, 0.0)
    with pytest.raises(ParameterError):
        siglip_loss(unit_rows(2, 3), unit_rows(2, 3), 1.0, 0.0, z=torch.ones(3, 3))


def test_patch_loss_equal_logits_is_ln_n():
    x = torch.tensor([[1.0, 0.0, 0.0]], dtype=f64)
    labels = torch.tensor([[0, 1.0, 0], [0, 0, 1.0], [0, -1.0, 0], [0, 0, -1.0]], dtype=f64)
    assert abs(patch_loss(x, labels, 2, 100.0).item() - math.log(4)) < 1e-9


def test_patch_loss_hand_softmax():
    x = torch.tensor([[1.0, 0.0]], dtype=f64)
    labels = torch.tensor([[0.0, 1.0], [1.0, 0.0]], dtype=f64)
    got = patch_loss(x, labels, 1, math.log(3)).item()
    assert abs(got - (-math.log(3 / 4))) < 1e-12
    assert abs(got - 0.2877) < 1e-4


def test_patch_loss_dominant_target():
    x = torch.tensor([[1.0, 0.0]], dtype=f64)
    labels = torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=f64)
    assert patch_loss(x, labels, 0, 100.0).item() < 1e-40


def test_patch_loss_target_range():
    with pytest.raises(ParameterError):
        patch_loss(unit_rows(1, 2), unit_rows(3, 2), 3, 1.0)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 5), st.integers(2, 6), st.integers(0, 1000))
def test_patch_loss_nonnegative(B, N, seed):
    loss = patch_loss(unit_rows(B, 3, seed), unit_rows(N, 3, seed + 1), seed % N, 50.0)
    assert loss.item() >= 0


def test_patch_loss_gradient_through_pipeline():
    enc = make_toy_encoder(8, seed=0, side=12)
    vocab = LabelVocabulary(("cake", "dog", "car"))
    txt = embed_texts(enc, vocab)
    g = torch.Generator().manual_seed(0)
    imgs = [torch.rand(16, 16, 3, generator=g, dtype=f64) for _ in range(2)]
    spec = PatchSpec.square(4, dtype=f64)
    p0 = spec.params.clone()
    pols = [PlacementPolicy.fixed(1, 2), PlacementPolicy.fixed(9, 5)]

    def f(p):
        x = torch.stack([preprocess(apply_patch(im, spec, pol, params=p), enc.preprocess)
                         for im, pol in zip(imgs, pols)])
        return patch_loss(embed_images(enc, x), txt, 0, enc.temperature)

    p = p0.clone().requires_grad_(True)
    (grad,) = torch.autograd.grad(f(p), p)
    fd = torch.zeros_like(p0)
    for i in range(p0.numel()):
        up, dn = p0.clone().view(-1), p0.clone().view(-1)
        up[i] += 1e-6
        dn[i] -= 1e-6
        fd.view(-1)[i] = (f(up.view_as(p0)) - f(dn.view_as(p0))) / 2e-6
    assert (grad - fd).norm() / fd.norm() <= 1e-3


def test_pgd_zero_gradient_keeps_input():
    x = torch.rand(4, 4, 3, dtype=f64)
    out = pgd_attack(x, lambda v: (v * 0).sum(), AttackBudget(0.1, 0.05, 5))
    assert torch.equal(out, x)


def test_fgsm_sum_loss_moves_up_by_epsilon():
    x = torch.linspace(0, 1, 48, dtype=f64).reshape(4, 4, 3)
    out = pgd_attack(x, lambda v: v.sum(), AttackBudget(0.1, 0.1, 1))
    assert torch.allclose(out, (x + 0.1).clamp(max=1.0), rtol=0, atol=1e-15)


def test_pgd_quadratic_moves_toward_centre():
    g = torch.Generator().manual_seed(0)
    x0 = torch.rand(3, 3, 3, generator=g, dtype=f64) * 0.8 + 0.1
    c = (x0 + 0.05 * (torch.rand(3, 3, 3, generator=g, dtype=f64) * 2 - 1)).clamp(0, 1)
    out = pgd_attack(x0, lambda v: -((v - c) ** 2).sum(), AttackBudget(0.06, 0.005, 40))
    assert (out - c).norm() < (x0 - c).norm()
    assert (out - c).abs().max() <= 0.005 + 1e-12


def test_pgd_targeted_descends():
    x0 = torch.full((2, 2, 3), 0.5, dtype=f64)
    out = pgd_attack(x0, lambda v: v.sum(), AttackBudget(0.2, 0.1, 3), targeted=True)
    assert torch.allclose(out, x0 - 0.2)


def test_pgd_needs_differentiable_loss():
    with pytest.raises(CapabilityError):
        pgd_attack(torch.rand(2, 2, 3), lambda v: torch.tensor(1.0), AttackBudget(0.1, 0.1, 1))


def test_attack_budget_validation():
    for args in [(0, 0.1, 1), (0.1, 0, 1), (0.1, 0.1, 0)]:
        with pytest.raises(ParameterError):
            AttackBudget(*args)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.floats(1e-3, 0.5), st.floats(1e-3, 0.5), st.integers(1, 6),
       st.booleans())
def test_pgd_iterates_stay_feasible(seed, eps, alpha, steps, targeted):
    g = torch.Generator().manual_seed(seed)
    x0 = torch.rand(3, 3, 3, generator=g, dtype=f64)
    w = torch.randn(3, 3, 3, generator=g, dtype=f64)
    bad = []

    def check(k, x):
        if (x - x0).abs().max() > eps + 1e-9 or x.min() < 0 or x.max() > 1:
            bad.append(k)

    pgd_attack(x0, lambda v: (w * v).sum() + (v ** 2).sum(), AttackBudget(eps, alpha, steps),
               targeted=targeted, callback=check)
    assert not bad
