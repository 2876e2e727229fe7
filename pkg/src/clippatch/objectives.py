"""Contrastive losses, the targeted patch loss and sign-gradient baselines."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import CapabilityError, ParameterError


@dataclass(frozen=True)
class AttackBudget:
    epsilon: float
    alpha: float
    steps: int = 1

    def __post_init__(self):
        if self.epsilon <= 0 or self.alpha <= 0:
            raise ParameterError("epsilon and alpha must be positive")
        if self.steps < 1:
            raise ParameterError("steps must be >= 1")


def similarity_matrix(x, y, t, b=0.0):
    """``S[i, j] = t * x_i . y_j - b``."""
    return t * x @ y.T - b


def clip_loss(x, y, t):
    """Symmetric InfoNCE over matched image/text rows."""
    if x.shape[0] == 0:
        raise ParameterError("empty batch")
    if x.shape != y.shape:
        raise ParameterError(f"batch shapes differ: {tuple(x.shape)} vs {tuple(y.shape)}")
    logits = similarity_matrix(x, y, t)
    diag = torch.arange(x.shape[0])
    img_to_txt = torch.log_softmax(logits, dim=1)[diag, diag]
    txt_to_img = torch.log_softmax(logits, dim=0)[diag, diag]
    return -(img_to_txt + txt_to_img).sum() / (2 * x.shape[0])


def siglip_loss(x, y, t, b, z=None):
    """Pairwise sigmoid loss ``-(1/B) sum_ij log sigmoid(z_ij (t x_i.y_j - b))``.

    ``z`` defaults to +1 on the diagonal and -1 elsewhere.
    """
    if x.ndim != 2 or x.shape != y.shape or x.shape[0] == 0:
        raise ParameterError(f"need matching non-empty B x d inputs, got {tuple(x.shape)}, {tuple(y.shape)}")
    B = x.shape[0]
    if z is None:
        z = 2 * torch.eye(B, dtype=x.dtype) - 1
    z = torch.as_tensor(z, dtype=x.dtype)
    if z.shape != (B, B):
        raise ParameterError(f"labels must be {B}x{B}, got {tuple(z.shape)}")
    return -F.logsigmoid(z * similarity_matrix(x, y, t, b)).sum() / B


def patch_loss(img_emb, label_emb, target, t):
    """Mean cross-entropy of the target label over the full vocabulary."""
    n = label_emb.shape[0]
    if not 0 <= target < n:
        raise ParameterError(f"target {target} outside vocabulary of {n}")
    logits = t * img_emb @ label_emb.T
    return -torch.log_softmax(logits, dim=1)[:, target].mean()


def pgd_attack(image, loss_fn, budget, targeted=False, callback=None):
    """L-infinity PGD; ``steps=1`` with ``alpha=epsilon`` is FGSM.

    Untargeted attacks ascend ``loss_fn``; targeted ones descend it. Each
    iterate is projected onto the epsilon-ball around ``image`` and then onto
    ``[0, 1]``. ``callback(k, x_k)`` sees every iterate. Works on tensors of
    any shape, so independent instances can be stacked into one call.
    """
    x0 = image.detach()
    x = x0.clone()
    direction = -1.0 if targeted else 1.0
    for k in range(budget.steps):
        x.requires_grad_(True)
        loss = loss_fn(x)
        if not loss.requires_grad:
            raise CapabilityError("loss does not depend differentiably on the input")
        (grad,) = torch.autograd.grad(loss, x)
        with torch.no_grad():
            x = x + direction * budget.alpha * torch.sign(grad)
            x = torch.min(torch.max(x, x0 - budget.epsilon), x0 + budget.epsilon)
            x = x.clamp(0.0, 1.0)
        if callback is not None:
            callback(k + 1, x)
    return x.detach()
