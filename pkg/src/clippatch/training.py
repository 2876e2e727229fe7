"""Universal patch optimisation with optional crop-resize augmentation."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch
import torch.nn.functional as F

from .core import PatchSpec, PlacementPolicy, attack_image, preprocess
from .encoders import embed_images, embed_texts
from .errors import CapabilityError, ParameterError
from .evaluation import evaluate_patch
from .objectives import patch_loss

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 5
    learning_rate: float = 0.1
    batch_size: int = 64
    beta: float = 1.0
    crop_enabled: bool = False
    seed: int = 0
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    per_image_placement: bool = True
    val_repeats: int = 1
    checkpoint_dir: Optional[str] = None

    def __post_init__(self):
        if self.epochs < 1:
            raise ParameterError("epochs must be >= 1")
        if self.learning_rate < 0:
            raise ParameterError("learning_rate must be non-negative")
        if self.batch_size < 1:
            raise ParameterError("batch_size must be >= 1")
        if self.beta < 0:
            raise ParameterError("beta must be non-negative")
        self.adam_betas = tuple(self.adam_betas)

    def to_dict(self):
        d = asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        d.pop("checkpoint_dir")
        return d

    def config_hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class TrainHistory:
    step_losses: list = field(default_factory=list)
    step_epochs: list = field(default_factory=list)
    epoch_metrics: list = field(default_factory=list)
    epoch_seconds: list = field(default_factory=list)

    def epoch_mean_losses(self):
        out = {}
        for e, loss in zip(self.step_epochs, self.step_losses):
            out.setdefault(e, []).append(loss)
        return [float(np.mean(out[e])) for e in sorted(out)]


def random_crop_box(height, width, rng):
    """Crop rectangle ``(row, col, h, w)`` with each side in ``[ceil(side/2), side]``."""
    h = int(rng.integers(math.ceil(height / 2), height + 1))
    w = int(rng.integers(math.ceil(width / 2), width + 1))
    row = int(rng.integers(0, height - h + 1))
    col = int(rng.integers(0, width - w + 1))
    return row, col, h, w


def crop_resize_augment(p, beta, rng):
    """``clamp(p + beta * resize(random_crop(p)), 0, 1)``; gradients flow through both terms."""
    H, W = p.shape[:2]
    if H < 2 or W < 2:
        raise ParameterError("crop-resize augmentation needs a patch of at least 2x2")
    row, col, h, w = random_crop_box(H, W, rng)
    crop = p[row:row + h, col:col + w, :].permute(2, 0, 1)[None]
    resized = F.interpolate(crop, size=(H, W), mode="bilinear", align_corners=False)
    return (p + beta * resized[0].permute(1, 2, 0)).clamp(0.0, 1.0)


def train_patch(train_set, enc, vocab, target, patch_init, cfg=TrainConfig(), *, val_set=None,
                placement: Optional[PlacementPolicy] = None,
                on_epoch_end: Optional[Callable] = None):
    """Optimise ``patch_init`` so that patched images are classified as ``target``.

    Every step forms the (optionally augmented) patch, pastes it onto each
    image of the batch at a fresh random location, and minimises the patch
    loss with Adam, clamping the parameters to ``[0, 1]`` afterwards.
    Shuffling, placement and crop draws come from separate streams of
    ``cfg.seed``, so disabling augmentation does not perturb placements.
    Returns the trained :class:`PatchSpec` and a :class:`TrainHistory`.
    """
    if not enc.supports_grad:
        raise CapabilityError(f"backend {enc.model_id!r} does not provide gradients")
    if not train_set:
        raise ParameterError("empty training set")
    if patch_init.kind == "text":
        raise ParameterError("text patches have no trainable parameters")
    if not 0 <= target < len(vocab):
        raise ParameterError(f"target {target} outside vocabulary of {len(vocab)}")
    placement = placement or PlacementPolicy()

    params = patch_init.params.detach().clone().requires_grad_(True)
    opt = torch.optim.Adam([params], lr=cfg.learning_rate, betas=cfg.adam_betas, eps=cfg.adam_eps)
    order_ss, place_ss, crop_ss = np.random.SeedSequence(cfg.seed).spawn(3)
    rng_order, rng_place, rng_crop = (np.random.default_rng(s) for s in (order_ss, place_ss, crop_ss))
    txt_emb = embed_texts(enc, vocab).to(params.dtype)

    def snapshot():
        meta = dict(patch_init.metadata)
        meta.update(model_id=enc.model_id, seed=cfg.seed, train_config=cfg.to_dict(),
                    train_config_hash=cfg.config_hash(), preprocess=enc.preprocess.to_dict(),
                    augmentation="differentiable" if cfg.crop_enabled else "none")
        return PatchSpec(patch_init.kind, params.detach().clone(), frame_width=patch_init.frame_width,
                         target_label_id=target, metadata=meta)

    history = TrainHistory()
    n = len(train_set)
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        perm = rng_order.permutation(n)
        for start in range(0, n, cfg.batch_size):
            batch = [train_set[i] for i in perm[start:start + cfg.batch_size]]
            with enc.grad_lock:
                eff = crop_resize_augment(params, cfg.beta, rng_crop) if cfg.crop_enabled else params
                if cfg.per_image_placement or patch_init.kind != "square":
                    pol = placement
                else:
                    row, col = placement.resolve(batch[0].image.shape[:2], eff.shape[:2], rng_place)
                    pol = PlacementPolicy.fixed(col, row)
                attacked = [attack_image(s.image.to(params.dtype), patch_init, pol, rng=rng_place,
                                         params=eff) for s in batch]
                x = torch.stack([preprocess(im, enc.preprocess) for im in attacked])
                loss = patch_loss(embed_images(enc, x), txt_emb, target, enc.temperature)
                opt.zero_grad()
                loss.backward()
                opt.step()
                with torch.no_grad():
                    params.clamp_(0.0, 1.0)
            history.step_losses.append(float(loss.detach()))
            history.step_epochs.append(epoch)
        current = snapshot()
        if val_set:
            res = evaluate_patch(val_set, enc, vocab, current, target, repeats=cfg.val_repeats,
                                 k_list=(1, 5), seed=cfg.seed, placement=placement,
                                 include_clean=False)
            history.epoch_metrics.append(res.metrics)
        history.epoch_seconds.append(time.perf_counter() - t0)
        log.info("epoch %d: mean loss %.4f", epoch, np.mean(
            [l for l, e in zip(history.step_losses, history.step_epochs) if e == epoch]))
        if cfg.checkpoint_dir:
            from .io import save_patch
            Path(cfg.checkpoint_dir).mkdir(parents=True, exist_ok=True)
            save_patch(current, Path(cfg.checkpoint_dir) / f"epoch_{epoch + 1:03d}.pa")
        if on_epoch_end is not None:
            on_epoch_end(epoch, current, history)
    return snapshot(), history
