"""Domain types, patch application operators and model-input preprocessing.

Images are ``H x W x 3`` float tensors with values in ``[0, 1]``. Patch
regions are addressed by their top-left pixel (inclusive), rows first.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from . import _font
from .errors import DimensionError, ParameterError, PlacementError

PATCH_KINDS = ("square", "frame", "text")
PLACEMENT_MODES = ("random_uniform", "fixed", "frame_overlay", "text_overlay")
INTERPOLATIONS = ("bicubic", "bilinear", "nearest")

# channel statistics published with the OpenAI/OpenCLIP ViT checkpoints
CLIP_MEAN = (0.48145466, 0.4578275, 0.40821073)
CLIP_STD = (0.26862954, 0.26130258, 0.27577711)


def as_image(data, dtype=None) -> torch.Tensor:
    """Convert ``data`` to a validated ``H x W x 3`` image tensor.

    Integer arrays are treated as 8-bit and divided by 255. Floating input
    must already lie in ``[0, 1]``.
    """
    if isinstance(data, torch.Tensor):
        t = data
    else:
        arr = np.asarray(data)
        if np.issubdtype(arr.dtype, np.integer):
            arr = arr.astype(np.float32) / 255.0
        t = torch.from_numpy(np.ascontiguousarray(arr))
    if not torch.is_floating_point(t):
        t = t.to(torch.float32) / 255.0
    if dtype is not None:
        t = t.to(dtype)
    check_image(t)
    return t


def check_image(image: torch.Tensor) -> None:
    if image.ndim != 3 or image.shape[2] != 3:
        raise DimensionError(f"expected H x W x 3 image, got shape {tuple(image.shape)}")
    if image.shape[0] < 1 or image.shape[1] < 1:
        raise DimensionError("image must be at least 1x1")
    with torch.no_grad():
        if image.numel() and (image.min() < 0 or image.max() > 1 or not torch.isfinite(image).all()):
            raise ParameterError("image values must lie in [0, 1]")


@dataclass
class LabeledImage:
    image: torch.Tensor
    label: int
    image_id: str = ""


@dataclass
class PatchSpec:
    """A patch and how it is drawn onto images.

    ``params`` holds ``H_p x W_p x 3`` pixel values for ``square`` and
    ``frame`` kinds; ``text`` patches are rendered from ``text`` and cover
    ``area_fraction`` of the image.
    """

    kind: str
    params: Optional[torch.Tensor] = None
    frame_width: Optional[int] = None
    text: Optional[str] = None
    area_fraction: Optional[float] = None
    target_label_id: int = 0
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in PATCH_KINDS:
            raise ParameterError(f"unknown patch kind {self.kind!r}")
        if self.kind in ("square", "frame"):
            if self.params is None:
                raise ParameterError(f"{self.kind} patch needs params")
            p = self.params
            if p.ndim != 3 or p.shape[2] != 3 or p.shape[0] < 1 or p.shape[1] < 1:
                raise DimensionError(f"patch params must be H_p x W_p x 3, got {tuple(p.shape)}")
            with torch.no_grad():
                if p.min() < 0 or p.max() > 1:
                    raise ParameterError("patch params must lie in [0, 1]")
        if self.kind == "frame" and (self.frame_width is None or self.frame_width < 1):
            raise ParameterError("frame width must be a positive integer")
        if self.kind == "text":
            if not self.text:
                raise ParameterError("text patch needs non-empty text")
            if self.area_fraction is None or not 0 < self.area_fraction < 1:
                raise ParameterError("text area fraction must lie in (0, 1)")

    @property
    def shape(self):
        return tuple(self.params.shape[:2]) if self.params is not None else None

    @classmethod
    def square(cls, size, *, target_label_id=0, init="random", seed=0, dtype=torch.float32,
               metadata=None):
        """Create a square (or rectangular, if ``size`` is a pair) patch."""
        h, w = (size, size) if isinstance(size, int) else size
        return cls("square", _init_params(h, w, init, seed, dtype),
                   target_label_id=target_label_id, metadata=dict(metadata or {}))

    @classmethod
    def frame(cls, width, image_size, *, target_label_id=0, init="random", seed=0,
              dtype=torch.float32, metadata=None):
        h, w = (image_size, image_size) if isinstance(image_size, int) else image_size
        return cls("frame", _init_params(h, w, init, seed, dtype), frame_width=width,
                   target_label_id=target_label_id, metadata=dict(metadata or {}))

    @classmethod
    def text_overlay(cls, text, area_fraction, *, target_label_id=0, metadata=None):
        return cls("text", text=text, area_fraction=area_fraction,
                   target_label_id=target_label_id, metadata=dict(metadata or {}))


def _init_params(h, w, init, seed, dtype):
    if init == "random":
        g = torch.Generator().manual_seed(seed)
        return torch.rand(h, w, 3, generator=g, dtype=torch.float64).to(dtype)
    if init == "gray":
        return torch.full((h, w, 3), 0.5, dtype=dtype)
    raise ParameterError(f"unknown patch init {init!r}")


@dataclass(frozen=True)
class PlacementPolicy:
    """Where a square patch goes. ``x`` is the column and ``y`` the row of the top-left pixel."""

    mode: str = "random_uniform"
    x: int = 0
    y: int = 0
    rng_seed: int = 0

    def __post_init__(self):
        if self.mode not in PLACEMENT_MODES:
            raise ParameterError(f"unknown placement mode {self.mode!r}")

    @classmethod
    def fixed(cls, x, y):
        return cls("fixed", x=x, y=y)

    def resolve(self, image_hw, patch_hw, rng=None):
        """Return ``(row, col)`` of the patch's top-left corner.

        Random placement samples uniformly over all positions that keep the
        patch fully inside the image; ``rng`` overrides the policy's own seed.
        """
        H, W = image_hw
        h, w = patch_hw
        if h > H or w > W:
            raise DimensionError(f"patch {h}x{w} larger than image {H}x{W}")
        if self.mode == "fixed":
            if self.x < 0 or self.y < 0 or self.y + h > H or self.x + w > W:
                raise PlacementError(
                    f"patch {h}x{w} at (x={self.x}, y={self.y}) leaves image {H}x{W}")
            return self.y, self.x
        if self.mode != "random_uniform":
            raise PlacementError(f"placement mode {self.mode!r} does not apply to square patches")
        if rng is None:
            rng = np.random.default_rng(self.rng_seed)
        row = int(rng.integers(0, H - h + 1))
        col = int(rng.integers(0, W - w + 1))
        return row, col


def apply_patch(image, patch, placement=PlacementPolicy(), *, rng=None, params=None):
    """Paste a square patch into a copy of ``image``.

    ``params`` substitutes the patch pixels (e.g. an augmented, grad-carrying
    tensor during training) while ``patch`` still supplies kind and shape.
    Returns the new image; the input is not modified.
    """
    if patch.kind != "square":
        raise ParameterError(f"apply_patch expects a square patch, got {patch.kind!r}")
    pix = patch.params if params is None else params
    check_image(image)
    h, w = pix.shape[:2]
    row, col = placement.resolve(image.shape[:2], (h, w), rng=rng)
    return paste(image, pix, row, col)


def paste(image, pixels, row, col):
    """Replace the rectangle at ``(row, col)`` with ``pixels``; differentiable in both."""
    h, w = pixels.shape[:2]
    H, W = image.shape[:2]
    if row < 0 or col < 0 or row + h > H or col + w > W:
        raise PlacementError(f"{h}x{w} region at ({row}, {col}) leaves image {H}x{W}")
    out = image.clone()
    out[row:row + h, col:col + w, :] = pixels.to(image.dtype)
    return out


def frame_mask(height, width, frame_width):
    """Boolean ``H x W`` mask of the border ring ``frame_width`` pixels wide."""
    rows = torch.arange(height)
    cols = torch.arange(width)
    r = (rows < frame_width) | (rows >= height - frame_width)
    c = (cols < frame_width) | (cols >= width - frame_width)
    return r[:, None] | c[None, :]


def render_frame_patch(image, patch, *, params=None):
    """Replace a border ring of width ``patch.frame_width`` with the frame's values.

    Frame params are stored at image size; a patch trained at another size is
    resized bilinearly to the image first.
    """
    if patch.kind != "frame":
        raise ParameterError(f"render_frame_patch expects a frame patch, got {patch.kind!r}")
    if patch.frame_width is None or patch.frame_width < 1:
        raise ParameterError("frame width must be a positive integer")
    pix = patch.params if params is None else params
    H, W = image.shape[:2]
    pix = pix.to(image.dtype)
    if tuple(pix.shape[:2]) != (H, W):
        pix = F.interpolate(pix.permute(2, 0, 1)[None], size=(H, W), mode="bilinear",
                            align_corners=False)[0].permute(1, 2, 0)
    mask = frame_mask(H, W, patch.frame_width)[:, :, None]
    return torch.where(mask, pix, image)


def text_region(height, width, area_fraction):
    """Rectangle ``(row, col, h, w)`` covering ``area_fraction`` of the image.

    The rectangle sits at the bottom edge, horizontally centred, with the
    widest shape whose area is closest to the requested one.
    """
    if not 0 < area_fraction < 1:
        raise ParameterError("area fraction must lie in (0, 1)")
    target = area_fraction * height * width
    best = None
    for h in range(_font.CELL_H, height + 1):
        w = min(width, max(1, round(target / h)))
        if w < _font.CELL_W:
            continue
        key = (abs(h * w - target), -w)
        if best is None or key < best[0]:
            best = (key, h, w)
    if best is None:
        raise ParameterError(
            f"text region of area {target:.1f}px cannot hold one {_font.CELL_W}x{_font.CELL_H} glyph cell")
    _, h, w = best
    return height - h, (width - w) // 2, h, w


def _layout(text, h, w):
    n = len(text)
    scale = min(h // _font.CELL_H, w // _font.CELL_W)
    while scale > 1:
        cols, rows = w // (_font.CELL_W * scale), h // (_font.CELL_H * scale)
        if cols * rows >= n:
            break
        scale -= 1
    cols, rows = w // (_font.CELL_W * scale), h // (_font.CELL_H * scale)
    text = text[:cols * rows]
    lines = [text[i:i + cols] for i in range(0, len(text), cols)]
    return lines, scale


def text_block(text, h, w):
    """Render ``text`` into an ``h x w`` grayscale block: white ground, black glyphs."""
    lines, scale = _layout(text, h, w)
    ink = _font.render_block(lines, scale)
    block = np.ones((h, w), dtype=np.float64)
    top = (h - ink.shape[0]) // 2
    left = (w - ink.shape[1]) // 2
    block[top:top + ink.shape[0], left:left + ink.shape[1]][ink] = 0.0
    return block


def render_text_patch(image, patch):
    """Overlay rendered text on a rectangle covering ``area_fraction`` of the image."""
    if patch.kind != "text":
        raise ParameterError(f"render_text_patch expects a text patch, got {patch.kind!r}")
    if not patch.text:
        raise ParameterError("text patch needs non-empty text")
    H, W = image.shape[:2]
    row, col, h, w = text_region(H, W, patch.area_fraction)
    block = torch.from_numpy(text_block(patch.text, h, w)).to(image.dtype)
    return paste(image, block[:, :, None].expand(h, w, 3), row, col)


def attack_image(image, patch, placement=PlacementPolicy(), *, rng=None, params=None):
    """Dispatch to the operator matching ``patch.kind``; ``None`` patch returns the image."""
    if patch is None:
        return image
    if patch.kind == "square":
        return apply_patch(image, patch, placement, rng=rng, params=params)
    if patch.kind == "frame":
        return render_frame_patch(image, patch, params=params)
    return render_text_patch(image, patch)


@dataclass(frozen=True)
class PreprocessConfig:
    target_side: int = 224
    interpolation: str = "bicubic"
    channel_means: Sequence[float] = CLIP_MEAN
    channel_stds: Sequence[float] = CLIP_STD

    def __post_init__(self):
        if self.target_side < 1:
            raise ParameterError("target_side must be >= 1")
        if self.interpolation not in INTERPOLATIONS:
            raise ParameterError(f"unknown interpolation {self.interpolation!r}")
        if len(self.channel_means) != 3 or len(self.channel_stds) != 3:
            raise ParameterError("need three channel means and stds")
        if any(s <= 0 for s in self.channel_stds):
            raise ParameterError("channel stds must be positive")
        object.__setattr__(self, "channel_means", tuple(float(m) for m in self.channel_means))
        object.__setattr__(self, "channel_stds", tuple(float(s) for s in self.channel_stds))

    def to_dict(self):
        return {"target_side": self.target_side, "interpolation": self.interpolation,
                "channel_means": list(self.channel_means), "channel_stds": list(self.channel_stds)}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def preprocess(image, cfg=PreprocessConfig()):
    """Resize the shorter side to ``S``, centre-crop ``S x S`` and normalize.

    Returns a ``3 x S x S`` tensor, differentiable with respect to ``image``.
    """
    S = cfg.target_side
    x = image.permute(2, 0, 1)[None]
    H, W = image.shape[:2]
    if min(H, W) != S:
        if H <= W:
            size = (S, int(S * W / H))
        else:
            size = (int(S * H / W), S)
        if cfg.interpolation == "nearest":
            x = F.interpolate(x, size=size, mode="nearest")
        else:
            x = F.interpolate(x, size=size, mode=cfg.interpolation, align_corners=False,
                              antialias=True)
    h, w = x.shape[-2:]
    top = int(round((h - S) / 2.0))
    left = int(round((w - S) / 2.0))
    x = x[0, :, top:top + S, left:left + S]
    mean = torch.tensor(cfg.channel_means, dtype=x.dtype)[:, None, None]
    std = torch.tensor(cfg.channel_stds, dtype=x.dtype)[:, None, None]
    return (x - mean) / std


def preprocess_batch(images, cfg=PreprocessConfig()):
    return torch.stack([preprocess(im, cfg) for im in images])


def region_bounds(row, col, h, w):
    """Slices addressing a rectangle; convenience for callers and tests."""
    return slice(row, row + h), slice(col, col + w)


def changed_pixels(a, b):
    """Number of pixel positions (any channel) where two images differ."""
    return int((a != b).any(dim=-1).sum())


def ceil_count(fraction, n):
    """``ceil(fraction * n)`` robust to float noise such as ``0.3 * 10``."""
    return int(math.ceil(round(fraction * n, 9)))
