"""Synthetic image and video corpora matched to the ``toy-palette`` backend."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image

from .encoders import label_palette

DEFAULT_LABELS = ("cake", "homer-simpson", "unicorn", "airplane", "bonsai",
                  "cactus", "dolphin", "guitar", "lighthouse", "zebra")


def palette_image(label, size, rng, *, block=8, noise=0.03, n_colors=3):
    """``size x size x 3`` uint8 image tiled with blocks drawn from the label's palette."""
    pal = label_palette(label, n_colors)
    cells = -(-size // block)
    choice = rng.integers(0, n_colors, size=(cells, cells))
    img = np.kron(pal[choice], np.ones((block, block, 1)))[:size, :size]
    img = img + rng.normal(0.0, noise, img.shape)
    return (img.clip(0, 1) * 255).round().astype(np.uint8)


def make_image_dataset(root, labels=DEFAULT_LABELS, per_class=20, size=80, seed=0):
    """Write ``root/<label>/<k>.png`` for every label."""
    root = Path(root)
    rng = np.random.default_rng(seed)
    for label in labels:
        d = root / label
        d.mkdir(parents=True, exist_ok=True)
        for k in range(per_class):
            Image.fromarray(palette_image(label, size, rng)).save(d / f"{k:04d}.png")
    return root


def make_video_dataset(root, labels=DEFAULT_LABELS, n_videos=10, n_frames=30, size=80, seed=0):
    """Write ``root/videos/<id>/<frame>.png`` plus ``root/captions.json``."""
    root = Path(root)
    rng = np.random.default_rng(seed)
    captions = {}
    for v in range(n_videos):
        label = labels[v % len(labels)]
        vid = f"video_{v:03d}"
        d = root / "videos" / vid
        d.mkdir(parents=True, exist_ok=True)
        for f in range(n_frames):
            Image.fromarray(palette_image(label, size, rng)).save(d / f"{f:04d}.png")
        captions[vid] = label
    with open(root / "captions.json", "w") as fh:
        json.dump(captions, fh, indent=2, sort_keys=True)
    return root / "videos", root / "captions.json"
