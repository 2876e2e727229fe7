"""Paired image/text encoders behind one interface.

Backends are looked up by model id. Two deterministic toy backends ship with
the package; pretrained OpenCLIP models attach through an optional adapter.
"""

from __future__ import annotations

import hashlib
import json
import os
import threading
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .core import PreprocessConfig
from .errors import BackendError, CapabilityError, ParameterError

CACHE_ENV = "CLIPPATCH_CACHE_DIR"
REGISTRY_ENV = "CLIPPATCH_REGISTRY"


@dataclass
class EncoderPair:
    """Image and text towers mapping into a shared ``embed_dim`` space.

    ``image_fn`` takes a ``B x 3 x S x S`` preprocessed batch, ``text_fn`` a
    list of strings; both return unnormalized ``* x d`` tensors.
    """

    embed_dim: int
    image_fn: Callable[[torch.Tensor], torch.Tensor]
    text_fn: Callable[[Sequence[str]], torch.Tensor]
    temperature: float = 100.0
    bias: float = 0.0
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    model_id: str = "custom"
    supports_grad: bool = True
    metadata: dict = field(default_factory=dict)
    grad_lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    def __post_init__(self):
        if self.temperature <= 0:
            raise ParameterError("temperature must be positive")
        if self.embed_dim < 1:
            raise ParameterError("embed_dim must be positive")


@dataclass(frozen=True)
class LabelVocabulary:
    labels: tuple
    prompt_template: str = "{}"

    def __post_init__(self):
        labels = tuple(self.labels)
        object.__setattr__(self, "labels", labels)
        if len(labels) < 2:
            raise ParameterError("vocabulary needs at least two labels")
        if any(not isinstance(lab, str) or not lab for lab in labels):
            raise ParameterError("labels must be non-empty strings")
        if len(set(labels)) != len(labels):
            raise ParameterError("duplicate labels in vocabulary")
        if self.prompt_template.count("{}") != 1:
            raise ParameterError("prompt template needs exactly one '{}' slot")

    def __len__(self):
        return len(self.labels)

    def prompts(self):
        return [self.prompt_template.format(lab) for lab in self.labels]

    def index(self, label):
        try:
            return self.labels.index(label)
        except ValueError:
            raise ParameterError(f"label {label!r} not in vocabulary") from None


def _finish(out, n, d, normalize):
    if out.ndim != 2 or out.shape != (n, d):
        raise BackendError(f"encoder returned shape {tuple(out.shape)}, expected {(n, d)}")
    if not torch.isfinite(out).all():
        raise BackendError("encoder produced non-finite output")
    if normalize:
        norm = out.norm(dim=-1, keepdim=True)
        if (norm == 0).any():
            raise BackendError("encoder produced a zero embedding")
        out = out / norm
    return out


def embed_images(enc, batch, normalize=True):
    """Embed a batch of preprocessed images; differentiable w.r.t. ``batch``."""
    if isinstance(batch, (list, tuple)):
        if not batch:
            raise ParameterError("empty image batch")
        batch = torch.stack(list(batch))
    if batch.shape[0] == 0:
        raise ParameterError("empty image batch")
    return _finish(enc.image_fn(batch), batch.shape[0], enc.embed_dim, normalize)


def encode_text(enc, strings, normalize=True):
    strings = list(strings)
    if not strings:
        raise ParameterError("no text to encode")
    with torch.no_grad():
        out = enc.text_fn(strings)
    return _finish(out, len(strings), enc.embed_dim, normalize)


def embed_texts(enc, vocab, normalize=True):
    """Embed every vocabulary prompt; row order follows the vocabulary."""
    return encode_text(enc, vocab.prompts(), normalize)


def _seeded_normal(seed, *shape):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(*shape, generator=g, dtype=torch.float64)


def _bucket(seed, token, n_buckets):
    h = hashlib.blake2b(f"{seed}:{token}".encode(), digest_size=8).digest()
    return int.from_bytes(h, "little") % n_buckets


def make_toy_encoder(d=64, seed=0, *, side=32, n_buckets=128, temperature=100.0):
    """Deterministic toy pair.

    The image tower is ``tanh(W @ flatten(x))`` with a seeded Gaussian ``W``;
    the text tower hashes characters and character bigrams into buckets and
    maps the counts through a seeded linear layer (no gradients).
    """
    if d < 2:
        raise ParameterError("embed_dim must be >= 2")
    fan_in = 3 * side * side
    w_img = _seeded_normal(seed, d, fan_in) / np.sqrt(fan_in)
    w_txt = _seeded_normal(seed + 1, d, n_buckets)

    def image_fn(x):
        flat = x.reshape(x.shape[0], -1)
        if flat.shape[1] != fan_in:
            raise BackendError(f"toy encoder expects 3x{side}x{side} inputs")
        w = w_img.to(flat.dtype)
        # row-wise products keep batch results identical to single calls
        return torch.tanh(torch.stack([w @ row for row in flat]))

    def text_fn(strings):
        counts = torch.zeros(len(strings), n_buckets, dtype=torch.float64)
        for i, s in enumerate(strings):
            tokens = list(s) + [s[j:j + 2] for j in range(len(s) - 1)]
            for tok in tokens:
                counts[i, _bucket(seed, tok, n_buckets)] += 1.0
        return torch.stack([w_txt @ row for row in counts])

    cfg = PreprocessConfig(target_side=side)
    return EncoderPair(d, image_fn, text_fn, temperature=temperature, preprocess=cfg,
                       model_id="toy", metadata={"kind": "toy", "seed": seed})


def label_palette(label, n_colors=3):
    """Deterministic ``n_colors x 3`` RGB palette in ``[0, 1]`` derived from a label string."""
    digest = hashlib.sha256(label.encode()).digest()
    while len(digest) < 3 * n_colors:
        digest += hashlib.sha256(digest).digest()
    return np.frombuffer(digest[:3 * n_colors], dtype=np.uint8).reshape(n_colors, 3) / 255.0


def make_palette_encoder(d=32, seed=0, *, side=32, n_features=64, n_colors=3, temperature=100.0):
    """Toy pair rigged so that palette-drawn images match their label's text.

    Each pixel passes through a seeded per-pixel feature map
    ``tanh(A v + c)``; the image embedding is a fixed projection of the
    spatially averaged, centred features. A label's text embedding is the
    same projection applied to the average features of its palette colours,
    so images painted from :func:`label_palette` are classified correctly.
    Average pooling makes the encoder insensitive to where a patch sits.
    """
    if d < 2:
        raise ParameterError("embed_dim must be >= 2")
    cfg = PreprocessConfig(target_side=side)
    a = _seeded_normal(seed, n_features, 3) * 2.0
    c = _seeded_normal(seed + 1, n_features)
    proj = _seeded_normal(seed + 2, d, n_features)
    mean = torch.tensor(cfg.channel_means, dtype=torch.float64)
    std = torch.tensor(cfg.channel_stds, dtype=torch.float64)

    def features(v):
        # v: (..., 3) normalized colours
        return torch.tanh(v @ a.to(v.dtype).T + c.to(v.dtype))

    grid = torch.linspace(0, 1, 16, dtype=torch.float64)
    cube = torch.cartesian_prod(grid, grid, grid)
    centre = features((cube - mean) / std).mean(0)

    def image_fn(x):
        v = x.permute(0, 2, 3, 1)
        pooled = features(v).mean(dim=(1, 2)) - centre.to(x.dtype)
        return pooled @ proj.to(x.dtype).T

    def text_fn(strings):
        rows = []
        for s in strings:
            pal = torch.from_numpy(label_palette(s, n_colors))
            rows.append(features((pal - mean) / std).mean(0) - centre)
        return torch.stack([proj @ row for row in rows])

    return EncoderPair(d, image_fn, text_fn, temperature=temperature, preprocess=cfg,
                       model_id="toy-palette",
                       metadata={"kind": "toy-palette", "seed": seed, "n_colors": n_colors})


@dataclass
class BackendSpec:
    """Registry entry: how to build an encoder and what it can do."""

    model_id: str
    kind: str
    embed_dim: int
    preprocess: PreprocessConfig
    supports_grad: bool = True
    options: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, model_id, d):
        return cls(model_id=model_id, kind=d["kind"], embed_dim=int(d["embed_dim"]),
                   preprocess=PreprocessConfig.from_dict(d.get("preprocess", {})),
                   supports_grad=bool(d.get("capabilities", {}).get("gradients", True)),
                   options=dict(d.get("options", {})))

    def to_dict(self):
        return {"kind": self.kind, "embed_dim": self.embed_dim,
                "preprocess": self.preprocess.to_dict(),
                "capabilities": {"gradients": self.supports_grad}, "options": self.options}


def _openclip_entry(model_id, name, pretrained, dim, side=224):
    return BackendSpec(model_id, "open_clip", dim, PreprocessConfig(target_side=side),
                       options={"name": name, "pretrained": pretrained})


DEFAULT_BACKENDS = {
    "toy": BackendSpec("toy", "toy", 64, PreprocessConfig(target_side=32), options={"seed": 0}),
    "toy-palette": BackendSpec("toy-palette", "toy-palette", 32, PreprocessConfig(target_side=32),
                               options={"seed": 0}),
    "vit-b-16": _openclip_entry("vit-b-16", "ViT-B-16", "openai", 512),
    "vit-l-14": _openclip_entry("vit-l-14", "ViT-L-14", "openai", 768),
    "vit-l-14-336": _openclip_entry("vit-l-14-336", "ViT-L-14-336", "openai", 768, side=336),
    "vit-b-16-siglip": _openclip_entry("vit-b-16-siglip", "ViT-B-16-SigLIP", "webli", 768),
}


def load_registry(path=None):
    """Built-in backends merged with a JSON registry file (``path`` or ``$CLIPPATCH_REGISTRY``)."""
    registry = dict(DEFAULT_BACKENDS)
    path = path or os.environ.get(REGISTRY_ENV)
    if path:
        with open(path) as fh:
            entries = json.load(fh)
        for model_id, d in entries.items():
            registry[model_id] = BackendSpec.from_dict(model_id, d)
    return registry


def load_encoder(model_id, registry=None):
    """Build the encoder registered under ``model_id``."""
    registry = registry if registry is not None else load_registry()
    if model_id not in registry:
        raise CapabilityError(f"no backend registered for model {model_id!r}")
    spec = registry[model_id]
    side = spec.preprocess.target_side
    if spec.kind == "toy":
        enc = make_toy_encoder(spec.embed_dim, int(spec.options.get("seed", 0)), side=side)
    elif spec.kind == "toy-palette":
        enc = make_palette_encoder(spec.embed_dim, int(spec.options.get("seed", 0)), side=side)
    elif spec.kind == "open_clip":
        enc = _load_open_clip(spec)
    else:
        raise CapabilityError(f"unknown backend kind {spec.kind!r}")
    return replace(enc, model_id=model_id, preprocess=spec.preprocess,
                   supports_grad=enc.supports_grad and spec.supports_grad,
                   grad_lock=threading.Lock())


def _load_open_clip(spec):  # pragma: no cover - needs pretrained weights
    try:
        import open_clip
    except ImportError:
        raise CapabilityError(
            f"model {spec.model_id!r} needs the optional 'open_clip_torch' package") from None
    name, pretrained = spec.options["name"], spec.options.get("pretrained")
    model, _, _ = open_clip.create_model_and_transforms(
        name, pretrained=pretrained, cache_dir=os.environ.get(CACHE_ENV))
    model.eval()
    for prm in model.parameters():
        prm.requires_grad_(False)
    tokenizer = open_clip.get_tokenizer(name)
    bias = getattr(model, "logit_bias", None)
    return EncoderPair(
        spec.embed_dim,
        image_fn=lambda x: model.encode_image(x.float()),
        text_fn=lambda strings: model.encode_text(tokenizer(list(strings))),
        temperature=float(model.logit_scale.exp()),
        bias=float(bias) if bias is not None else 0.0,
        preprocess=spec.preprocess,
        model_id=spec.model_id,
        metadata={"kind": "open_clip", **spec.options},
    )


def similarity_logits(enc, img_emb, txt_emb):
    """``t * x_i . y_j`` for unit-norm rows."""
    return enc.temperature * img_emb @ txt_emb.T


def rank_labels(img_emb, txt_emb, k: Optional[int] = None):
    """Vocabulary indices sorted by similarity, ties broken by lower index."""
    sims = (img_emb @ txt_emb.to(img_emb.dtype).T).detach().cpu().numpy()
    order = np.argsort(-sims, axis=1, kind="stable")
    return order if k is None else order[:, :k]
