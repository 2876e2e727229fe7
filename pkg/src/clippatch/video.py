"""Keyframe sampling, partial frame infection and CLIP-score based video ASR."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .core import PlacementPolicy, attack_image, ceil_count, preprocess
from .encoders import embed_images, encode_text
from .errors import ParameterError


@dataclass
class VideoSample:
    frames: list
    caption: str
    id: str = ""

    def __post_init__(self):
        if not self.frames:
            raise ParameterError("video has no frames")
        shapes = {tuple(f.shape) for f in self.frames}
        if len(shapes) != 1:
            raise ParameterError(f"frames differ in shape: {sorted(shapes)}")


@dataclass
class KeyframeSet:
    frames: list
    indices: list

    def __post_init__(self):
        if len(self.frames) != len(self.indices):
            raise ParameterError("frames and indices differ in length")
        if any(b <= a for a, b in zip(self.indices, self.indices[1:])):
            raise ParameterError("keyframe indices must be strictly increasing")


@dataclass(frozen=True)
class ClipScoreQuad:
    """s1 attacked x target, s2 clean x original, s3 clean x target, s4 attacked x original."""

    s1: float
    s2: float
    s3: float
    s4: float

    def as_tuple(self):
        return (self.s1, self.s2, self.s3, self.s4)


def keyframe_indices(n_frames, t_prime=10):
    if t_prime < 1:
        raise ParameterError("t_prime must be >= 1")
    if n_frames < 1:
        raise ParameterError("empty video")
    if n_frames <= t_prime:
        return list(range(n_frames))
    return sorted({i * n_frames // t_prime for i in range(t_prime)})


def extract_keyframes(v, t_prime=10):
    """Uniform temporal sampling at ``floor(i * T / T')``."""
    idx = keyframe_indices(len(v.frames), t_prime)
    return KeyframeSet([v.frames[i] for i in idx], idx)


def infect_frames(kf, patch, fraction, seed=0, *, mode="random", placement=None):
    """Patch ``ceil(fraction * T')`` keyframes and leave the rest untouched.

    ``mode="random"`` picks frames uniformly without replacement under
    ``seed``; ``mode="prefix"`` takes the first ones.
    """
    if not 0 <= fraction <= 1:
        raise ParameterError("fraction must lie in [0, 1]")
    n = len(kf.frames)
    count = ceil_count(fraction, n)
    rng = np.random.default_rng(seed)
    if mode == "random":
        chosen = set(rng.choice(n, size=count, replace=False).tolist())
    elif mode == "prefix":
        chosen = set(range(count))
    else:
        raise ParameterError(f"unknown infection mode {mode!r}")
    placement = placement or PlacementPolicy()
    frames = [attack_image(f, patch, placement, rng=rng).detach() if i in chosen else f
              for i, f in enumerate(kf.frames)]
    return KeyframeSet(frames, list(kf.indices))


def clip_score(img_emb, txt_emb):
    """``100 * max(cos, 0)``."""
    a = torch.as_tensor(img_emb, dtype=torch.float64).flatten()
    b = torch.as_tensor(txt_emb, dtype=torch.float64).flatten()
    na, nb = a.norm(), b.norm()
    if na == 0 or nb == 0:
        raise ParameterError("clip score of a zero vector")
    return 100.0 * max(float(a @ b / (na * nb)), 0.0)


def _frame_embeddings(frames, enc):
    with torch.no_grad():
        batch = torch.stack([preprocess(f, enc.preprocess) for f in frames])
        return embed_images(enc, batch)


def _mean_score(frame_emb, txt):
    return float(np.mean([clip_score(e, txt) for e in frame_emb]))


def score_video(kf_clean, kf_adv, original_caption, target_caption, enc):
    """Mean per-frame CLIP scores for the four frame/caption pairings."""
    if len(kf_clean.frames) != len(kf_adv.frames):
        raise ParameterError("clean and attacked keyframe sets differ in length")
    clean = _frame_embeddings(kf_clean.frames, enc)
    adv = clean if kf_adv is kf_clean else _frame_embeddings(kf_adv.frames, enc)
    orig, targ = encode_text(enc, [original_caption, target_caption])
    return ClipScoreQuad(_mean_score(adv, targ), _mean_score(clean, orig),
                         _mean_score(clean, targ), _mean_score(adv, orig))


def asr_from_quads(quads):
    """``(ASR1&4, ASR1&2)``: shares of videos with s1 > s4 and with s1 > s2."""
    if not quads:
        raise ParameterError("no videos")
    n = len(quads)
    return (sum(q.s1 > q.s4 for q in quads) / n, sum(q.s1 > q.s2 for q in quads) / n)


def video_asr(videos, patch, fractions, enc, target_caption, *, t_prime=10, seed=0,
              mode="random"):
    """ASR curves over infection fractions.

    Returns ``{fraction: {"asr_1_4", "asr_1_2", "mean_scores", "quads"}}``.
    Videos are seeded individually so adding a video does not reshuffle the others.
    """
    if not videos:
        raise ParameterError("empty video set")
    keyframes = [extract_keyframes(v, t_prime) for v in videos]
    curve = {}
    for rho in fractions:
        quads = []
        for j, (v, kf) in enumerate(zip(videos, keyframes)):
            adv = infect_frames(kf, patch, rho, seed=[seed, j], mode=mode)
            quads.append(score_video(kf, adv, v.caption, target_caption, enc))
        a14, a12 = asr_from_quads(quads)
        curve[float(rho)] = {
            "asr_1_4": a14,
            "asr_1_2": a12,
            "mean_scores": [float(np.mean([q.as_tuple()[i] for q in quads])) for i in range(4)],
            "quads": [q.as_tuple() for q in quads],
        }
    return curve
