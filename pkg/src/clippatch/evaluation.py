"""Attack-success metrics and the repeat-averaged evaluation protocol."""

from __future__ import annotations

import math
import re
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Optional, Protocol, Sequence

import numpy as np
import torch

from .core import PlacementPolicy, attack_image, preprocess
from .encoders import embed_images, embed_texts, rank_labels
from .errors import ParameterError, UndefinedMetricError


@dataclass(frozen=True)
class EvalRecord:
    """One prediction on one (possibly attacked) image."""

    image_id: str
    original_label: int
    target_label: int
    topk_predictions: tuple
    repeat_index: int = 0
    condition: str = "patch"

    def __post_init__(self):
        preds = tuple(int(p) for p in self.topk_predictions)
        object.__setattr__(self, "topk_predictions", preds)
        if not preds:
            raise ParameterError("record needs at least one prediction")
        if len(set(preds)) != len(preds):
            raise ParameterError("duplicate labels in predictions")

    def to_dict(self):
        d = asdict(self)
        d["topk_predictions"] = list(self.topk_predictions)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def asr(records, k=1):
    """Attack success rate at ``k``.

    Only records whose original label differs from the target count. Hits
    are averaged over the repeats of each image first, then across images.
    """
    if k < 1:
        raise ParameterError("k must be >= 1")
    targets = {r.target_label for r in records}
    if len(targets) > 1:
        raise ParameterError(f"records mix target labels {sorted(targets)}")
    per_image = OrderedDict()
    for r in records:
        if r.original_label == r.target_label:
            continue
        hits = per_image.setdefault(r.image_id, [0, 0])
        hits[0] += r.target_label in r.topk_predictions[:k]
        hits[1] += 1
    if not per_image:
        raise UndefinedMetricError("no records with original label different from the target")
    total = sum((Fraction(h, n) for h, n in per_image.values()), Fraction(0))
    return float(total / len(per_image))


def fooling_rate(records, clean_records):
    """Share of attacked predictions whose top-1 differs from the clean top-1, per-image averaged."""
    clean_top = {r.image_id: r.topk_predictions[0] for r in clean_records}
    per_image = OrderedDict()
    for r in records:
        if r.image_id not in clean_top:
            continue
        acc = per_image.setdefault(r.image_id, [0, 0])
        acc[0] += r.topk_predictions[0] != clean_top[r.image_id]
        acc[1] += 1
    if not per_image:
        raise UndefinedMetricError("no attacked records with a clean counterpart")
    return float(sum(Fraction(h, n) for h, n in per_image.values()) / len(per_image))


def accuracy(records, k=1):
    if not records:
        raise UndefinedMetricError("no records")
    return sum(r.original_label in r.topk_predictions[:k] for r in records) / len(records)


@dataclass
class EvaluationResult:
    metrics: dict
    records: list = field(default_factory=list)
    clean_records: list = field(default_factory=list)


def _predict(images, enc, txt_emb, k, chunk=64):
    preds = []
    with torch.no_grad():
        for start in range(0, len(images), chunk):
            batch = torch.stack([preprocess(im, enc.preprocess) for im in images[start:start + chunk]])
            emb = embed_images(enc, batch)
            preds.extend(rank_labels(emb, txt_emb.to(emb.dtype), k).tolist())
    return preds


def evaluate_patch(val_set, enc, vocab, patch, target, repeats=5, k_list=(1, 5), *,
                   seed=0, placement: Optional[PlacementPolicy] = None, include_clean=True):
    """Apply ``patch`` to every image ``repeats`` times and measure ASR@k.

    Each (image, repeat) pair draws its placement from a generator seeded by
    ``(seed, image index, repeat)``, so results do not depend on evaluation
    order. ``patch=None`` evaluates clean images only.
    """
    if repeats < 1:
        raise ParameterError("repeats must be >= 1")
    if not val_set:
        raise ParameterError("empty validation set")
    n = len(vocab)
    if not 0 <= target < n:
        raise ParameterError(f"target {target} outside vocabulary of {n}")
    k_list = sorted(set(int(k) for k in k_list))
    kmax = min(max(k_list), n)
    placement = placement or PlacementPolicy()
    txt_emb = embed_texts(enc, vocab)

    clean_records = []
    if include_clean or patch is None:
        preds = _predict([s.image for s in val_set], enc, txt_emb, kmax)
        clean_records = [EvalRecord(s.image_id or str(i), int(s.label), target, tuple(p), 0, "clean")
                         for i, (s, p) in enumerate(zip(val_set, preds))]

    records = []
    if patch is not None:
        attacked, keys = [], []
        for i, s in enumerate(val_set):
            for r in range(repeats):
                rng = np.random.default_rng([seed, i, r])
                attacked.append(attack_image(s.image, patch, placement, rng=rng).detach())
                keys.append((i, r))
        preds = _predict(attacked, enc, txt_emb, kmax)
        records = [EvalRecord(val_set[i].image_id or str(i), int(val_set[i].label), target,
                              tuple(p), r, "patch")
                   for (i, r), p in zip(keys, preds)]

    metrics = {}
    for k in k_list:
        if records:
            metrics[f"asr@{k}"] = asr(records, k)
        if clean_records:
            metrics[f"clean_asr@{k}"] = asr(clean_records, k)
    if clean_records:
        metrics["clean_accuracy@1"] = accuracy(clean_records, 1)
    if records and clean_records:
        metrics["fooling_rate"] = fooling_rate(records, clean_records)
    if patch is None:
        for k in k_list:
            metrics[f"asr@{k}"] = metrics[f"clean_asr@{k}"]
    return EvaluationResult(metrics, records, clean_records)


@dataclass(frozen=True)
class GenerativeOutput:
    text: str
    token_logprobs: tuple

    def __post_init__(self):
        lps = tuple(float(v) for v in self.token_logprobs)
        object.__setattr__(self, "token_logprobs", lps)
        if any(not math.isfinite(v) or v > 0 for v in lps):
            raise ParameterError("token log-probabilities must be finite and <= 0")


class GenerativeAdapter(Protocol):
    def generate(self, image: torch.Tensor, prompt: str) -> GenerativeOutput: ...


class ScriptedGenerator:
    """Fake caption model for tests: ``respond(image, prompt)`` returns ``(text, logprobs)``."""

    def __init__(self, respond):
        self._respond = respond

    def generate(self, image, prompt):
        text, logprobs = self._respond(image, prompt)
        return GenerativeOutput(text, tuple(logprobs))


def perplexity(out):
    """``exp`` of the mean negative token log-likelihood."""
    lps = out.token_logprobs
    if not lps:
        raise ParameterError("perplexity of an empty sequence")
    return math.exp(-math.fsum(lps) / len(lps))


def _norm_text(s):
    return re.sub(r"\s+", " ", s.replace("-", " ").replace("_", " ")).strip().lower()


def target_occurrence(text, target_label, strict=False):
    """Whether ``target_label`` appears in ``text``, case-insensitively.

    Hyphens and underscores count as spaces. ``strict`` additionally
    requires word boundaries, so ``"cake"`` no longer matches ``"pancake"``.
    """
    needle = _norm_text(target_label)
    if not needle:
        raise ParameterError("empty target label")
    hay = _norm_text(text)
    if strict:
        return re.search(rf"\b{re.escape(needle)}\b", hay) is not None
    return needle in hay


def evaluate_generative(images: Sequence, patch, adapter, prompt, target_label, repeats=5, *,
                        seed=0, placement=None, strict=False):
    """Query a caption model on clean and patched images.

    Returns mean perplexity and target-occurrence rates for both conditions
    plus the individual responses.
    """
    placement = placement or PlacementPolicy()
    rows = []
    for i, image in enumerate(images):
        variants = [("clean", 0, image)]
        for r in range(repeats):
            rng = np.random.default_rng([seed, i, r])
            variants.append(("patch", r, attack_image(image, patch, placement, rng=rng).detach()))
        for condition, r, im in variants:
            out = adapter.generate(im, prompt)
            rows.append({"image_index": i, "condition": condition, "repeat_index": r,
                         "text": out.text, "perplexity": perplexity(out),
                         "target_occurrence": target_occurrence(out.text, target_label, strict)})
    summary = {}
    for condition in ("clean", "patch"):
        sel = [row for row in rows if row["condition"] == condition]
        if sel:
            summary[f"{condition}_perplexity"] = float(np.mean([row["perplexity"] for row in sel]))
            summary[f"{condition}_occurrence"] = float(np.mean([row["target_occurrence"] for row in sel]))
    return summary, rows
