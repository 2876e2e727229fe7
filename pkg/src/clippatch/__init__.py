"""Universal adversarial patches against contrastive image-text encoders."""

__version__ = "0.1.0"

from .core import (
    LabeledImage,
    PatchSpec,
    PlacementPolicy,
    PreprocessConfig,
    apply_patch,
    preprocess,
    render_frame_patch,
    render_text_patch,
)
from .encoders import EncoderPair, LabelVocabulary, embed_images, embed_texts, load_encoder, make_toy_encoder
from .evaluation import EvalRecord, asr, evaluate_patch, perplexity, target_occurrence
from .objectives import AttackBudget, clip_loss, patch_loss, pgd_attack, siglip_loss
from .training import TrainConfig, crop_resize_augment, train_patch
