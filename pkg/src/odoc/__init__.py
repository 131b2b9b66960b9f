"""Joint optic disc and cup segmentation with patch-based output-space
adversarial domain adaptation."""

from .adapt import (
    DESK_ADVERSARIAL,
    DESK_EXTRACTOR,
    DESK_PRETRAIN,
    PAPER_ADVERSARIAL,
    PAPER_EXTRACTOR,
    PAPER_PRETRAIN,
    AugmentConfig,
    TrainConfig,
    adversarial_train,
    augment,
    lr_at,
    pretrain_segmenter,
)
from .core import (
    DomainTag,
    ImageSample,
    LabelMasks,
    MaskEncoding,
    ProbabilityMaps,
    ROIBox,
    binarize,
    crop,
    decode_mask,
    encode_mask,
    uncrop,
)
from .data import DatasetManifest, SynthConfig, generate_synthetic, load_dataset, save_dataset
from .losses import (
    LossWeights,
    adversarial_loss,
    dice_loss,
    discriminator_loss,
    seg_loss,
    smoothness_loss,
)
from .metrics import (
    challenge_score,
    dice_coefficient,
    evaluate_dataset,
    postprocess,
    screening_auc,
    vertical_cdr,
)
from .models import (
    ModelSpec,
    ModelState,
    build_discriminator,
    build_extractor,
    build_segmenter,
    forward,
    init_state,
    load_state,
    save_state,
)
from .pipeline import predict
from .roi import extract_roi, locate_disc, train_extractor

__version__ = "0.1.0"
