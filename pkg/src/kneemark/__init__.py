"""Knee radiograph landmark localization: hourglass networks with
coordinate read-out, a two-stage center-then-crop inference pipeline, and
the training, evaluation, and synthetic-data tooling around them."""

from .augment import AugmentationConfig, augment_sample, sample_rng
from .checkpoint import (
    CheckpointError,
    CheckpointNameError,
    CheckpointShapeError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    load_checkpoint,
    save_checkpoint,
)
from .evaluation import (
    ABLATION_SUBSET,
    DEFAULT_RADII_MM,
    OUTLIER_MM,
    TEST_SUBSET,
    cumulative_distribution,
    fold_report,
    outlier_rate,
    pck,
    radial_errors,
    summarize_errors,
)
from .imaging import (
    KNEE_LANDMARK_COUNT,
    AnnotationError,
    AnnotationRecord,
    Frame,
    Image,
    LandmarkSet,
    RoiTransform,
    Side,
    crop_roi,
    flip_horizontal,
    flip_index_permutation,
    read_annotations,
    read_png,
    resample,
    resize_to,
    split_bilateral,
    write_annotations,
    write_png,
)
from .losses import WingParams, make_loss, mixup_batch, mixup_criterion, wing_loss
from .nn.model import HourglassModel, ModelConfig, build_model
from .nn.tensor import DivergenceError, Tensor, no_grad
from .phantom import PhantomSpec, make_bilateral, make_knee, write_corpus
from .pipeline import (
    KneeResult,
    PipelineConfig,
    infer_bilateral,
    infer_knee,
    locate_joint_center,
    localize_landmarks,
)
from .training import (
    Adam,
    Sample,
    TrainConfig,
    TrainResult,
    make_cv_splits,
    prepare_landmark_sample,
    prepare_roi_sample,
    train,
    transfer_init,
)

__version__ = "1.0.0"

__all__ = [
    "ABLATION_SUBSET",
    "Adam",
    "AnnotationError",
    "AnnotationRecord",
    "AugmentationConfig",
    "CheckpointError",
    "CheckpointNameError",
    "CheckpointShapeError",
    "CheckpointTruncatedError",
    "CheckpointVersionError",
    "DEFAULT_RADII_MM",
    "DivergenceError",
    "Frame",
    "HourglassModel",
    "Image",
    "KNEE_LANDMARK_COUNT",
    "KneeResult",
    "LandmarkSet",
    "ModelConfig",
    "OUTLIER_MM",
    "PhantomSpec",
    "PipelineConfig",
    "RoiTransform",
    "Sample",
    "Side",
    "TEST_SUBSET",
    "Tensor",
    "TrainConfig",
    "TrainResult",
    "WingParams",
    "augment_sample",
    "build_model",
    "crop_roi",
    "cumulative_distribution",
    "flip_horizontal",
    "flip_index_permutation",
    "fold_report",
    "infer_bilateral",
    "infer_knee",
    "load_checkpoint",
    "locate_joint_center",
    "localize_landmarks",
    "make_bilateral",
    "make_cv_splits",
    "make_knee",
    "make_loss",
    "mixup_batch",
    "mixup_criterion",
    "no_grad",
    "outlier_rate",
    "pck",
    "prepare_landmark_sample",
    "prepare_roi_sample",
    "radial_errors",
    "read_annotations",
    "read_png",
    "resample",
    "resize_to",
    "sample_rng",
    "save_checkpoint",
    "split_bilateral",
    "summarize_errors",
    "train",
    "transfer_init",
    "wing_loss",
    "write_annotations",
    "write_corpus",
    "write_png",
]
