"""Frequency-domain Bayesian adversarial attacks on AI-generated-image detectors."""

from .attacks import (
    ATTACK_NAMES,
    AttackConfig,
    AttackResult,
    ensemble_attack,
    fpba,
    ifgsm,
    mifgsm,
    pgd,
    project,
    spectrum_attack,
)
from .bayes import (
    AppendedHead,
    BayesEnsemble,
    PostTrainConfig,
    SghmcConfig,
    load_ensemble,
    post_train,
    save_ensemble,
)
from .data import FAMILY_PRESETS, ArtifactFamily, LabeledDataset, load_image_folder, synth_dataset
from .detectors import (
    LABEL_FAKE,
    LABEL_REAL,
    AugmentConfig,
    Detector,
    TrainConfig,
    build_detector,
    evaluate_accuracy,
    load_checkpoint,
    predict_labels,
    save_checkpoint,
    state_checksum,
    train_detector,
)
from .errors import (
    CapabilityError,
    CheckpointError,
    DivergedChainError,
    FpbaError,
    InvalidDatasetError,
    InvalidInputError,
    InvalidParameterError,
    PreconditionError,
)
from .evaluation import (
    GradientDiagnostic,
    QualityReport,
    TransferMatrix,
    attack_success_rate,
    gradient_diagnostic,
    image_quality,
    ssim_score,
    transfer_eval,
)
from .frequency import (
    SaliencyMap,
    SpectrumTransformParams,
    dct2,
    dct_matrix,
    idct2,
    spectrum_saliency,
    spectrum_transform,
)

__version__ = "0.1.0"

__all__ = [
    "__version__",
    "ATTACK_NAMES",
    "AttackConfig",
    "AttackResult",
    "ensemble_attack",
    "fpba",
    "ifgsm",
    "mifgsm",
    "pgd",
    "project",
    "spectrum_attack",
    "AppendedHead",
    "BayesEnsemble",
    "PostTrainConfig",
    "SghmcConfig",
    "load_ensemble",
    "post_train",
    "save_ensemble",
    "FAMILY_PRESETS",
    "ArtifactFamily",
    "LabeledDataset",
    "load_image_folder",
    "synth_dataset",
    "LABEL_FAKE",
    "LABEL_REAL",
    "AugmentConfig",
    "Detector",
    "TrainConfig",
    "build_detector",
    "evaluate_accuracy",
    "load_checkpoint",
    "predict_labels",
    "save_checkpoint",
    "state_checksum",
    "train_detector",
    "CapabilityError",
    "CheckpointError",
    "DivergedChainError",
    "FpbaError",
    "InvalidDatasetError",
    "InvalidInputError",
    "InvalidParameterError",
    "PreconditionError",
    "GradientDiagnostic",
    "QualityReport",
    "TransferMatrix",
    "attack_success_rate",
    "gradient_diagnostic",
    "image_quality",
    "ssim_score",
    "transfer_eval",
    "SaliencyMap",
    "SpectrumTransformParams",
    "dct2",
    "dct_matrix",
    "idct2",
    "spectrum_saliency",
    "spectrum_transform",
]
