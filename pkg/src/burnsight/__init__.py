"""Texture-augmented grayscale image classification with local explanations."""

from .errors import (
    BurnsightError,
    CheckpointError,
    ExplainError,
    FeatureFileError,
    ImageFormatError,
    ManifestError,
    TrainingError,
)
from .imaging import (
    CLASS_NAMES,
    DatasetManifest,
    GrayImage,
    SynthConfig,
    center_crop,
    generate_synthetic_dataset,
    load_image,
    load_manifest,
    preprocess,
    resize_bilinear,
)
from .texture import (
    FEATURE_NAMES,
    Glcm,
    GlcmConfig,
    GlcmFeatures,
    compute_glcm,
    haralick_features,
    quantize,
    texture_vector,
)
from .segmentation import (
    FelzenszwalbParams,
    QuickshiftParams,
    SegmentMap,
    segment_felzenszwalb,
    segment_grid,
    segment_quickshift,
)
from .model import (
    BackboneSource,
    FusionModel,
    Prediction,
    TrainConfig,
    builtin_backbone,
    forward,
    load_checkpoint,
    load_feature_file,
    predict_image,
    save_checkpoint,
    save_feature_file,
    train,
    train_svm_baseline,
)
from .explain import (
    Explanation,
    LimeConfig,
    SaliencyMap,
    apply_mask,
    explain_instance,
    fit_surrogate,
    gradient_saliency,
    kernel_weight,
    render,
    sample_masks,
)
from .evalstats import (
    MetricsReport,
    TukeyPair,
    confusion_and_metrics,
    multi_seed_run,
    studentized_range_cdf,
    tukey_hsd,
)

__version__ = "0.1.0"
