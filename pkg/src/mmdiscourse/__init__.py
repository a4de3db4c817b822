"""Image-text discourse classification via multi-head attention fusion."""

from .config import RunConfig, make_run_config
from .corpus import (
    CorpusStats,
    DatasetSplit,
    DiscourseLabel,
    MultimediaPost,
    QualityVerdict,
    agreement,
    compute_stats,
    load_dataset,
    make_split,
    quality_screen,
    write_dataset,
)
from .classifier import (
    ClassifierHead,
    DiscourseModel,
    TrainConfig,
    class_weights,
    load_checkpoint,
    predict,
    run_training,
    save_checkpoint,
    train,
    weighted_cross_entropy,
)
from .encoders import (
    CaptionFeatures,
    EncodedPost,
    ImageFeatures,
    PostEncoder,
    TextFeatures,
    caption_image,
    encode_caption,
    encode_image,
    encode_text,
)
from .errors import (
    BackendError,
    ConfigError,
    DatasetError,
    DiscourseError,
    TrainingDivergedError,
)
from .evaluation import (
    AblationSpec,
    EvalReport,
    export_heatmap,
    f1_report,
    run_ablation,
    significance,
)
from .fusion import (
    AttentionConfig,
    FusionOutput,
    ModalityFusion,
    MultiHeadAttention,
    fuse,
    scaled_dot_attention,
)

__version__ = "0.1.0"
