"""Face reenactment and swapping via plug-in adapters around a frozen denoiser."""

__version__ = "0.1.0"

from .errors import (
    CheckpointError,
    ConfigurationError,
    ContractViolationError,
    ExtractionError,
    FaceAdapterError,
    FormatError,
    IngestionError,
    MetricError,
    SamplingError,
)
from .morphable import (
    FaceCoefficients,
    Landmarks2D,
    MorphableModel,
    RenderStyle,
    default_toy_model,
    landmarks_for,
    load_coefficients,
    load_model,
    project_landmarks,
    recombine_coefficients,
    reconstruct_vertices,
    render_landmark_image,
    save_coefficients,
    save_model,
)
from .masks import (
    AdaptingMask,
    SegmentationHead,
    Task,
    build_gt_mask_reenact,
    build_gt_mask_swap,
    dilate_mask,
    predict_adapting_area,
    train_area_predictor,
)
from .mappers import TokenKind, TokenMapper, TokenSequence, concat_context
from .identity import (
    FaceRecognizer,
    IdentityEmbedding,
    ToyFaceRecognizer,
    extract_face_embedding,
    identity_to_tokens,
    null_identity_tokens,
)
from .attribute import (
    AttributeEmbeddings,
    ControlBranch,
    SpatialControl,
    ToyVisionEncoder,
    attribute_to_tokens,
    compose_spatial_control,
    extract_attribute_embeddings,
    null_attribute_tokens,
)
from .diffusion import (
    NoiseSchedule,
    PixelSpaceCodec,
    SampleConditions,
    ToyDenoiser,
    add_noise,
    cfg_combine,
    ddim_timesteps,
    ddim_update,
    denoise_step,
    sample,
)
from .adapter import AdapterModules, audit_trainable_set, load_checkpoint, save_checkpoint
from .config import (
    CorpusConfig,
    ModelConfig,
    RunConfig,
    SamplingConfig,
    TrainingConfig,
    load_config,
    save_config,
    toy_run_config,
)
from .data import CorpusManifest, FrameRecord, PairSampler, TrainingPair, ingest_dataset, load_manifest
from .synthetic import generate_corpus, render_face_frame
from .training import (
    ConditionedExample,
    DropRecord,
    build_training_example,
    drop_conditions,
    run_adapter_training,
    sample_task,
    train_mask_predictors,
    training_step,
)
from .pipelines import GenerationPlan, GenerationResult, execute_plan, reenact, swap
from .metrics import (
    EvalReport,
    MotionErrors,
    csim,
    evaluate_run,
    id_retrieval,
    load_eval_manifest,
    motion_errors,
    psnr,
    register_feature_metric,
    write_report_csv,
)
