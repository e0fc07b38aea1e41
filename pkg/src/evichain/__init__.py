"""Evidence-chain QA toolkit.

Datasets of multi-hop questions grounded in page screenshots with
pixel-level evidence boxes: annotator, candidate-set builder, page
capture, training-sample emission, endpoint client, and joint
answer-plus-localization scoring.
"""

from .boxes import (
    BoundingBox,
    box_area,
    center_inside,
    clip_to_frame,
    intersection_area,
    iou,
    union_bounds,
)
from .chains import (
    QUESTION_TYPES,
    EvidenceChain,
    EvidenceHop,
    GoldHop,
    ModelOutput,
    QARecord,
    chain_to_dict,
    emit_chain,
    parse_chain,
)
from .errors import (
    AuthFailureError,
    BoxError,
    CaptureError,
    CaptureFailedError,
    ClientError,
    ConfigError,
    DatasetError,
    EmptyDatasetError,
    EmptyEvaluationError,
    EndpointUnreachableError,
    EvichainError,
    GoldMissingError,
    InsufficientPoolError,
    InvariantError,
    LabelInconsistencyError,
    MissingSnapshotError,
    NavigationTimeoutError,
    SchemaError,
    TransformError,
)
from .metrics import (
    ExampleScore,
    GroupRates,
    MatchConfig,
    Report,
    aggregate,
    box_match,
    chain_accuracy,
    exact_match,
    hop_localized,
    normalize_answer,
    normalize_text,
    render_summary,
    score_example,
)
from .dataset import (
    CandidateDocument,
    CandidateSet,
    DatasetStats,
    DocumentPool,
    build_candidate_set,
    compute_stats,
    load_candidate_sets,
    load_pool,
    load_records,
    rank_entities,
    save_candidate_sets,
    save_pool,
    save_records,
    split_entity_chain,
    validate_dataset,
)
from .annotate import (
    ELEMENT_KINDS,
    AnnotatedRecord,
    AnnotationRejection,
    AnnotatorConfig,
    MatchResult,
    RenderedElement,
    SourceQuestion,
    annotate_record,
    element_box,
    match_sentence,
    text_similarity,
)
from .augment import (
    PHASE1_PROMPT,
    PHASE2_PROMPT,
    ZERO_STRENGTH,
    AffineTransform,
    AugmentConfig,
    TrainingSample,
    apply_transform_image,
    augment_sample,
    default_sub_question,
    emit_phase1,
    emit_phase2,
    load_training_samples,
    output_dims,
    permute_candidates,
    resize_resolution,
    resize_variants,
    sample_transform,
    save_training_samples,
    training_sample_from_dict,
    transform_box,
)
from .capture import (
    PageSnapshot,
    SessionConfig,
    WebDriverSession,
    capture_page,
    extract_elements,
    load_snapshot,
    load_snapshot_dir,
    save_snapshot,
    snapshot_batch,
)
from .client import (
    DEFAULT_TEMPLATE,
    TEMPLATE_VERSION,
    EndpointConfig,
    InferenceResult,
    PromptTemplate,
    build_request,
    extract_chain_text,
    infer,
)
from .overlay import render_overlays

__version__ = "0.1.0"

__all__ = [
    "__version__",
    # boxes
    "BoundingBox", "box_area", "center_inside", "clip_to_frame",
    "intersection_area", "iou", "union_bounds",
    # chains
    "QUESTION_TYPES", "EvidenceChain", "EvidenceHop", "GoldHop",
    "ModelOutput", "QARecord", "chain_to_dict", "emit_chain", "parse_chain",
    # errors
    "AuthFailureError", "BoxError", "CaptureError", "CaptureFailedError",
    "ClientError", "ConfigError", "DatasetError", "EmptyDatasetError",
    "EmptyEvaluationError", "EndpointUnreachableError", "EvichainError",
    "GoldMissingError", "InsufficientPoolError", "InvariantError",
    "LabelInconsistencyError", "MissingSnapshotError",
    "NavigationTimeoutError", "SchemaError", "TransformError",
    # metrics
    "ExampleScore", "GroupRates", "MatchConfig", "Report", "aggregate",
    "box_match", "chain_accuracy", "exact_match", "hop_localized",
    "normalize_answer", "normalize_text", "render_summary", "score_example",
    # dataset
    "CandidateDocument", "CandidateSet", "DatasetStats", "DocumentPool",
    "build_candidate_set", "compute_stats", "load_candidate_sets",
    "load_pool", "load_records", "rank_entities", "save_candidate_sets",
    "save_pool", "save_records", "split_entity_chain", "validate_dataset",
    # annotate
    "ELEMENT_KINDS", "AnnotatedRecord", "AnnotationRejection",
    "AnnotatorConfig", "MatchResult", "RenderedElement", "SourceQuestion",
    "annotate_record", "element_box", "match_sentence", "text_similarity",
    # augment
    "PHASE1_PROMPT", "PHASE2_PROMPT", "ZERO_STRENGTH", "AffineTransform",
    "AugmentConfig", "TrainingSample", "apply_transform_image",
    "augment_sample", "default_sub_question", "emit_phase1", "emit_phase2",
    "load_training_samples", "output_dims", "permute_candidates",
    "resize_resolution", "resize_variants", "sample_transform",
    "save_training_samples", "training_sample_from_dict", "transform_box",
    # capture
    "PageSnapshot", "SessionConfig", "WebDriverSession", "capture_page",
    "extract_elements", "load_snapshot", "load_snapshot_dir",
    "save_snapshot", "snapshot_batch",
    # client
    "DEFAULT_TEMPLATE", "TEMPLATE_VERSION", "EndpointConfig",
    "InferenceResult", "PromptTemplate", "build_request",
    "extract_chain_text", "infer",
    # overlay
    "render_overlays",
]
