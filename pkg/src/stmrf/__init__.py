"""Video object segmentation by energy minimization over flow-linked frames.

Per-frame detector responses are bootstrapped into binary labelings, then
refined by alternating two moves: temporal fusion, a coordinate-descent pass
over a graph of flow-consistent pixel links, and mask refinement, a pluggable
per-frame shape cleanup whose output pulls the labels through a quadratic
coupling of increasing weight.
"""

from .datamodel import (
    EnergyBreakdown,
    FlowField,
    ImageFrame,
    LabelField,
    LikelihoodField,
    Params,
    SoftMask,
    clamp_likelihood,
    validate_sequence,
)
from .energy import (
    decoupled_energy,
    full_energy,
    fusion_objective,
    temporal_energy_field,
    unary_energy,
    unary_energy_field,
)
from .errors import (
    ConfigurationError,
    DimensionError,
    EngineError,
    ProtocolError,
    RefinementError,
    SceneSpecError,
    SequenceTooShortError,
    SizeError,
    ValidationError,
)
from .flowgraph import (
    TemporalGraph,
    build_temporal_graph,
    check_forward_backward,
    edge_weight,
    frame_confidence,
    warp_mask,
)
from .infer import (
    AblationMode,
    InferenceResult,
    icm_update_pixel,
    mask_refinement,
    resolve_overlaps,
    run_inference,
    temporal_fusion,
)
from .initialization import (
    binarize,
    build_likelihood,
    centroid,
    fuse_response,
    gaussian_position_prior,
    initialize_object,
    initialize_sequence,
    predict_centroid,
)
from .metrics import (
    AggregateReport,
    ScoreRecord,
    aggregate,
    contour_accuracy,
    region_similarity,
    score_sequence,
)
from .refine import (
    ExemplarModel,
    ExemplarRefiner,
    ExternalRefiner,
    IdentityRefiner,
    OracleRefiner,
    Refiner,
    build_exemplar_model,
    exemplar_refine,
)
from .synth import (
    ResponseDropout,
    SceneShape,
    SceneSpec,
    SynthScene,
    brute_force_map,
    corrupt_mask,
    generate_scene,
)

__version__ = "0.1.0"

__all__ = [
    "AblationMode",
    "AggregateReport",
    "ConfigurationError",
    "DimensionError",
    "EnergyBreakdown",
    "EngineError",
    "ExemplarModel",
    "ExemplarRefiner",
    "build_exemplar_model",
    "exemplar_refine",
    "ExternalRefiner",
    "FlowField",
    "IdentityRefiner",
    "ImageFrame",
    "InferenceResult",
    "LabelField",
    "LikelihoodField",
    "OracleRefiner",
    "Params",
    "ProtocolError",
    "RefinementError",
    "Refiner",
    "ResponseDropout",
    "SceneShape",
    "SceneSpec",
    "SceneSpecError",
    "ScoreRecord",
    "SequenceTooShortError",
    "SizeError",
    "SoftMask",
    "SynthScene",
    "TemporalGraph",
    "ValidationError",
    "aggregate",
    "binarize",
    "brute_force_map",
    "build_likelihood",
    "build_temporal_graph",
    "check_forward_backward",
    "clamp_likelihood",
    "contour_accuracy",
    "corrupt_mask",
    "decoupled_energy",
    "edge_weight",
    "centroid",
    "frame_confidence",
    "full_energy",
    "fuse_response",
    "fusion_objective",
    "gaussian_position_prior",
    "generate_scene",
    "initialize_object",
    "initialize_sequence",
    "icm_update_pixel",
    "mask_refinement",
    "predict_centroid",
    "region_similarity",
    "resolve_overlaps",
    "run_inference",
    "score_sequence",
    "temporal_energy_field",
    "temporal_fusion",
    "unary_energy",
    "unary_energy_field",
    "validate_sequence",
    "warp_mask",
]
