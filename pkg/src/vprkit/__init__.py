"""Two-stage visual place recognition on numpy.

Stage one compares compact global descriptors (convolutional backbone plus
residual aggregation) against an exhaustive index. Stage two re-scores the
shortlist by matching local patch descriptors with attention enhancement and
entropy-regularized optimal transport. Everything is deterministic given a
seed and runs at desk scale without accelerators.
"""

from .backbone import (
    Backbone,
    DEFAULT_SPEC,
    NetworkSpec,
    RepVggBlock,
    StageSpec,
    backbone_forward,
    count_params_flops,
    random_backbone,
    reparameterize_backbone,
    reparameterize_block,
)
from .descriptor import (
    GlobalDescriptor,
    PatchDescriptorSet,
    PatchGrid,
    PcaModel,
    VladParams,
    global_descriptor,
    extract_patch_descriptors,
    make_patch_grid,
    pca_fit,
    pca_project,
    random_projection,
    random_vlad_params,
    triplet_loss,
    vlad_aggregate,
)
from .errors import (
    ConfigError,
    DegenerateInputError,
    EmptyGroundTruthWarning,
    FormatError,
    FrameMismatchError,
    ShapeError,
    VprError,
)
from .io_store import (
    ManifestRecord,
    load_image,
    load_index,
    load_manifest,
    load_weights,
    save_index,
    save_manifest,
    save_weights,
)
from .matcher import (
    AssignmentMatrix,
    AttentionLayer,
    GroundTruthMatches,
    MatcherParams,
    attention_forward,
    enhance_descriptors,
    loss_gradient,
    match_pair,
    match_score,
    nll_loss,
    nll_loss_from_scores,
    random_matcher_params,
    score_matrix,
    sinkhorn_assign,
)
from .model import ModelParams, random_model
from .pipeline import ExtractionSettings, extract_from_tensor, extract_image, extract_index
from .retrieval import (
    CandidateList,
    DescriptorIndex,
    GeoTag,
    IndexEntry,
    build_ground_truth_matches,
    geo_distance,
    global_retrieve,
    recall_at_k,
    rerank,
)

__version__ = "0.1.0"

__all__ = [
    "AssignmentMatrix",
    "AttentionLayer",
    "Backbone",
    "CandidateList",
    "ConfigError",
    "DEFAULT_SPEC",
    "DegenerateInputError",
    "DescriptorIndex",
    "EmptyGroundTruthWarning",
    "ExtractionSettings",
    "FormatError",
    "FrameMismatchError",
    "GeoTag",
    "GlobalDescriptor",
    "GroundTruthMatches",
    "IndexEntry",
    "ManifestRecord",
    "MatcherParams",
    "ModelParams",
    "NetworkSpec",
    "PatchDescriptorSet",
    "PatchGrid",
    "PcaModel",
    "RepVggBlock",
    "ShapeError",
    "StageSpec",
    "VladParams",
    "VprError",
    "attention_forward",
    "backbone_forward",
    "build_ground_truth_matches",
    "count_params_flops",
    "enhance_descriptors",
    "extract_from_tensor",
    "extract_image",
    "extract_index",
    "extract_patch_descriptors",
    "geo_distance",
    "global_descriptor",
    "global_retrieve",
    "load_image",
    "load_index",
    "load_manifest",
    "load_weights",
    "loss_gradient",
    "make_patch_grid",
    "match_pair",
    "match_score",
    "nll_loss",
    "nll_loss_from_scores",
    "pca_fit",
    "pca_project",
    "random_backbone",
    "random_matcher_params",
    "random_model",
    "random_projection",
    "random_vlad_params",
    "recall_at_k",
    "reparameterize_backbone",
    "reparameterize_block",
    "rerank",
    "save_index",
    "save_manifest",
    "save_weights",
    "score_matrix",
    "sinkhorn_assign",
    "triplet_loss",
    "vlad_aggregate",
]
