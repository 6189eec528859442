"""Consensus-based visual token compression over exported tensor dumps."""

from .analysis import (
    CostModel,
    PRESETS,
    StudyRecord,
    StudyResult,
    SynthSample,
    SynthSpec,
    agreement,
    correction_factor,
    flops_estimate,
    generate_synth,
    kv_cache_mb,
    study_recovery,
)
from .fuser import (
    FuserConfig,
    SaliencyDistribution,
    Selection,
    convex_fuse,
    recovery_fuse,
    temperature_normalize,
    top_k,
)
from .merging import (
    AnchorSet,
    Assignment,
    CompressedSequence,
    TokenProvenance,
    assign_to_anchors,
    farthest_point_sample,
    head_averaged_keys,
    merge_clusters,
    write_compressed,
)
from .pipeline import PipelineConfig, SelectionReport, compress, resolve_merge_count
from .saliency import (
    AttentionBlock,
    RawSaliency,
    aggregate_cross,
    causal_head_attention,
    extract_text_to_vision,
    text_to_vision_block,
    vision_saliency,
)
from .tensor_io import (
    DumpError,
    DumpFormatError,
    DumpValidationError,
    SampleMeta,
    Tensor,
    TensorDump,
    Violation,
    read_container,
    read_dump,
    validate_dump,
    write_container,
    write_dump,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
