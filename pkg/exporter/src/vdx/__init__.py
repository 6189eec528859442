"""Hook-based exporter: runs a seeded model and writes CDT1 tensor dumps."""

from .capture import CaptureError, attach, capture_forward, collect, expected_dims
from .container import (
    META_FIELDS,
    MAGIC,
    ContainerError,
    read_container,
    read_header,
    write_container,
)
from .export import (
    IMAGE_MEAN,
    IMAGE_STD,
    ExportError,
    ExportSpec,
    export_samples,
    load_pixels,
    sample_meta,
)
from .model import (
    MODELS,
    SYSTEM_PREAMBLE,
    VOCAB_SIZE,
    MiniVLM,
    ModelGeometry,
    build_model,
    byte_ids,
)

__version__ = "0.1.0"

__all__ = [
    "CaptureError",
    "ContainerError",
    "ExportError",
    "ExportSpec",
    "IMAGE_MEAN",
    "IMAGE_STD",
    "MAGIC",
    "META_FIELDS",
    "MODELS",
    "MiniVLM",
    "ModelGeometry",
    "SYSTEM_PREAMBLE",
    "VOCAB_SIZE",
    "attach",
    "build_model",
    "byte_ids",
    "capture_forward",
    "collect",
    "expected_dims",
    "export_samples",
    "load_pixels",
    "read_container",
    "read_header",
    "sample_meta",
    "write_container",
    "__version__",
]
