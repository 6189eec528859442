"""Run a bundled model over images and write one CDT1 dump per image."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .capture import capture_forward
from .container import write_container
from .model import MODELS, SYSTEM_PREAMBLE, ModelGeometry, build_model, byte_ids

# CLIP preprocessing constants.
IMAGE_MEAN = np.array([0.48145466, 0.4578275, 0.40821073], dtype=np.float32)
IMAGE_STD = np.array([0.26862954, 0.26130258, 0.27577711], dtype=np.float32)


class ExportError(Exception):
    """Invalid export request."""


@dataclass(frozen=True)
class ExportSpec:
    """One export request: a model, images, a prompt, and a target directory."""

    images: tuple[str, ...]
    prompt: str
    out_dir: str
    model: str = "mini-336"
    seed: int = 0
    precision: str = "f32"

    def __post_init__(self):
        object.__setattr__(self, "images", tuple(str(p) for p in self.images))
        if not self.images:
            raise ExportError("at least one image path is required")
        if not self.prompt.strip():
            raise ExportError("prompt must be non-empty")
        if self.model not in MODELS:
            raise ExportError(f"unknown model {self.model!r}; available: {', '.join(sorted(MODELS))}")
        if self.precision != "f32":
            raise ExportError(f"unsupported precision {self.precision!r}; tensors are always written as f32")


def load_pixels(path: str | Path, image_size: int) -> torch.Tensor:
    """Load an image as a normalized (1, 3, size, size) float32 tensor."""
    with Image.open(path) as im:
        rgb = im.convert("RGB").resize((image_size, image_size), Image.Resampling.BICUBIC)
    arr = np.asarray(rgb, dtype=np.float32) / 255.0
    arr = (arr - IMAGE_MEAN) / IMAGE_STD
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1))).unsqueeze(0)


def sample_meta(g: ModelGeometry, n_sys: int, n_text: int) -> dict[str, int]:
    return {
        "n_visual": g.n_patches,
        "n_text": n_text,
        "n_sys": n_sys,
        "grid_h": g.grid,
        "grid_w": g.grid,
        "d_llm": g.d_llm,
        "d_enc": g.d_enc,
        "d_key": g.d_key,
        "heads_llm": g.heads_llm,
        "heads_enc": g.heads_enc,
        "head_dim_llm": g.head_dim_llm,
    }


def _dump_path(out_dir: Path, image_path: str, used: set[str]) -> Path:
    stem = Path(image_path).stem or "sample"
    name = f"{stem}.cdt1"
    i = 2
    while name in used:
        name = f"{stem}-{i}.cdt1"
        i += 1
    used.add(name)
    return out_dir / name


def export_samples(spec: ExportSpec) -> list[Path]:
    """Export one dump per image, sequentially; returns the written paths.

    The model is built once per call with seed-determined weights, so a
    repeated call with the same spec rewrites byte-identical files.
    """
    for p in spec.images:
        if not Path(p).is_file():
            raise FileNotFoundError(f"image not readable: {p}")
    geometry = MODELS[spec.model]
    model = build_model(spec.model, spec.seed)
    sys_ids = byte_ids(SYSTEM_PREAMBLE)
    text_ids = byte_ids(spec.prompt)
    meta = sample_meta(geometry, int(sys_ids.shape[1]), int(text_ids.shape[1]))

    out_dir = Path(spec.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths: list[Path] = []
    used: set[str] = set()
    for image_path in spec.images:
        pixels = load_pixels(image_path, geometry.image_size)
        tensors = capture_forward(model, pixels, sys_ids, text_ids, meta)
        paths.append(write_container(_dump_path(out_dir, image_path, used), meta, tensors))
    return paths
