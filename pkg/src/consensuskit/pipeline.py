"""End-to-end compression: saliency, fusion, selection, merging, report.

Given a validated tensor dump and a token budget B, the pipeline keeps the
K = B - M most salient visual tokens and condenses the rest into M merged
anchors, emitting exactly B rows plus a machine-readable report. Identical
dump and config always produce byte-identical outputs (timings aside).
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .fuser import FuserConfig, Selection, convex_fuse, recovery_fuse, temperature_normalize, top_k
from .merging import (
    AnchorSet,
    Assignment,
    CompressedSequence,
    TokenProvenance,
    assign_to_anchors,
    farthest_point_sample,
    head_averaged_keys,
    merge_clusters,
)
from .saliency import CROSS_STRATEGIES, VISION_MODES, aggregate_cross, text_to_vision_block, vision_saliency
from .tensor_io import ENC_FEAT, ENC_KEYS, PROJ_TOKENS, TensorDump

# Merged-anchor share of the budget used when merge_count='auto': 20 of
# every 128 budget slots, never less than 1 or more than B-1.
AUTO_MERGE_NUM = 20
AUTO_MERGE_DEN = 128
REPORT_VECTOR_LIMIT = 10_000

FPS_SEED_MODES = ("saliency", "lowest")


@dataclass(frozen=True)
class PipelineConfig:
    """Everything that shapes one compression run."""

    budget: int
    fuser: FuserConfig = field(default_factory=FuserConfig)
    vision_mode: str = "class"
    cross_strategy: str = "all"
    merge_count: int | str = "auto"
    epsilon: float = 1e-8
    fps_seed: str = "saliency"

    def __post_init__(self):
        if self.budget < 1:
            raise ValueError(f"budget must be >= 1, got {self.budget}")
        if self.vision_mode not in VISION_MODES:
            raise ValueError(f"unknown vision mode {self.vision_mode!r}")
        if self.cross_strategy not in CROSS_STRATEGIES:
            raise ValueError(f"unknown cross strategy {self.cross_strategy!r}")
        if self.fps_seed not in FPS_SEED_MODES:
            raise ValueError(f"unknown fps seed mode {self.fps_seed!r}")
        if isinstance(self.merge_count, str):
            if self.merge_count != "auto":
                raise ValueError(f"merge_count must be 'auto' or an integer, got {self.merge_count!r}")
        elif not 0 <= int(self.merge_count) < self.budget:
            raise ValueError(
                f"explicit merge_count must lie in [0, budget), got {self.merge_count} for budget {self.budget}"
            )
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")


def resolve_merge_count(cfg: PipelineConfig) -> int:
    """Number of merged anchor slots M for this run.

    'auto' takes round(B * 20/128), half-up, clamped to [1, B-1]; a budget
    of 1 leaves no room for an anchor and resolves to 0.
    """
    b = cfg.budget
    if cfg.merge_count == "auto":
        raw = int(b * AUTO_MERGE_NUM / AUTO_MERGE_DEN + 0.5)
        return min(max(raw, 1), b - 1)
    return int(cfg.merge_count)


@dataclass
class SelectionReport:
    """Machine-readable account of one run: what was kept, merged, and why."""

    budget: int
    k: int
    m: int
    n_visual: int
    strategy: str
    config: dict
    top: list[int]
    anchors: list[int]
    cluster_sizes: list[int]
    fused: list[float] | None
    provenance: list[dict]
    timings_ms: dict[str, float]

    def as_dict(self) -> dict:
        return asdict(self)


def compress(dump: TensorDump, cfg: PipelineConfig) -> tuple[CompressedSequence, SelectionReport]:
    """Run the full pipeline on one sample.

    Returns exactly cfg.budget output rows: the top K tokens bit-identical
    in rank order, then M merged cluster means in anchor order.
    """
    n = dump.meta.n_visual
    if cfg.budget > n:
        raise ValueError(f"budget {cfg.budget} exceeds the {n} visual tokens available")
    for name in (ENC_FEAT, ENC_KEYS, PROJ_TOKENS):
        if name not in dump.tensors:
            raise ValueError(f"{name} tensor required for compression")

    m = resolve_merge_count(cfg)
    k = cfg.budget - m
    timings: dict[str, float] = {}

    t0 = time.perf_counter()
    s_vision = vision_saliency(dump, cfg.vision_mode)
    timings["vision_saliency"] = (time.perf_counter() - t0) * 1e3

    t0 = time.perf_counter()
    block = text_to_vision_block(dump)
    s_cross = aggregate_cross(block, cfg.cross_strategy, cfg.epsilon)
    timings["cross_saliency"] = (time.perf_counter() - t0) * 1e3

    t0 = time.perf_counter()
    fused_values: list[float] | None = None
    if cfg.fuser.strategy == "convex":
        v_hat = temperature_normalize(s_vision, cfg.fuser.tau_v)
        c_hat = temperature_normalize(s_cross, cfg.fuser.tau_c)
        fused = convex_fuse(v_hat, c_hat, cfg.fuser.alpha)
        selection = top_k(fused, k)
        seed_scores = fused.values
        if n <= REPORT_VECTOR_LIMIT:
            fused_values = [float(x) for x in fused.values]
    else:
        student, teacher = (
            (s_vision, s_cross) if cfg.fuser.student == "vision" else (s_cross, s_vision)
        )
        selection = recovery_fuse(student, teacher, k, cfg.fuser.recovery_rate)
        seed_scores = np.asarray(student.values, dtype=np.float64)
    timings["fuse_select"] = (time.perf_counter() - t0) * 1e3

    t0 = time.perf_counter()
    seq, anchors, assignment = _merge_stage(dump, cfg, selection, seed_scores, m)
    timings["merge"] = (time.perf_counter() - t0) * 1e3

    sizes = _cluster_sizes(anchors, assignment)
    report = SelectionReport(
        budget=cfg.budget,
        k=k,
        m=m,
        n_visual=n,
        strategy=cfg.fuser.strategy,
        config=asdict(cfg),
        top=list(selection.top),
        anchors=list(anchors.anchors),
        cluster_sizes=sizes,
        fused=fused_values,
        provenance=[p.as_dict() for p in seq.provenance],
        timings_ms=timings,
    )
    return seq, report


def _merge_stage(
    dump: TensorDump,
    cfg: PipelineConfig,
    selection: Selection,
    seed_scores: np.ndarray,
    m: int,
) -> tuple[CompressedSequence, AnchorSet, Assignment]:
    proj = dump.tensors[PROJ_TOKENS].data
    if m == 0:
        tokens = proj[selection.top].astype(np.float32, copy=True)
        provenance = [TokenProvenance(kind="retained", source=int(i)) for i in selection.top]
        return CompressedSequence(tokens=tokens, provenance=provenance), AnchorSet([]), Assignment({})

    non_top = selection.non_top
    if cfg.fps_seed == "lowest":
        seed_row = 0  # non_top is ascending, row 0 is the lowest global index
    else:
        # Highest score among dropped tokens; argmax over the ascending
        # non_top ordering makes ties fall to the lower global index.
        seed_row = int(np.argmax(seed_scores[non_top]))

    feats = dump.tensors[ENC_FEAT].data[non_top]
    anchors = farthest_point_sample(feats, m, seed_row, index_map=non_top)
    g = head_averaged_keys(dump.tensors[ENC_KEYS].data)
    assignment = assign_to_anchors(g, non_top, anchors)
    seq = merge_clusters(proj, selection, anchors, assignment)
    return seq, anchors, assignment


def _cluster_sizes(anchors: AnchorSet, assignment: Assignment) -> list[int]:
    sizes = {a: 1 for a in anchors.anchors}
    for _, a in assignment.mapping.items():
        sizes[a] += 1
    return [sizes[a] for a in anchors.anchors]
