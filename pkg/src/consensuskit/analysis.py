"""Study metrics, analytical cost estimators, and synthetic corpora.

Everything here is exact arithmetic or seeded generation: no estimator
touches a model, and a given SynthSpec always regenerates the identical
corpus.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

import numpy as np

from .fuser import SaliencyDistribution, convex_fuse, rank_descending, recovery_fuse, temperature_normalize, top_k
from .saliency import RawSaliency

STUDY_METHODS = ("vision", "cross", "recovery", "convex")


@dataclass(frozen=True)
class CostModel:
    """Decoder geometry needed by the analytical estimators."""

    n_layers: int
    n_kv_heads: int
    head_dim: int
    bytes_per_elem: int
    hidden: int
    ffn: int

    def __post_init__(self):
        for name, value in asdict(self).items():
            if value <= 0:
                raise ValueError(f"{name} must be positive, got {value}")


PRESETS: dict[str, CostModel] = {
    "llava7b": CostModel(n_layers=32, n_kv_heads=32, head_dim=128, bytes_per_elem=2, hidden=4096, ffn=11008),
    "llava13b": CostModel(n_layers=40, n_kv_heads=40, head_dim=128, bytes_per_elem=2, hidden=5120, ffn=13824),
}


def agreement(i_s: Iterable[int], i_t: Iterable[int], k: int) -> float:
    """Fraction of the k selected indices two selectors share."""
    a, b = set(i_s), set(i_t)
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if len(a) != k or len(b) != k:
        raise ValueError(f"both index sets must have exactly k={k} distinct members, got {len(a)} and {len(b)}")
    return len(a & b) / k


def correction_factor(s_student, s_teacher, k: int, r: float) -> float:
    """How little of the teacher ranking the correction slots consume.

    With M_tok = floor(r*k) reserved slots and I_1 the student's top
    (k - M_tok), c is the length of the shortest teacher-ranking prefix
    containing M_tok indices outside I_1. CF = (k - c) / (k - M_tok):
    1 when the teacher's very top fills every slot, 0 when the scan must
    reach depth k (identical rankings). r=0 reserves nothing, giving c=0
    and CF=1 by convention; r=1 leaves no student set and is an error.
    """
    sv = np.asarray(getattr(s_student, "values", s_student), dtype=np.float64)
    tv = np.asarray(getattr(s_teacher, "values", s_teacher), dtype=np.float64)
    if sv.shape != tv.shape:
        raise ValueError(f"student/teacher length mismatch: {sv.shape} vs {tv.shape}")
    if not 1 <= k <= sv.size:
        raise ValueError(f"k must lie in [1, {sv.size}], got {k}")
    if not 0.0 <= r <= 1.0:
        raise ValueError(f"recovery rate must lie in [0, 1], got {r}")
    if r == 1.0:
        raise ValueError("r=1 leaves no student selection to correct")

    m_tok = math.floor(r * k)
    if m_tok == 0:
        return 1.0
    i1 = set(int(i) for i in rank_descending(sv)[: k - m_tok])
    found = 0
    c = 0
    for pos, idx in enumerate(rank_descending(tv), start=1):
        if int(idx) not in i1:
            found += 1
            if found == m_tok:
                c = pos
                break
    return (k - c) / (k - m_tok)


def kv_cache_mb(model: CostModel, seq_len: int) -> float:
    """Decoder KV cache size in MiB for one sequence of seq_len tokens."""
    if seq_len < 0:
        raise ValueError(f"seq_len must be >= 0, got {seq_len}")
    return (
        2.0
        * model.n_layers
        * model.n_kv_heads
        * seq_len
        * model.head_dim
        * model.bytes_per_elem
        / 2**20
    )


def flops_estimate(model: CostModel, seq_len: int) -> float:
    """Rough decoder prefill cost in teraflops.

    Counts projections (4*s*d^2), attention score/value matmuls (2*s^2*d),
    and the MLP (6*s*d*m) per layer. A coarse planning number: it ignores
    normalization, embeddings, and the encoder entirely.
    """
    if seq_len < 0:
        raise ValueError(f"seq_len must be >= 0, got {seq_len}")
    s, d, m = float(seq_len), float(model.hidden), float(model.ffn)
    per_layer = 4.0 * s * d * d + 2.0 * s * s * d + 6.0 * s * d * m
    return model.n_layers * per_layer / 1e12


@dataclass(frozen=True)
class SynthSpec:
    """Recipe for a seeded synthetic saliency sample.

    Ground-truth importance is a normalized lognormal draw (sharpness is
    its sigma). Each token is independently exclusive with probability
    `complementarity` (half hidden from vision, half from cross); each
    modality observes the ground truth with its exclusive tokens zeroed
    and elementwise lognormal multiplicative noise applied.
    """

    n: int
    sharpness: float = 1.0
    noise_vision: float = 0.0
    noise_cross: float = 0.0
    complementarity: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.n < 1:
            raise ValueError(f"n must be >= 1, got {self.n}")
        if self.sharpness < 0 or self.noise_vision < 0 or self.noise_cross < 0:
            raise ValueError("sharpness and noise levels must be >= 0")
        if not 0.0 <= self.complementarity <= 1.0:
            raise ValueError(f"complementarity must lie in [0, 1], got {self.complementarity}")


def generate_synth(spec: SynthSpec) -> tuple[SaliencyDistribution, RawSaliency, RawSaliency]:
    """Draw (ground_truth, vision observation, cross observation).

    Deterministic in spec.seed. With zero noise and zero complementarity
    both observations equal the ground truth up to normalization; with
    complementarity 1 the two exclusive supports are disjoint.
    """
    rng = np.random.default_rng(spec.seed)
    gt = rng.lognormal(0.0, spec.sharpness, spec.n)
    gt = gt / gt.sum()

    exclusive = rng.random(spec.n) < spec.complementarity
    vision_side = rng.random(spec.n) < 0.5
    hidden_from_vision = exclusive & ~vision_side
    hidden_from_cross = exclusive & vision_side

    noise_v = rng.lognormal(0.0, spec.noise_vision, spec.n)
    noise_c = rng.lognormal(0.0, spec.noise_cross, spec.n)
    s_v = np.where(hidden_from_vision, 0.0, gt * noise_v)
    s_c = np.where(hidden_from_cross, 0.0, gt * noise_c)
    return (
        SaliencyDistribution(values=gt, temperature=None),
        RawSaliency(values=s_v, modality="vision", mode="synth"),
        RawSaliency(values=s_c, modality="cross", mode="synth"),
    )


@dataclass
class SynthSample:
    """One study input: optional ground truth plus the two observations."""

    sample_id: int | str
    ground_truth: SaliencyDistribution | None
    vision: RawSaliency
    cross: RawSaliency


@dataclass
class StudyRecord:
    """Per-sample study metrics for one (k, r, student) setting."""

    sample: int | str
    k: int
    recovery_rate: float
    student: str
    agreement: float
    disagreement: float
    correction_factor: float | None
    recall_vision: float | None = None
    recall_cross: float | None = None
    recall_recovery: float | None = None
    recall_convex: float | None = None

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class StudyResult:
    """Study records plus corpus means."""

    records: list[StudyRecord]
    mean_agreement: float
    mean_correction: float | None
    mean_recall: dict[str, float | None]


def _recall(gt: SaliencyDistribution | None, indices: Sequence[int]) -> float | None:
    if gt is None:
        return None
    return float(gt.values[list(indices)].sum())


def study_record(
    sample: SynthSample, k: int, r: float, student: str = "vision", alpha: float = 0.7
) -> StudyRecord:
    """Compute one sample's agreement, correction factor, and recalls."""
    if student == "vision":
        s_s, s_t = sample.vision, sample.cross
    elif student == "cross":
        s_s, s_t = sample.cross, sample.vision
    else:
        raise ValueError(f"unknown student {student!r}")

    i_v = [int(i) for i in rank_descending(sample.vision)[:k]]
    i_c = [int(i) for i in rank_descending(sample.cross)[:k]]
    i_s, i_t = (i_v, i_c) if student == "vision" else (i_c, i_v)
    agree = agreement(i_s, i_t, k)
    cf = correction_factor(s_s, s_t, k, r) if r < 1.0 else None

    recovered = recovery_fuse(s_s, s_t, k, r).top
    fused = convex_fuse(
        temperature_normalize(sample.vision, 1.0),
        temperature_normalize(sample.cross, 1.0),
        alpha,
    )
    convex_top = top_k(fused, k).top

    gt = sample.ground_truth
    return StudyRecord(
        sample=sample.sample_id,
        k=k,
        recovery_rate=r,
        student=student,
        agreement=agree,
        disagreement=1.0 - agree,
        correction_factor=cf,
        recall_vision=_recall(gt, i_v),
        recall_cross=_recall(gt, i_c),
        recall_recovery=_recall(gt, recovered),
        recall_convex=_recall(gt, convex_top),
    )


def study_recovery(
    samples: Sequence[SynthSample], k: int, r: float, student: str = "vision", alpha: float = 0.7
) -> StudyResult:
    """Run the per-sample study over a corpus and aggregate means.

    With r=0 the recovery selection is exactly the student's top-k, so
    recall_recovery equals the student's recall.
    """
    records = [study_record(s, k, r, student, alpha) for s in samples]
    if not records:
        raise ValueError("empty corpus")
    cfs = [rec.correction_factor for rec in records if rec.correction_factor is not None]
    mean_recall: dict[str, float | None] = {}
    for method in STUDY_METHODS:
        vals = [getattr(rec, f"recall_{method}") for rec in records]
        mean_recall[method] = None if any(v is None for v in vals) else float(np.mean(vals))
    return StudyResult(
        records=records,
        mean_agreement=float(np.mean([rec.agreement for rec in records])),
        mean_correction=float(np.mean(cfs)) if cfs else None,
        mean_recall=mean_recall,
    )
