"""Saliency normalization, fusion, and token selection.

Selection is always deterministic: scores rank descending and ties break
toward the lower token index, so permuting equal-score tokens or rescaling
a saliency channel never changes which tokens survive.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .saliency import RawSaliency

STRATEGIES = ("convex", "recovery")
STUDENTS = ("vision", "cross")
NORM_TOL = 1e-6


def _values(s) -> np.ndarray:
    """Accept RawSaliency, SaliencyDistribution, or a bare array."""
    v = np.asarray(getattr(s, "values", s), dtype=np.float64)
    if v.ndim != 1:
        raise ValueError(f"expected a 1-D score vector, got shape {v.shape}")
    return v


def rank_descending(values) -> np.ndarray:
    """Indices sorted by descending score; equal scores keep ascending index."""
    v = _values(values)
    return np.argsort(-v, kind="stable")


@dataclass
class SaliencyDistribution:
    """Normalized saliency: entries >= 0 summing to 1 (or 0 when degenerate).

    A convex combination of a degenerate all-zero channel with a normalized
    one yields an intermediate total equal to the mixing weight; the class
    accepts any non-negative finite mass so that case stays representable.
    """

    values: np.ndarray
    temperature: float | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1:
            raise ValueError(f"distribution values must be 1-D, got shape {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("distribution values must be finite")
        if np.any(self.values < 0):
            raise ValueError("distribution values must be >= 0")

    @property
    def total(self) -> float:
        return float(self.values.sum())


@dataclass(frozen=True)
class FuserConfig:
    """Fusion settings: strategy plus its knobs."""

    strategy: str = "convex"
    alpha: float = 0.7
    tau_v: float = 1.0
    tau_c: float = 1.0
    student: str = "vision"
    recovery_rate: float = 0.1

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}, expected one of {STRATEGIES}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.tau_v <= 0 or self.tau_c <= 0:
            raise ValueError("temperatures must be positive")
        if self.student not in STUDENTS:
            raise ValueError(f"unknown student {self.student!r}, expected one of {STUDENTS}")
        if not 0.0 <= self.recovery_rate <= 1.0:
            raise ValueError(f"recovery_rate must lie in [0, 1], got {self.recovery_rate}")


@dataclass
class Selection:
    """Result of picking k tokens out of N.

    top: selected indices, ordered by rank (or student-then-teacher order
    for recovery). non_top: the ascending complement. fused: the fused
    distribution that drove the ranking, present only for convex fusion.
    """

    top: list[int]
    non_top: list[int]
    fused: SaliencyDistribution | None = field(default=None)


def temperature_normalize(s, tau: float) -> SaliencyDistribution:
    """Sharpen or flatten scores: out_j = s_j^(1/tau) / sum_k s_k^(1/tau).

    tau < 1 sharpens, tau > 1 flattens, tau = 1 is plain normalization.
    An all-zero input stays all-zero (0^(1/tau) is taken as 0). Scores are
    pre-scaled by their maximum before exponentiation, which leaves the
    result unchanged but avoids overflow for extreme 1/tau.
    """
    v = _values(s)
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    if np.any(v < 0):
        raise ValueError("temperature normalization requires non-negative scores")
    if not np.all(np.isfinite(v)):
        raise ValueError("scores must be finite")
    m = v.max() if v.size else 0.0
    if m == 0.0:
        return SaliencyDistribution(values=np.zeros_like(v), temperature=tau)
    powered = (v / m) ** (1.0 / tau)
    return SaliencyDistribution(values=powered / powered.sum(), temperature=tau)


def convex_fuse(
    v: SaliencyDistribution, c: SaliencyDistribution, alpha: float = 0.7
) -> SaliencyDistribution:
    """Blend two normalized channels: fused = alpha*v + (1-alpha)*c.

    alpha=1 returns v exactly and alpha=0 returns c exactly; when both
    inputs sum to 1 the output does too (within float rounding).
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    if v.values.shape != c.values.shape:
        raise ValueError(f"channel length mismatch: {v.values.shape} vs {c.values.shape}")
    if alpha == 1.0:
        fused = v.values.copy()
    elif alpha == 0.0:
        fused = c.values.copy()
    else:
        fused = alpha * v.values + (1.0 - alpha) * c.values
    return SaliencyDistribution(values=fused, temperature=None)


def top_k(s: SaliencyDistribution, k: int) -> Selection:
    """Keep the k highest-scoring indices.

    top is ordered by descending score (ties toward the lower index);
    non_top is the ascending complement.
    """
    v = s.values
    n = v.size
    if not 1 <= k <= n:
        raise ValueError(f"k must lie in [1, {n}], got {k}")
    order = rank_descending(v)
    return Selection(
        top=[int(i) for i in order[:k]],
        non_top=sorted(int(i) for i in order[k:]),
        fused=s,
    )


def recovery_fuse(s_student, s_teacher, k: int, r: float) -> Selection:
    """Student-led selection with a teacher-corrected tail.

    M_tok = floor(r*k) slots are reserved for correction. The student keeps
    its top (k - M_tok) indices (I_1); the teacher's full descending ranking
    is then scanned in order and the first M_tok indices outside I_1 fill
    the reserved slots. Scanning the whole ranking (not just the teacher's
    top k) guarantees the output always holds exactly k indices. r=0
    returns the student's top-k unchanged; r=1 ignores the student.
    """
    sv = _values(s_student)
    tv = _values(s_teacher)
    if sv.shape != tv.shape:
        raise ValueError(f"student/teacher length mismatch: {sv.shape} vs {tv.shape}")
    n = sv.size
    if not 1 <= k <= n:
        raise ValueError(f"k must lie in [1, {n}], got {k}")
    if not 0.0 <= r <= 1.0:
        raise ValueError(f"recovery rate must lie in [0, 1], got {r}")

    m_tok = math.floor(r * k)
    keep = k - m_tok
    i1 = [int(i) for i in rank_descending(sv)[:keep]]
    chosen = set(i1)
    i2: list[int] = []
    for idx in rank_descending(tv):
        if len(i2) == m_tok:
            break
        idx = int(idx)
        if idx not in chosen:
            i2.append(idx)
    top = i1 + i2
    in_top = set(top)
    return Selection(
        top=top,
        non_top=[i for i in range(n) if i not in in_top],
        fused=None,
    )
