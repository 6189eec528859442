"""Per-token saliency extraction from encoder attention and decoder probes.

Two independent saliency channels are produced per sample:

* vision: how much encoder attention each image patch receives, read from
  the penultimate encoder layer (CLS row or patch-to-patch mass).
* cross: how much the text tokens attend to each visual token inside the
  language model's first layer, recovered from dumped query/key blocks (or
  a precomputed attention block).

Both channels are raw non-negative scores; normalization and fusion live
in the fuser module.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor_io import (
    ENC_ATTN,
    SCAP_ATTN_BLOCK,
    SCAP_K,
    SCAP_Q,
    SampleMeta,
    TensorDump,
)

VISION_MODES = ("class", "tokens")
CROSS_STRATEGIES = ("all", "last", "max")
DEFAULT_EPSILON = 1e-8


@dataclass
class RawSaliency:
    """Unnormalized per-token scores for one modality.

    values: shape (N,), all entries finite and >= 0.
    modality: 'vision' or 'cross'.
    mode: extraction tag ('class'/'tokens' or the aggregation strategy).
    """

    values: np.ndarray
    modality: str
    mode: str

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1:
            raise ValueError(f"saliency values must be 1-D, got shape {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("saliency values must be finite")
        if np.any(self.values < 0):
            raise ValueError("saliency values must be >= 0")


@dataclass
class AttentionBlock:
    """Text-to-vision attention slice, shape (n_text, n_visual), entries >= 0."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError(f"attention block must be 2-D, got shape {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("attention block must be finite")
        if np.any(self.values < 0):
            raise ValueError("attention block entries must be >= 0")


def vision_saliency(dump: TensorDump, mode: str = "class") -> RawSaliency:
    """Score each patch by encoder attention mass received.

    mode='class': mean over heads of the CLS query row restricted to patch
    columns. mode='tokens': mean over heads and all patch query rows of the
    attention received by each patch column (CLS row and column excluded).
    """
    if mode not in VISION_MODES:
        raise ValueError(f"unknown vision mode {mode!r}, expected one of {VISION_MODES}")
    if ENC_ATTN not in dump.tensors:
        raise ValueError(f"{ENC_ATTN} tensor required for vision saliency")
    attn = dump.tensors[ENC_ATTN].data.astype(np.float64)
    n = dump.meta.n_visual
    if attn.ndim != 3 or attn.shape[1] < 1 + n or attn.shape[2] < 1 + n:
        raise ValueError(
            f"{ENC_ATTN} must be (heads, 1+N, 1+N) with CLS at index 0; got {attn.shape} for N={n}"
        )
    if mode == "class":
        values = attn[:, 0, 1 : 1 + n].mean(axis=0)
    else:
        values = attn[:, 1 : 1 + n, 1 : 1 + n].mean(axis=(0, 1))
    return RawSaliency(values=values, modality="vision", mode=mode)


def causal_head_attention(q: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Head-averaged causal self-attention from raw query/key blocks.

    q, k: shape (heads, S, d_h). Per head computes row-softmax of
    Q K^T / sqrt(d_h) under a strict causal mask (position i attends to
    j <= i only), with row-max subtraction and float64 accumulation.
    Returns the head-averaged (S, S) matrix as float32; entries above the
    diagonal are exactly zero and every row sums to 1.
    """
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    if q.ndim != 3 or q.shape != k.shape:
        raise ValueError(f"q and k must share shape (heads, S, d_h); got {q.shape} vs {k.shape}")
    if q.shape[-1] == 0:
        raise ValueError("head dim must be positive")
    if not (np.all(np.isfinite(q)) and np.all(np.isfinite(k))):
        raise ValueError("q and k must be finite")

    s = q.shape[1]
    scores = np.einsum("hid,hjd->hij", q, k) / math.sqrt(q.shape[-1])
    upper = np.triu(np.ones((s, s), dtype=bool), k=1)
    scores[:, upper] = -np.inf
    scores -= scores.max(axis=-1, keepdims=True)
    np.exp(scores, out=scores)
    scores[:, upper] = 0.0
    scores /= scores.sum(axis=-1, keepdims=True)
    return scores.mean(axis=0).astype(np.float32)


def extract_text_to_vision(attn: np.ndarray, meta: SampleMeta) -> AttentionBlock:
    """Slice the text-query x vision-key block out of a full (S, S) matrix.

    Row i of the result is text token i's attention over the N visual
    positions: attn[n_sys + N + i][n_sys + j].
    """
    attn = np.asarray(attn)
    s = meta.seq_len
    if attn.shape != (s, s):
        raise ValueError(f"attention must be ({s}, {s}) for this sample, got {attn.shape}")
    n0 = meta.n_sys
    t0 = meta.n_sys + meta.n_visual
    return AttentionBlock(values=attn[t0 : t0 + meta.n_text, n0 : n0 + meta.n_visual])


def aggregate_cross(
    block: AttentionBlock, strategy: str = "all", epsilon: float = DEFAULT_EPSILON
) -> RawSaliency:
    """Collapse the text-to-vision block into one score per visual token.

    Rows are renormalized with Norm(z) = z / (sum(z) + epsilon), so an
    all-zero row contributes a zero vector rather than a uniform one.
    'all' averages the normalized rows, 'last' keeps the final row, 'max'
    takes the columnwise maximum before normalizing.
    """
    if strategy not in CROSS_STRATEGIES:
        raise ValueError(f"unknown aggregation strategy {strategy!r}, expected one of {CROSS_STRATEGIES}")
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    a = block.values
    if a.shape[0] == 0:
        raise ValueError("attention block has no text rows")

    def norm(z: np.ndarray) -> np.ndarray:
        return z / (z.sum() + epsilon)

    if strategy == "all":
        values = np.mean([norm(row) for row in a], axis=0)
    elif strategy == "last":
        values = norm(a[-1])
    else:
        values = norm(a.max(axis=0))
    return RawSaliency(values=values, modality="cross", mode=strategy)


def text_to_vision_block(dump: TensorDump) -> AttentionBlock:
    """Produce the text-to-vision block for a dump.

    A precomputed scap_attn_block takes precedence; otherwise the block is
    recovered by running the causal attention probe on scap_q/scap_k and
    slicing.
    """
    if SCAP_ATTN_BLOCK in dump.tensors:
        return AttentionBlock(values=dump.tensors[SCAP_ATTN_BLOCK].data)
    if SCAP_Q in dump.tensors and SCAP_K in dump.tensors:
        attn = causal_head_attention(dump.tensors[SCAP_Q].data, dump.tensors[SCAP_K].data)
        return extract_text_to_vision(attn, dump.meta)
    raise ValueError("dump carries neither scap_attn_block nor scap_q+scap_k")
