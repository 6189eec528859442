"""Encoder-guided merging of the tokens that fall outside the keep set.

Dropped tokens are not discarded: a small set of anchors is chosen among
them by farthest-point sampling over encoder patch features, every other
dropped token is assigned to its most similar anchor in head-averaged key
space, and each anchor's cluster is replaced by its mean projected token.
Retained tokens pass through bit-identical.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .fuser import Selection
from .tensor_io import SampleMeta, Tensor, write_container

FPS_EPSILON = 1e-8
COMPRESSED_TOKENS = "compressed_tokens"


@dataclass
class AnchorSet:
    """Ordered anchor token indices (global, drawn from the dropped set)."""

    anchors: list[int]

    def __post_init__(self):
        if len(set(self.anchors)) != len(self.anchors):
            raise ValueError("anchors must be distinct")


@dataclass
class Assignment:
    """Maps each dropped non-anchor token to the anchor that absorbs it."""

    mapping: dict[int, int]


@dataclass(frozen=True)
class TokenProvenance:
    """Where one output row came from.

    kind='retained': source is the original token index.
    kind='merged': anchor plus the full member list (anchor included).
    """

    kind: str
    source: int | None = None
    anchor: int | None = None
    members: tuple[int, ...] | None = None

    def as_dict(self) -> dict:
        if self.kind == "retained":
            return {"kind": "retained", "source": self.source}
        return {"kind": "merged", "anchor": self.anchor, "members": list(self.members)}


@dataclass
class CompressedSequence:
    """Final (K+M, d_llm) float32 token matrix with per-row provenance."""

    tokens: np.ndarray
    provenance: list[TokenProvenance]

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.float32)
        if self.tokens.ndim != 2:
            raise ValueError(f"tokens must be 2-D, got shape {self.tokens.shape}")
        if self.tokens.shape[0] != len(self.provenance):
            raise ValueError(
                f"{self.tokens.shape[0]} rows but {len(self.provenance)} provenance records"
            )


def _normalize_rows(x: np.ndarray, eps: float) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    norms = np.sqrt((x * x).sum(axis=1, keepdims=True))
    return x / (norms + eps)


def farthest_point_sample(
    features: np.ndarray,
    m: int,
    seed_index: int,
    index_map: Sequence[int] | None = None,
) -> AnchorSet:
    """Greedy max-min anchor selection over l2-normalized feature rows.

    The first anchor is seed_index (a row of `features`); each subsequent
    anchor is the row maximizing the minimum Euclidean distance to all
    previously chosen rows, ties resolved toward the lower row index.
    Distances are computed in float64 on rows normalized as v/(||v||+eps).
    index_map translates row positions to global token indices; without it
    the returned anchors are row positions. m equal to the row count
    exhausts every row.
    """
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 2:
        raise ValueError(f"features must be 2-D, got shape {feats.shape}")
    rows = feats.shape[0]
    if not 1 <= m <= rows:
        raise ValueError(f"m must lie in [1, {rows}], got {m}")
    if not 0 <= seed_index < rows:
        raise ValueError(f"seed_index must lie in [0, {rows}), got {seed_index}")
    if index_map is not None and len(index_map) != rows:
        raise ValueError(f"index_map has {len(index_map)} entries for {rows} rows")

    unit = _normalize_rows(feats, FPS_EPSILON)
    chosen = [seed_index]
    min_d2 = ((unit - unit[seed_index]) ** 2).sum(axis=1)
    min_d2[seed_index] = -np.inf
    for _ in range(m - 1):
        nxt = int(np.argmax(min_d2))  # argmax takes the first max: lower row wins ties
        chosen.append(nxt)
        min_d2 = np.minimum(min_d2, ((unit - unit[nxt]) ** 2).sum(axis=1))
        min_d2[nxt] = -np.inf
    if index_map is not None:
        return AnchorSet(anchors=[int(index_map[i]) for i in chosen])
    return AnchorSet(anchors=chosen)


def head_averaged_keys(keys: np.ndarray) -> np.ndarray:
    """Collapse (heads, N, d_k) keys to one unit vector per token.

    G_j is the head-mean key of token j scaled to unit l2 norm; a token
    whose mean key is exactly zero keeps a zero row.
    """
    k = np.asarray(keys, dtype=np.float64)
    if k.ndim != 3:
        raise ValueError(f"keys must be (heads, N, d_k), got shape {k.shape}")
    g = k.mean(axis=0)
    norms = np.sqrt((g * g).sum(axis=1, keepdims=True))
    out = np.divide(g, norms, out=np.zeros_like(g), where=norms > 0)
    return out


def assign_to_anchors(
    g: np.ndarray, non_top: Sequence[int], anchors: AnchorSet
) -> Assignment:
    """Send each dropped non-anchor token to its most similar anchor.

    Similarity is the dot product of head-averaged unit keys; ties resolve
    toward the anchor that appears earlier in the AnchorSet order.
    """
    if not anchors.anchors:
        raise ValueError("anchor set is empty")
    g = np.asarray(g, dtype=np.float64)
    anchor_idx = list(anchors.anchors)
    members = [u for u in non_top if u not in set(anchor_idx)]
    if not members:
        return Assignment(mapping={})
    sims = g[members] @ g[anchor_idx].T
    best = np.argmax(sims, axis=1)  # first max along the row: earlier anchor wins ties
    return Assignment(mapping={int(u): int(anchor_idx[b]) for u, b in zip(members, best)})


def merge_clusters(
    proj_tokens: np.ndarray,
    selection: Selection,
    anchors: AnchorSet,
    assignment: Assignment,
) -> CompressedSequence:
    """Assemble the compressed sequence: retained rows then cluster means.

    Retained rows are proj_tokens[selection.top] in selection order,
    bit-identical. Each anchor then contributes the mean of its cluster
    C(a) = {a} plus its assigned members, accumulated in float64 and
    stored as float32, in AnchorSet order.
    """
    proj = np.asarray(proj_tokens)
    if proj.ndim != 2:
        raise ValueError(f"proj_tokens must be 2-D, got shape {proj.shape}")
    clusters: dict[int, list[int]] = {a: [a] for a in anchors.anchors}
    for u, a in assignment.mapping.items():
        if a not in clusters:
            raise ValueError(f"assignment targets unknown anchor {a}")
        clusters[a].append(u)

    rows = [proj[selection.top].astype(np.float32, copy=True)]
    provenance = [TokenProvenance(kind="retained", source=int(i)) for i in selection.top]
    merged = np.empty((len(anchors.anchors), proj.shape[1]), dtype=np.float32)
    for j, a in enumerate(anchors.anchors):
        members = [a] + sorted(u for u in clusters[a] if u != a)
        merged[j] = proj[members].astype(np.float64).mean(axis=0).astype(np.float32)
        provenance.append(
            TokenProvenance(kind="merged", anchor=int(a), members=tuple(int(u) for u in members))
        )
    rows.append(merged)
    return CompressedSequence(tokens=np.vstack(rows), provenance=provenance)


def write_compressed(
    path: str | Path, seq: CompressedSequence, meta: SampleMeta
) -> None:
    """Serialize a compressed sequence into the CDT1 container.

    The file carries the source sample's meta plus a single
    `compressed_tokens` tensor; it is a container file, not a full input
    dump (no encoder or probe tensors).
    """
    t = Tensor(COMPRESSED_TOKENS, seq.tokens.shape, seq.tokens)
    write_container(path, meta, {COMPRESSED_TOKENS: t})
