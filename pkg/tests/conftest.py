"""Shared builders for synthetic tensor dumps used across the suite."""

from __future__ import annotations

import numpy as np
import pytest

from consensuskit import SampleMeta, Tensor, TensorDump


def softmax_rows(x: np.ndarray) -> np.ndarray:
    x = x - x.max(axis=-1, keepdims=True)
    e = np.exp(x)
    return e / e.sum(axis=-1, keepdims=True)


def make_meta(
    n_visual=6,
    grid=(2, 3),
    n_text=2,
    n_sys=1,
    heads_enc=2,
    d_enc=4,
    d_key=3,
    heads_llm=2,
    head_dim_llm=4,
) -> SampleMeta:
    return SampleMeta(
        n_visual=n_visual,
        n_text=n_text,
        n_sys=n_sys,
        grid_h=grid[0],
        grid_w=grid[1],
        d_llm=heads_llm * head_dim_llm,
        d_enc=d_enc,
        d_key=d_key,
        heads_llm=heads_llm,
        heads_enc=heads_enc,
        head_dim_llm=head_dim_llm,
    )


def make_dump(meta: SampleMeta | None = None, seed: int = 0, use_block: bool = False) -> TensorDump:
    """Random but valid dump: row-stochastic encoder attention, normal features."""
    meta = meta or make_meta()
    rng = np.random.default_rng(seed)
    n, s = meta.n_visual, meta.seq_len

    attn = softmax_rows(rng.normal(size=(meta.heads_enc, 1 + n, 1 + n))).astype(np.float32)
    tensors = {
        "enc_attn_penult": Tensor("enc_attn_penult", attn.shape, attn),
        "enc_feat_penult": Tensor("enc_feat_penult", (n, meta.d_enc), rng.normal(size=(n, meta.d_enc))),
        "enc_keys_penult": Tensor(
            "enc_keys_penult", (meta.heads_enc, n, meta.d_key), rng.normal(size=(meta.heads_enc, n, meta.d_key))
        ),
        "proj_tokens": Tensor("proj_tokens", (n, meta.d_llm), rng.normal(size=(n, meta.d_llm))),
    }
    if use_block:
        block = rng.random(size=(meta.n_text, n)) / n
        tensors["scap_attn_block"] = Tensor("scap_attn_block", block.shape, block)
    else:
        scale = 1.0 / np.sqrt(meta.head_dim_llm)
        q = rng.normal(size=(meta.heads_llm, s, meta.head_dim_llm)) * scale
        k = rng.normal(size=(meta.heads_llm, s, meta.head_dim_llm)) * scale
        tensors["scap_q"] = Tensor("scap_q", q.shape, q)
        tensors["scap_k"] = Tensor("scap_k", k.shape, k)
    return TensorDump(meta=meta, tensors=tensors)


def make_large_dump(seed: int = 0) -> TensorDump:
    """Full-geometry sample: 576 patches on a 24x24 grid, small model dims."""
    meta = make_meta(
        n_visual=576,
        grid=(24, 24),
        n_text=8,
        n_sys=5,
        heads_enc=2,
        d_enc=16,
        d_key=8,
        heads_llm=2,
        head_dim_llm=16,
    )
    return make_dump(meta, seed=seed)


@pytest.fixture
def toy_dump() -> TensorDump:
    return make_dump(seed=7)


@pytest.fixture
def large_dump() -> TensorDump:
    return make_large_dump(seed=11)
