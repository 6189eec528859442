"""Saliency extraction: encoder attention modes and the causal probe."""

from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from consensuskit import (
    AttentionBlock,
    RawSaliency,
    Tensor,
    aggregate_cross,
    causal_head_attention,
    extract_text_to_vision,
    text_to_vision_block,
    vision_saliency,
)
from conftest import make_dump, make_meta, softmax_rows


def _attn_dump(attn: np.ndarray):
    """Wrap an explicit (heads, 1+N, 1+N) attention matrix in a dump."""
    heads, rows, _ = attn.shape
    n = rows - 1
    meta = make_meta(n_visual=n, grid=(1, n), heads_enc=heads)
    dump = make_dump(meta)
    dump.tensors["enc_attn_penult"] = Tensor("enc_attn_penult", attn.shape, attn)
    return dump


def test_class_mode_reads_cls_row():
    attn = np.zeros((1, 4, 4))
    attn[0, 0] = [0.1, 0.2, 0.3, 0.4]  # CLS row: self then three patches
    attn[0, 1:] = 0.25
    s = vision_saliency(_attn_dump(attn), "class")
    np.testing.assert_allclose(s.values, [0.2, 0.3, 0.4], atol=1e-7)
    assert s.modality == "vision" and s.mode == "class"


def test_class_mode_averages_heads():
    attn = np.full((2, 4, 4), 0.25)
    attn[0, 0] = [0.0, 1.0, 0.0, 0.0]
    attn[1, 0] = [0.0, 0.0, 1.0, 0.0]
    s = vision_saliency(_attn_dump(attn), "class")
    np.testing.assert_allclose(s.values, [0.5, 0.5, 0.0], atol=1e-7)


def test_tokens_mode_column_means_exclude_cls():
    # 3 patches, 1 head; rows are CLS + 3 patch queries
    attn = np.array(
        [
            [
                [0.25, 0.25, 0.25, 0.25],  # CLS row, must be ignored
                [0.1, 0.5, 0.2, 0.2],
                [0.4, 0.1, 0.3, 0.2],
                [0.0, 0.3, 0.3, 0.4],
            ]
        ]
    )
    s = vision_saliency(_attn_dump(attn), "tokens")
    expected = attn[0, 1:, 1:].mean(axis=0)
    np.testing.assert_allclose(s.values, expected, atol=1e-12)


def test_unknown_mode_rejected(toy_dump):
    with pytest.raises(ValueError, match="mode"):
        vision_saliency(toy_dump, "cls")


def test_undersized_attention_rejected():
    dump = make_dump()
    dump.tensors["enc_attn_penult"] = Tensor(
        "enc_attn_penult", (1, 3, 3), softmax_rows(np.zeros((1, 3, 3)))
    )
    with pytest.raises(ValueError, match="CLS"):
        vision_saliency(dump, "class")


# ---------------------------------------------------------------- causal probe


def test_causal_zero_scores_single_and_pair():
    out = causal_head_attention(np.zeros((1, 1, 2)), np.zeros((1, 1, 2)))
    np.testing.assert_array_equal(out, [[1.0]])
    out = causal_head_attention(np.zeros((1, 2, 2)), np.zeros((1, 2, 2)))
    np.testing.assert_allclose(out, [[1.0, 0.0], [0.5, 0.5]], atol=1e-7)
    assert out[0, 1] == 0.0


def test_causal_hand_oracle_s3():
    # single head, d_h = 1: logits are plain products of scalars
    q = np.array([[[1.0], [2.0], [0.5]]])
    k = np.array([[[1.0], [-1.0], [2.0]]])
    out = causal_head_attention(q, k)

    def row_softmax(logits):
        m = max(logits)
        e = [math.exp(x - m) for x in logits]
        z = sum(e)
        return [x / z for x in e]

    np.testing.assert_allclose(out[0, :1], row_softmax([1.0]), atol=1e-6)
    np.testing.assert_allclose(out[1, :2], row_softmax([2.0, -2.0]), atol=1e-6)
    np.testing.assert_allclose(out[2, :3], row_softmax([0.5 / 1.0, -0.5, 1.0]), atol=1e-6)
    assert out[0, 1] == 0.0 and out[0, 2] == 0.0 and out[1, 2] == 0.0


def test_causal_rows_stochastic_and_strictly_masked():
    rng = np.random.default_rng(0)
    q = rng.normal(size=(3, 17, 5))
    k = rng.normal(size=(3, 17, 5))
    out = causal_head_attention(q, k)
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-5)
    upper = np.triu(np.ones((17, 17), dtype=bool), k=1)
    assert np.all(out[upper] == 0.0)
    assert out.dtype == np.float32


def test_causal_overflow_safe():
    q = np.full((1, 4, 2), 200.0)
    k = np.full((1, 4, 2), 200.0)
    out = causal_head_attention(q, k)
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-5)


def test_causal_shape_mismatch_rejected():
    with pytest.raises(ValueError, match="shape"):
        causal_head_attention(np.zeros((1, 3, 2)), np.zeros((1, 4, 2)))
    with pytest.raises(ValueError, match="head dim"):
        causal_head_attention(np.zeros((1, 3, 0)), np.zeros((1, 3, 0)))


# ---------------------------------------------------------------- block extraction


def test_extract_block_index_arithmetic():
    meta = make_meta(n_visual=3, grid=(1, 3), n_sys=1, n_text=2)  # S = 6
    attn = np.arange(36, dtype=np.float64).reshape(6, 6)
    attn = attn / attn.sum(axis=1, keepdims=True)
    block = extract_text_to_vision(attn, meta)
    np.testing.assert_array_equal(block.values, attn[4:6, 1:4])


def test_extract_block_shape_checked():
    meta = make_meta(n_visual=3, grid=(1, 3), n_sys=1, n_text=2)
    with pytest.raises(ValueError, match="attention"):
        extract_text_to_vision(np.zeros((5, 5)), meta)


# ---------------------------------------------------------------- aggregation


def test_aggregate_all_hand_oracle():
    block = AttentionBlock(np.array([[0.2, 0.3, 0.5], [0.5, 0.3, 0.2]]))
    s = aggregate_cross(block, "all")
    np.testing.assert_allclose(s.values, [0.35, 0.3, 0.35], atol=1e-6)
    assert s.modality == "cross" and s.mode == "all"


def test_aggregate_last_hand_oracle():
    block = AttentionBlock(np.array([[0.2, 0.3, 0.5], [0.5, 0.3, 0.2]]))
    s = aggregate_cross(block, "last")
    np.testing.assert_allclose(s.values, [0.5, 0.3, 0.2], atol=1e-6)


def test_aggregate_max_hand_oracle():
    block = AttentionBlock(np.array([[0.2, 0.3, 0.5], [0.5, 0.3, 0.2]]))
    s = aggregate_cross(block, "max")
    np.testing.assert_allclose(s.values, np.array([0.5, 0.3, 0.5]) / 1.3, atol=1e-6)


def test_aggregate_zero_row_contributes_zero_not_uniform():
    block = AttentionBlock(np.array([[0.0, 0.0, 0.0], [0.6, 0.2, 0.2]]))
    s = aggregate_cross(block, "all")
    np.testing.assert_allclose(s.values, np.array([0.6, 0.2, 0.2]) / 2, atol=1e-6)
    s_last = aggregate_cross(AttentionBlock(np.zeros((1, 3))), "last")
    np.testing.assert_array_equal(s_last.values, np.zeros(3))


def test_aggregate_rejects_unknown_strategy():
    block = AttentionBlock(np.ones((1, 3)))
    with pytest.raises(ValueError, match="strategy"):
        aggregate_cross(block, "mean")


@settings(max_examples=200, deadline=None)
@given(
    st.integers(min_value=1, max_value=6),
    st.integers(min_value=2, max_value=8),
    st.integers(min_value=0, max_value=2**32 - 1),
)
def test_aggregate_all_permutation_equivariant(rows, cols, seed):
    rng = np.random.default_rng(seed)
    block = rng.random((rows, cols))
    perm = rng.permutation(cols)
    s = aggregate_cross(AttentionBlock(block), "all").values
    s_perm = aggregate_cross(AttentionBlock(block[:, perm]), "all").values
    np.testing.assert_allclose(s_perm, s[perm], atol=1e-12)


@settings(max_examples=200, deadline=None)
@given(st.integers(min_value=0, max_value=2**32 - 1))
def test_aggregate_outputs_near_normalized(seed):
    rng = np.random.default_rng(seed)
    block = AttentionBlock(rng.random((3, 7)) + 0.01)
    for strategy in ("all", "last", "max"):
        total = aggregate_cross(block, strategy).values.sum()
        assert abs(total - 1.0) < 1e-6


# ---------------------------------------------------------------- dump-level plumbing


def test_block_precedence_over_qk():
    dump = make_dump()
    n_text, n = dump.meta.n_text, dump.meta.n_visual
    explicit = np.full((n_text, n), 1.0 / n)
    dump.tensors["scap_attn_block"] = Tensor("scap_attn_block", explicit.shape, explicit)
    block = text_to_vision_block(dump)
    np.testing.assert_allclose(block.values, explicit, atol=1e-7)


def test_qk_path_matches_manual_probe(toy_dump):
    q = toy_dump.tensors["scap_q"].data
    k = toy_dump.tensors["scap_k"].data
    manual = extract_text_to_vision(causal_head_attention(q, k), toy_dump.meta)
    block = text_to_vision_block(toy_dump)
    np.testing.assert_array_equal(block.values, manual.values)


def test_missing_probe_inputs_rejected():
    dump = make_dump()
    del dump.tensors["scap_q"]
    del dump.tensors["scap_k"]
    with pytest.raises(ValueError, match="scap"):
        text_to_vision_block(dump)


def test_raw_saliency_rejects_negative_and_non_finite():
    with pytest.raises(ValueError):
        RawSaliency(values=np.array([0.1, -0.2]), modality="vision", mode="class")
    with pytest.raises(ValueError):
        RawSaliency(values=np.array([0.1, np.nan]), modality="vision", mode="class")
