"""Forward-hook capture of the tensors a dump carries.

Hooks attach to four module paths: the second-to-last vision block (its
attention for probs and keys, the block itself for output features), the
projector, and the first decoder layer's attention (post-rotary Q/K). The
model is treated as opaque beyond those paths, so the same capture code
works against any module tree with the expected names.
"""

from __future__ import annotations

from typing import Mapping

import numpy as np
import torch
from torch import nn


class CaptureError(Exception):
    """Hook attachment failed or a captured tensor has the wrong shape."""


_HOOK_KEYS = ("vision_attn", "vision_feat", "projector", "decoder_attn")


def expected_dims(meta: Mapping[str, int]) -> dict[str, tuple[int, ...]]:
    """Tensor dims implied by the sample metadata."""
    n = meta["n_visual"]
    s = meta["n_sys"] + n + meta["n_text"]
    return {
        "enc_attn_penult": (meta["heads_enc"], 1 + n, 1 + n),
        "enc_feat_penult": (n, meta["d_enc"]),
        "enc_keys_penult": (meta["heads_enc"], n, meta["d_key"]),
        "proj_tokens": (n, meta["d_llm"]),
        "scap_q": (meta["heads_llm"], s, meta["head_dim_llm"]),
        "scap_k": (meta["heads_llm"], s, meta["head_dim_llm"]),
    }


def _submodule(model: nn.Module, path: str) -> nn.Module:
    try:
        return model.get_submodule(path)
    except AttributeError as e:
        raise CaptureError(f"cannot attach hook: model has no module {path!r}") from e


def _store_output(store: dict, key: str):
    def hook(module, args, output):
        store[key] = output

    return hook


def attach(model: nn.Module, store: dict) -> list:
    """Register capture hooks; returns handles the caller must remove."""
    blocks = _submodule(model, "vision.blocks")
    if len(blocks) < 2:
        raise CaptureError("vision tower has no second-to-last block to tap")
    penult = len(blocks) - 2
    targets = {
        "vision_attn": f"vision.blocks.{penult}.attn",
        "vision_feat": f"vision.blocks.{penult}",
        "projector": "projector",
        "decoder_attn": "layers.0.attn",
    }
    handles = []
    try:
        for key, path in targets.items():
            handles.append(_submodule(model, path).register_forward_hook(_store_output(store, key)))
    except CaptureError:
        for h in handles:
            h.remove()
        raise
    return handles


def _f32(t: torch.Tensor) -> np.ndarray:
    # Precision policy: everything is upcast to float32 at capture time.
    return t.detach().to(torch.float32).cpu().numpy()


def collect(store: Mapping, meta: Mapping[str, int]) -> dict[str, np.ndarray]:
    """Turn raw hook outputs into named float32 arrays, shape-checked.

    Batch dim is stripped and the vision CLS row/column handling follows the
    dump layout: attention keeps CLS at index 0, features and keys drop it.
    """
    missing = [k for k in _HOOK_KEYS if k not in store]
    if missing:
        raise CaptureError(f"forward pass never reached hooked module(s): {', '.join(missing)}")
    _, probs, keys = store["vision_attn"]
    feats = store["vision_feat"]
    proj = store["projector"]
    _, q_rot, k_rot = store["decoder_attn"]

    out = {
        "enc_attn_penult": _f32(probs[0]),
        "enc_feat_penult": _f32(feats[0, 1:, :]),
        "enc_keys_penult": _f32(keys[0, :, 1:, :]),
        "proj_tokens": _f32(proj[0]),
        "scap_q": _f32(q_rot[0]),
        "scap_k": _f32(k_rot[0]),
    }
    expected = expected_dims(meta)
    for name, arr in out.items():
        if arr.shape != expected[name]:
            raise CaptureError(f"{name}: captured shape {tuple(arr.shape)}, metadata implies {expected[name]}")
    return out


def capture_forward(
    model: nn.Module, pixels: torch.Tensor, sys_ids: torch.Tensor, text_ids: torch.Tensor, meta: Mapping[str, int]
) -> dict[str, np.ndarray]:
    """Run one hooked forward pass and return the captured tensors."""
    store: dict = {}
    handles = attach(model, store)
    try:
        with torch.no_grad():
            model(pixels, sys_ids, text_ids)
    finally:
        for h in handles:
            h.remove()
    return collect(store, meta)
