"""Miniature randomly initialized vision-language models.

Desk-scale stand-ins wired like a 336px LLaVA-1.5 stack: a ViT tower with
a CLS token, conv patch embedding and pre-norm blocks; a two-layer GELU
projector fed by the second-to-last tower block; byte-level text
embeddings; and Llama-style decoder layers (RMSNorm, rotary position
embeddings on Q/K, SwiGLU MLP). Weights are seeded random draws, so the
activations are structurally faithful but carry no semantics. Everything
runs in float32 on CPU; the largest bundled model exports in well under a
second.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

# Fixed conversation preamble prepended before the visual tokens. Tokenized
# at byte level like the prompt, it fixes n_sys for every export.
SYSTEM_PREAMBLE = "A chat between a user and an assistant.\n"

VOCAB_SIZE = 256  # byte-level tokenizer


@dataclass(frozen=True)
class ModelGeometry:
    """Static shape parameters of one bundled model."""

    image_size: int
    patch: int
    enc_layers: int
    d_enc: int
    heads_enc: int
    dec_layers: int
    d_llm: int
    heads_llm: int

    @property
    def grid(self) -> int:
        return self.image_size // self.patch

    @property
    def n_patches(self) -> int:
        return self.grid * self.grid

    @property
    def d_key(self) -> int:
        return self.d_enc // self.heads_enc

    @property
    def head_dim_llm(self) -> int:
        return self.d_llm // self.heads_llm


MODELS: dict[str, ModelGeometry] = {
    # 336px, patch 14: a 24x24 grid of 576 visual tokens.
    "mini-336": ModelGeometry(
        image_size=336, patch=14, enc_layers=3, d_enc=64, heads_enc=4, dec_layers=2, d_llm=64, heads_llm=4
    ),
    # Small variant for fast tests: an 8x8 grid of 64 visual tokens.
    "mini-112": ModelGeometry(
        image_size=112, patch=14, enc_layers=3, d_enc=32, heads_enc=2, dec_layers=2, d_llm=32, heads_llm=2
    ),
}


def byte_ids(text: str) -> torch.Tensor:
    """Tokenize text as its UTF-8 bytes; shape (1, len)."""
    data = text.encode("utf-8")
    return torch.tensor([list(data)], dtype=torch.long)


class VisionAttention(nn.Module):
    """Multi-head self-attention that also returns its probs and keys.

    The extra return values mirror encoders that expose attention maps on
    request; hooks read them from the output tuple while the block itself
    consumes only the first element.
    """

    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.head_dim = dim // heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        b, t, d = x.shape
        q, k, v = self.qkv(x).chunk(3, dim=-1)

        def split(a: torch.Tensor) -> torch.Tensor:
            return a.view(b, t, self.heads, self.head_dim).transpose(1, 2)

        q, k, v = split(q), split(k), split(v)
        probs = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(self.head_dim), dim=-1)
        y = (probs @ v).transpose(1, 2).reshape(b, t, d)
        return self.out(y), probs, k


class VisionBlock(nn.Module):
    """Pre-norm transformer block: LN, attention, LN, GELU MLP."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = VisionAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, 4 * dim), nn.GELU(), nn.Linear(4 * dim, dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y, _, _ = self.attn(self.norm1(x))
        x = x + y
        return x + self.mlp(self.norm2(x))


class VisionTower(nn.Module):
    """ViT over a square image: conv patch embed, CLS token at row 0."""

    def __init__(self, g: ModelGeometry):
        super().__init__()
        self.patch_embed = nn.Conv2d(3, g.d_enc, kernel_size=g.patch, stride=g.patch)
        self.cls = nn.Parameter(torch.randn(1, 1, g.d_enc) * 0.02)
        self.pos = nn.Parameter(torch.randn(1, 1 + g.n_patches, g.d_enc) * 0.02)
        self.blocks = nn.ModuleList(VisionBlock(g.d_enc, g.heads_enc) for _ in range(g.enc_layers))

    def forward(self, pixels: torch.Tensor) -> list[torch.Tensor]:
        x = self.patch_embed(pixels).flatten(2).transpose(1, 2)
        x = torch.cat([self.cls.expand(x.shape[0], -1, -1), x], dim=1) + self.pos
        hidden = []
        for block in self.blocks:
            x = block(x)
            hidden.append(x)
        return hidden


def rotary_tables(seq_len: int, head_dim: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Cos/sin tables for rotary position embeddings, shape (seq_len, head_dim)."""
    inv_freq = 1.0 / (10000.0 ** (torch.arange(0, head_dim, 2, dtype=torch.float32) / head_dim))
    freqs = torch.outer(torch.arange(seq_len, dtype=torch.float32), inv_freq)
    emb = torch.cat([freqs, freqs], dim=-1)
    return emb.cos(), emb.sin()


def rotate_half(x: torch.Tensor) -> torch.Tensor:
    half = x.shape[-1] // 2
    return torch.cat([-x[..., half:], x[..., :half]], dim=-1)


def apply_rotary(x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor) -> torch.Tensor:
    return x * cos + rotate_half(x) * sin


class DecoderAttention(nn.Module):
    """Causal self-attention returning (out, q, k) with rotary already applied."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        if (dim // heads) % 2:
            raise ValueError("rotary embedding needs an even head dim")
        self.heads = heads
        self.head_dim = dim // heads
        self.q_proj = nn.Linear(dim, dim, bias=False)
        self.k_proj = nn.Linear(dim, dim, bias=False)
        self.v_proj = nn.Linear(dim, dim, bias=False)
        self.o_proj = nn.Linear(dim, dim, bias=False)

    def forward(
        self, x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        b, s, d = x.shape

        def split(a: torch.Tensor) -> torch.Tensor:
            return a.view(b, s, self.heads, self.head_dim).transpose(1, 2)

        q = apply_rotary(split(self.q_proj(x)), cos, sin)
        k = apply_rotary(split(self.k_proj(x)), cos, sin)
        v = split(self.v_proj(x))
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        mask = torch.triu(torch.ones(s, s, dtype=torch.bool), diagonal=1)
        probs = torch.softmax(scores.masked_fill(mask, float("-inf")), dim=-1)
        y = (probs @ v).transpose(1, 2).reshape(b, s, d)
        return self.o_proj(y), q, k


class DecoderLayer(nn.Module):
    """Llama-style block: RMSNorm, causal attention, RMSNorm, SwiGLU MLP."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.input_norm = nn.RMSNorm(dim, eps=1e-6)
        self.attn = DecoderAttention(dim, heads)
        self.post_norm = nn.RMSNorm(dim, eps=1e-6)
        self.gate = nn.Linear(dim, 4 * dim, bias=False)
        self.up = nn.Linear(dim, 4 * dim, bias=False)
        self.down = nn.Linear(4 * dim, dim, bias=False)

    def forward(self, x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor) -> torch.Tensor:
        y, _, _ = self.attn(self.input_norm(x), cos, sin)
        x = x + y
        h = self.post_norm(x)
        return x + self.down(torch.nn.functional.silu(self.gate(h)) * self.up(h))


class MiniVLM(nn.Module):
    """Vision tower, projector, and decoder assembled into one forward pass.

    The projector reads patch features from the second-to-last tower block;
    the last block still runs, untapped, matching how deployed stacks select
    the feature layer. The decoder sequence is [system, visual, text].
    """

    def __init__(self, geometry: ModelGeometry):
        super().__init__()
        self.geometry = geometry
        self.vision = VisionTower(geometry)
        self.projector = nn.Sequential(
            nn.Linear(geometry.d_enc, geometry.d_llm),
            nn.GELU(),
            nn.Linear(geometry.d_llm, geometry.d_llm),
        )
        self.embed_tokens = nn.Embedding(VOCAB_SIZE, geometry.d_llm)
        self.layers = nn.ModuleList(DecoderLayer(geometry.d_llm, geometry.heads_llm) for _ in range(geometry.dec_layers))

    def forward(self, pixels: torch.Tensor, sys_ids: torch.Tensor, text_ids: torch.Tensor) -> torch.Tensor:
        hidden = self.vision(pixels)
        visual = self.projector(hidden[-2][:, 1:, :])
        h = torch.cat([self.embed_tokens(sys_ids), visual, self.embed_tokens(text_ids)], dim=1)
        cos, sin = rotary_tables(h.shape[1], self.geometry.head_dim_llm)
        for layer in self.layers:
            h = layer(h, cos, sin)
        return h


def build_model(name: str, seed: int) -> MiniVLM:
    """Construct a bundled model with seed-determined weights, in eval mode."""
    if name not in MODELS:
        raise ValueError(f"unknown model {name!r}; available: {', '.join(sorted(MODELS))}")
    torch.manual_seed(seed)
    model = MiniVLM(MODELS[name])
    model.eval()
    return model
