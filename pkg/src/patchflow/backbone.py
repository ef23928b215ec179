"""Causal transformer over unified multimodal sequences.

Pre-norm blocks with RMS normalization, bias-free attention, SiLU-gated
feedforward, and 1D rotary position embeddings applied to consecutive
(even, odd) channel pairs. Sequences are unbatched: forward maps a
length-n sequence to n hidden states.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .heads import FMHeadConfig

INIT_STD = 0.02


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 4
    model_dim: int = 128
    n_heads: int = 4
    ffn_dim: int = 512
    vocab_size: int = 512
    max_seq_len: int = 512
    token_dim: int = 64
    rope_base: float = 10000.0
    head: FMHeadConfig = field(default_factory=lambda: FMHeadConfig())

    def __post_init__(self):
        if self.model_dim % self.n_heads != 0:
            raise ValueError(
                f"model_dim {self.model_dim} not divisible by n_heads {self.n_heads}"
            )
        if self.head_dim % 2 != 0:
            raise ValueError(f"head_dim {self.head_dim} must be even for RoPE")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.n_heads


def rope_angles(positions: torch.Tensor, dim: int, base: float,
                dtype: torch.dtype) -> tuple[torch.Tensor, torch.Tensor]:
    """cos/sin tables of shape (len(positions), dim/2) at frequencies
    base^(-2i/dim)."""
    inv_freq = base ** (
        -torch.arange(0, dim, 2, dtype=dtype) / dim
    )
    angles = positions.to(dtype)[:, None] * inv_freq[None, :]
    return torch.cos(angles), torch.sin(angles)


def apply_rope(x: torch.Tensor, positions: torch.Tensor, base: float) -> torch.Tensor:
    """Rotate consecutive channel pairs of x (..., seq, head_dim) by the
    position-dependent angles. Position 0 is the identity."""
    dim = x.shape[-1]
    if dim % 2 != 0:
        raise ValueError(f"head_dim must be even, got {dim}")
    cos, sin = rope_angles(positions, dim, base, x.dtype)
    x_even = x[..., 0::2]
    x_odd = x[..., 1::2]
    out = torch.empty_like(x)
    out[..., 0::2] = x_even * cos - x_odd * sin
    out[..., 1::2] = x_even * sin + x_odd * cos
    return out


class RMSNorm(nn.Module):
    def __init__(self, dim: int, eps: float = 1e-6):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        rms = torch.rsqrt(x.pow(2).mean(dim=-1, keepdim=True) + self.eps)
        return x * rms * self.weight


class LayerKV:
    """Appendable K/V store for one attention layer."""

    def __init__(self, max_len: int, n_heads: int, head_dim: int,
                 dtype: torch.dtype = torch.float32):
        self.k = torch.zeros(n_heads, max_len, head_dim, dtype=dtype)
        self.v = torch.zeros(n_heads, max_len, head_dim, dtype=dtype)
        self.length = 0

    def append(self, k: torch.Tensor, v: torch.Tensor):
        if self.length >= self.k.shape[1]:
            raise RuntimeError(f"KV cache full at length {self.length}")
        self.k[:, self.length] = k
        self.v[:, self.length] = v
        self.length += 1


class KVCache:
    """Per-layer K/V state for incremental decoding."""

    def __init__(self, config: ModelConfig, dtype: torch.dtype = torch.float32):
        self.layers = [
            LayerKV(config.max_seq_len, config.n_heads, config.head_dim, dtype)
            for _ in range(config.layers)
        ]

    @property
    def length(self) -> int:
        return self.layers[0].length


class Attention(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.n_heads = config.n_heads
        self.head_dim = config.head_dim
        self.rope_base = config.rope_base
        d = config.model_dim
        self.wq = nn.Linear(d, d, bias=False)
        self.wk = nn.Linear(d, d, bias=False)
        self.wv = nn.Linear(d, d, bias=False)
        self.wo = nn.Linear(d, d, bias=False)

    def _project(self, x: torch.Tensor, positions: torch.Tensor
                 ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        seq = x.shape[0]
        q = self.wq(x).view(seq, self.n_heads, self.head_dim).transpose(0, 1)
        k = self.wk(x).view(seq, self.n_heads, self.head_dim).transpose(0, 1)
        v = self.wv(x).view(seq, self.n_heads, self.head_dim).transpose(0, 1)
        q = apply_rope(q, positions, self.rope_base)
        k = apply_rope(k, positions, self.rope_base)
        return q, k, v

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        seq = x.shape[0]
        positions = torch.arange(seq)
        q, k, v = self._project(x, positions)
        scores = (q @ k.transpose(-2, -1)) / self.head_dim**0.5
        mask = torch.triu(torch.ones(seq, seq, dtype=torch.bool), diagonal=1)
        scores = scores.masked_fill(mask, float("-inf"))
        attn = F.softmax(scores, dim=-1)
        out = (attn @ v).transpose(0, 1).reshape(seq, -1)
        return self.wo(out)

    def forward_step(self, x: torch.Tensor, cache: LayerKV) -> torch.Tensor:
        position = torch.tensor([cache.length])
        q, k, v = self._project(x[None, :], position)
        cache.append(k[:, 0], v[:, 0])
        keys = cache.k[:, : cache.length]
        values = cache.v[:, : cache.length]
        scores = (q @ keys.transpose(-2, -1)) / self.head_dim**0.5
        attn = F.softmax(scores, dim=-1)
        out = (attn @ values).transpose(0, 1).reshape(-1)
        return self.wo(out)


class FeedForward(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.gate = nn.Linear(config.model_dim, config.ffn_dim, bias=False)
        self.up = nn.Linear(config.model_dim, config.ffn_dim, bias=False)
        self.down = nn.Linear(config.ffn_dim, config.model_dim, bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.down(F.silu(self.gate(x)) * self.up(x))


class Block(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.attn_norm = RMSNorm(config.model_dim)
        self.attn = Attention(config)
        self.ffn_norm = RMSNorm(config.model_dim)
        self.ffn = FeedForward(config)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.attn_norm(x))
        return x + self.ffn(self.ffn_norm(x))

    def forward_step(self, x: torch.Tensor, cache: LayerKV) -> torch.Tensor:
        x = x + self.attn.forward_step(self.attn_norm(x), cache)
        return x + self.ffn(self.ffn_norm(x))


class Backbone(nn.Module):
    """Embeddings + causal transformer stack + final norm."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        super().__init__()
        self.config = config
        self.embedding = nn.Embedding(config.vocab_size, config.model_dim)
        self.image_proj = nn.Linear(config.token_dim, config.model_dim, bias=True)
        self.blocks = nn.ModuleList(Block(config) for _ in range(config.layers))
        self.final_norm = RMSNorm(config.model_dim)
        init_parameters(self, seed)

    def embed(self, ids: torch.Tensor, vectors: torch.Tensor) -> torch.Tensor:
        """ids: (seq,) int64 with -1 at image positions; vectors: (seq,
        token_dim) consulted only where ids < 0."""
        if ids.numel() and int(ids.max()) >= self.config.vocab_size:
            raise ValueError(f"id {int(ids.max())} >= vocab {self.config.vocab_size}")
        image_mask = ids < 0
        embedded = self.embedding(ids.clamp(min=0))
        projected = self.image_proj(vectors.to(embedded.dtype))
        return torch.where(image_mask[:, None], projected, embedded)

    def forward(self, ids: torch.Tensor, vectors: torch.Tensor) -> torch.Tensor:
        if ids.shape[0] > self.config.max_seq_len:
            raise ValueError(
                f"sequence length {ids.shape[0]} > max {self.config.max_seq_len}"
            )
        x = self.embed(ids, vectors)
        for block in self.blocks:
            x = block(x)
        return self.final_norm(x)

    def forward_step(self, element_id: int, vector: torch.Tensor | None,
                     cache: KVCache) -> torch.Tensor:
        """Append one element (a discrete id, or an image vector with
        element_id < 0) and return its hidden state."""
        if cache.length >= self.config.max_seq_len:
            raise RuntimeError(f"cache full at length {cache.length}")
        ids = torch.tensor([element_id], dtype=torch.int64)
        dim = self.config.token_dim
        vectors = torch.zeros(1, dim) if vector is None else vector.view(1, dim)
        x = self.embed(ids, vectors)[0]
        for block, layer_kv in zip(self.blocks, cache.layers):
            x = block.forward_step(x, layer_kv)
        return self.final_norm(x)


def init_parameters(module: nn.Module, seed: int):
    """normal(0, INIT_STD) weights, zero biases, unit norm gains."""
    g = torch.Generator().manual_seed(seed)
    for m in module.modules():
        if isinstance(m, nn.Linear):
            m.weight.data.normal_(0.0, INIT_STD, generator=g)
            if m.bias is not None:
                m.bias.data.zero_()
        elif isinstance(m, nn.Embedding):
            m.weight.data.normal_(0.0, INIT_STD, generator=g)
        elif isinstance(m, (RMSNorm, nn.LayerNorm)):
            if getattr(m, "weight", None) is not None:
                m.weight.data.fill_(1.0)
            if getattr(m, "bias", None) is not None:
                m.bias.data.zero_()
