"""Output heads and training losses.

The language-modeling head is a bias-free linear map to vocab logits
(owned by the full model); this module provides the flow-matching head,
a conditioning-modulated MLP mapping (noisy token, time, hidden state)
to a velocity, plus both loss terms and their weighted combination.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass(frozen=True)
class FMHeadConfig:
    layers: int = 3
    hidden: int = 192
    cond_dim: int = 128
    token_dim: int = 64
    time_dim: int = 64

    def __post_init__(self):
        for name in ("layers", "hidden", "cond_dim", "token_dim", "time_dim"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.time_dim % 2 != 0:
            raise ValueError("time_dim must be even (cos/sin halves)")


def count_params(config: FMHeadConfig) -> int:
    """Closed-form parameter count; agrees exactly with the allocated
    tensors of FlowMatchingHead."""
    h, f = config.hidden, config.time_dim
    c, d = config.cond_dim, config.token_dim
    time_mlp = (f + 1) * h + (h + 1) * h
    cond_proj = (c + 1) * h
    input_proj = (d + 1) * h
    block = (h + 1) * 3 * h + 2 * (h + 1) * h
    final = (h + 1) * 2 * h + (h + 1) * d
    return time_mlp + cond_proj + input_proj + config.layers * block + final


def timestep_embedding(t: torch.Tensor, dim: int,
                       max_period: float = 10000.0) -> torch.Tensor:
    """Sinusoidal embedding of times t in [0, 1], scaled by 1000 into the
    customary diffusion-step range."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(max_period) * torch.arange(half, dtype=t.dtype) / half
    )
    args = t[:, None] * 1000.0 * freqs[None, :]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


class ModulatedBlock(nn.Module):
    """Residual MLP block whose normalization shift/scale and residual
    gate come from the conditioning vector."""

    def __init__(self, hidden: int):
        super().__init__()
        self.norm = nn.LayerNorm(hidden, elementwise_affine=False, eps=1e-6)
        self.modulation = nn.Linear(hidden, 3 * hidden)
        self.fc1 = nn.Linear(hidden, hidden)
        self.fc2 = nn.Linear(hidden, hidden)

    def forward(self, x: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
        shift, scale, gate = self.modulation(F.silu(c)).chunk(3, dim=-1)
        h = self.norm(x) * (1 + scale) + shift
        return x + gate * self.fc2(F.silu(self.fc1(h)))


class FinalLayer(nn.Module):
    def __init__(self, hidden: int, token_dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(hidden, elementwise_affine=False, eps=1e-6)
        self.modulation = nn.Linear(hidden, 2 * hidden)
        self.out = nn.Linear(hidden, token_dim)

    def forward(self, x: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
        shift, scale = self.modulation(F.silu(c)).chunk(2, dim=-1)
        return self.out(self.norm(x) * (1 + scale) + shift)


class FlowMatchingHead(nn.Module):
    """Velocity field v(x_t, t | condition)."""

    def __init__(self, config: FMHeadConfig):
        super().__init__()
        self.config = config
        self.time_fc1 = nn.Linear(config.time_dim, config.hidden)
        self.time_fc2 = nn.Linear(config.hidden, config.hidden)
        self.cond_proj = nn.Linear(config.cond_dim, config.hidden)
        self.input_proj = nn.Linear(config.token_dim, config.hidden)
        self.blocks = nn.ModuleList(
            ModulatedBlock(config.hidden) for _ in range(config.layers)
        )
        self.final = FinalLayer(config.hidden, config.token_dim)

    def forward(self, xt: torch.Tensor, t: torch.Tensor,
                cond: torch.Tensor) -> torch.Tensor:
        squeeze = xt.ndim == 1
        if squeeze:
            xt, cond = xt[None, :], cond[None, :]
            t = t.reshape(1)
        if xt.shape[-1] != self.config.token_dim:
            raise ValueError(
                f"token dim {xt.shape[-1]} != config {self.config.token_dim}"
            )
        if cond.shape[-1] != self.config.cond_dim:
            raise ValueError(
                f"cond dim {cond.shape[-1]} != config {self.config.cond_dim}"
            )
        if bool((t < 0).any()) or bool((t > 1).any()):
            raise ValueError("t must lie in [0, 1]")
        temb = self.time_fc2(
            F.silu(self.time_fc1(timestep_embedding(t, self.config.time_dim)))
        )
        c = temb + self.cond_proj(cond)
        h = self.input_proj(xt)
        for block in self.blocks:
            h = block(h, c)
        v = self.final(h, c)
        return v[0] if squeeze else v


@dataclass
class FlowSample:
    """One supervised point on the linear path: xt = (1-t) x0 + t x1,
    v_target = x1 - x0."""

    x0: torch.Tensor
    x1: torch.Tensor
    t: float
    xt: torch.Tensor
    v_target: torch.Tensor


def make_flow_sample(x1: torch.Tensor, t: float, x0: torch.Tensor) -> FlowSample:
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")
    if x0.shape != x1.shape:
        raise ValueError(f"shape mismatch: x0 {x0.shape} vs x1 {x1.shape}")
    xt = (1.0 - t) * x0 + t * x1
    return FlowSample(x0=x0, x1=x1, t=t, xt=xt, v_target=x1 - x0)


def draw_flow_samples(x1_batch: torch.Tensor, samples_per_token: int,
                      generator: torch.Generator) -> list[FlowSample]:
    """samples_per_token independent (t, x0) draws per clean token;
    t ~ U[0, 1], x0 ~ N(0, I). Output order: token-major."""
    out: list[FlowSample] = []
    for x1 in x1_batch:
        for _ in range(samples_per_token):
            t = float(torch.rand((), generator=generator, dtype=x1.dtype))
            x0 = torch.randn(x1.shape, generator=generator, dtype=x1.dtype)
            out.append(make_flow_sample(x1, t, x0))
    return out


def fm_loss(head: FlowMatchingHead, samples: list[FlowSample],
            conditions: torch.Tensor) -> torch.Tensor:
    """Mean over samples and dims of squared velocity error."""
    if len(samples) != conditions.shape[0]:
        raise ValueError(
            f"{len(samples)} samples but {conditions.shape[0]} conditions"
        )
    xt = torch.stack([s.xt for s in samples])
    t = torch.tensor([s.t for s in samples], dtype=conditions.dtype)
    v_target = torch.stack([s.v_target for s in samples])
    pred = head(xt, t, conditions)
    return ((pred - v_target) ** 2).mean()


def ce_loss(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean negative log-likelihood over the supervised positions given.
    Empty input yields 0."""
    if logits.shape[0] != targets.shape[0]:
        raise ValueError(
            f"{logits.shape[0]} logit rows but {targets.shape[0]} targets"
        )
    if targets.numel() == 0:
        return logits.sum() * 0.0
    if int(targets.min()) < 0 or int(targets.max()) >= logits.shape[1]:
        raise ValueError("target id outside vocab range")
    logp = F.log_softmax(logits, dim=-1)
    return -logp.gather(1, targets[:, None]).mean()


def total_loss(l_text: torch.Tensor | float, l_visual: torch.Tensor | float,
               lambda_text: float, lambda_visual: float):
    if lambda_text < 0 or lambda_visual < 0:
        raise ValueError("loss weights must be >= 0")
    return lambda_text * l_text + lambda_visual * l_visual


@dataclass(frozen=True)
class LossBreakdown:
    text: float
    visual: float
    total: float
    text_count: int
    visual_count: int
