"""Full generative model: backbone + LM head + flow-matching head,
plus the frozen latent channel statistics needed to decode tokens back
to images."""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn

from .backbone import Backbone, ModelConfig, init_parameters
from .heads import FlowMatchingHead
from .latents import ChannelStats


class GenerativeModel(nn.Module):
    def __init__(self, config: ModelConfig, seed: int = 0):
        super().__init__()
        if config.head.cond_dim != config.model_dim:
            raise ValueError(
                f"head cond_dim {config.head.cond_dim} != model_dim {config.model_dim}"
            )
        if config.head.token_dim != config.token_dim:
            raise ValueError(
                f"head token_dim {config.head.token_dim} != token_dim {config.token_dim}"
            )
        self.config = config
        self.backbone = Backbone(config, seed=seed)
        self.lm_head = nn.Linear(config.model_dim, config.vocab_size, bias=False)
        self.fm_head = FlowMatchingHead(config.head)
        channels = config.token_dim // 4
        self.register_buffer("channel_means", torch.zeros(channels))
        self.register_buffer("channel_stds", torch.ones(channels))
        init_parameters(self, seed)

    def forward(self, ids: torch.Tensor, vectors: torch.Tensor) -> torch.Tensor:
        return self.backbone(ids, vectors)

    def lm_logits(self, hidden: torch.Tensor) -> torch.Tensor:
        if hidden.shape[-1] != self.config.model_dim:
            raise ValueError(
                f"hidden dim {hidden.shape[-1]} != model_dim {self.config.model_dim}"
            )
        return self.lm_head(hidden)

    def set_channel_stats(self, stats: ChannelStats):
        if stats.channels != self.channel_means.shape[0]:
            raise ValueError(
                f"stats have {stats.channels} channels, "
                f"model expects {self.channel_means.shape[0]}"
            )
        self.channel_means.copy_(torch.from_numpy(stats.means))
        self.channel_stds.copy_(torch.from_numpy(stats.stds))

    def channel_stats(self) -> ChannelStats:
        return ChannelStats(
            self.channel_means.detach().cpu().numpy().astype(np.float32),
            self.channel_stds.detach().cpu().numpy().astype(np.float32),
        )

    def param_count(self) -> int:
        return sum(p.numel() for p in self.parameters())
