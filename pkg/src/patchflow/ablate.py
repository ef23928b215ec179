"""Head-size ablation harness.

Freezes the backbone, harvests (condition hidden state, target token)
pairs from corpus sequences once, then trains each candidate flow head
on the identical pair stream for an equal step budget and reports the
final flow loss on a shared fixed evaluation pack (same (t, x0) draws
for every head).

A fraction of harvested sequences is caption-dropped, so part of the
target distribution is irreducibly ambiguous for any head; trained
heads of different sizes therefore plateau at nearly the same loss,
which is the quantity under test.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .corpus import Corpus
from .heads import (
    FMHeadConfig, FlowMatchingHead, count_params, fm_loss, make_flow_sample,
)
from .latents import PatchTokenizer
from .backbone import init_parameters
from .model import GenerativeModel
from .optim import AdamW
from .trainer import assemble_sequence, mix64, supervision_positions
from .sequence import sequence_arrays
from .vocab import Vocabulary

DESK_ABLATION_HEADS = {
    "small": FMHeadConfig(layers=2, hidden=96),
    "base": FMHeadConfig(layers=3, hidden=192),
    "large": FMHeadConfig(layers=6, hidden=384),
}

REFERENCE_HEADS = {
    "small": FMHeadConfig(layers=6, hidden=1024, cond_dim=5120,
                          token_dim=64, time_dim=256),
    "base": FMHeadConfig(layers=12, hidden=1536, cond_dim=5120,
                         token_dim=64, time_dim=256),
    "large": FMHeadConfig(layers=24, hidden=2048, cond_dim=5120,
                          token_dim=64, time_dim=256),
}


@dataclass(frozen=True)
class AblationSettings:
    steps: int = 1500
    batch_size: int = 128
    lr: float = 2e-3
    weight_decay: float = 0.0
    caption_drop: float = 0.5
    eval_draws: int = 64
    seed: int = 0


def harvest_pairs(model: GenerativeModel, corpus: Corpus, vocab: Vocabulary,
                  tokenizer: PatchTokenizer, caption_drop: float,
                  seed: int) -> tuple[torch.Tensor, torch.Tensor]:
    """(conditions, targets) over every image-token position of every
    corpus sample, each sequence assembled both with its caption and
    (for a caption_drop fraction) without it."""
    stats = model.channel_stats()
    conds: list[torch.Tensor] = []
    targets: list[torch.Tensor] = []
    rng = np.random.default_rng([seed, 71])
    model.eval()
    with torch.no_grad():
        for sample in corpus.samples:
            if not sample.images():
                continue
            variants = [False]
            if rng.random() < caption_drop:
                variants.append(True)
            for drop in variants:
                seq = assemble_sequence(
                    sample, vocab, tokenizer, stats, gamma=0.0,
                    drop_caption=drop, rng=rng,
                )
                ids_np, vecs_np = sequence_arrays(seq, model.config.token_dim)
                hidden = model(torch.from_numpy(ids_np),
                               torch.from_numpy(vecs_np))
                _, img_pos = supervision_positions(ids_np)
                for i in img_pos:
                    conds.append(hidden[i - 1])
                    targets.append(torch.from_numpy(vecs_np[i]))
    if not conds:
        raise ValueError("corpus yielded no image-token pairs")
    return torch.stack(conds), torch.stack(targets)


def _eval_pack(targets: torch.Tensor, draws: int, seed: int):
    """Fixed (t, x0) draws per target, shared across heads."""
    generator = torch.Generator().manual_seed(mix64(seed, 9999))
    samples = []
    index = []
    for i, x1 in enumerate(targets):
        for _ in range(draws):
            t = float(torch.rand((), generator=generator))
            x0 = torch.randn(x1.shape, generator=generator)
            samples.append(make_flow_sample(x1, t, x0))
            index.append(i)
    return samples, torch.tensor(index)


def eval_head_loss(head: FlowMatchingHead, conds: torch.Tensor,
                   targets: torch.Tensor, draws: int, seed: int,
                   chunk: int = 4096) -> float:
    samples, index = _eval_pack(targets, draws, seed)
    head.eval()
    with torch.no_grad():
        total = 0.0
        for lo in range(0, len(samples), chunk):
            part = samples[lo : lo + chunk]
            c = conds[index[lo : lo + chunk]]
            total += float(fm_loss(head, part, c)) * len(part)
    return total / len(samples)


def train_head_only(config: FMHeadConfig, conds: torch.Tensor,
                    targets: torch.Tensor, settings: AblationSettings,
                    head_seed: int) -> FlowMatchingHead:
    """Fresh head, fixed budget, deterministic pair stream shared by all
    configs (the stream depends on settings.seed only)."""
    head = FlowMatchingHead(config)
    init_parameters(head, head_seed)
    optimizer = AdamW(head.parameters(), lr=settings.lr,
                      weight_decay=settings.weight_decay)
    n = conds.shape[0]
    head.train()
    for step in range(settings.steps):
        generator = torch.Generator().manual_seed(mix64(settings.seed, step))
        idx = torch.randint(n, (settings.batch_size,), generator=generator)
        x1 = targets[idx]
        t = torch.rand(settings.batch_size, generator=generator)
        x0 = torch.randn(x1.shape, generator=generator)
        xt = (1.0 - t)[:, None] * x0 + t[:, None] * x1
        optimizer.zero_grad(set_to_none=True)
        pred = head(xt, t, conds[idx])
        loss = ((pred - (x1 - x0)) ** 2).mean()
        loss.backward()
        optimizer.step()
    return head


@dataclass(frozen=True)
class AblationRow:
    name: str
    layers: int
    hidden: int
    params: int
    final_fm_loss: float
    psnr_nearest: float  # NaN when image sampling is skipped


@dataclass(frozen=True)
class AblationReport:
    rows: tuple[AblationRow, ...]

    def to_csv(self) -> str:
        lines = ["name,layers,hidden,params,final_fm_loss,psnr_nearest"]
        for r in self.rows:
            lines.append(
                f"{r.name},{r.layers},{r.hidden},{r.params},"
                f"{r.final_fm_loss!r},{r.psnr_nearest!r}"
            )
        return "\n".join(lines) + "\n"

    def max_pairwise_rel_diff(self) -> float:
        losses = [r.final_fm_loss for r in self.rows]
        worst = 0.0
        for i in range(len(losses)):
            for j in range(i + 1, len(losses)):
                denom = min(losses[i], losses[j])
                worst = max(worst, abs(losses[i] - losses[j]) / denom)
        return worst


def ablate_heads(model: GenerativeModel, head_configs: dict[str, FMHeadConfig],
                 corpus: Corpus, vocab: Vocabulary, tokenizer: PatchTokenizer,
                 settings: AblationSettings = AblationSettings(),
                 sample_images: bool = False) -> AblationReport:
    """Equal-budget head-only training for each config. When
    sample_images is set, each trained head is mounted on the backbone
    and one caption is decoded; the row reports the best PSNR against
    any training image."""
    conds, targets = harvest_pairs(
        model, corpus, vocab, tokenizer, settings.caption_drop, settings.seed
    )
    rows = []
    for k, (name, config) in enumerate(head_configs.items()):
        head = train_head_only(config, conds, targets, settings,
                               head_seed=mix64(settings.seed, 1000 + k))
        loss = eval_head_loss(head, conds, targets, settings.eval_draws,
                              settings.seed)
        psnr_nearest = float("nan")
        if sample_images:
            psnr_nearest = _nearest_train_psnr(model, head, corpus, vocab,
                                               tokenizer, settings.seed)
        rows.append(AblationRow(
            name=name, layers=config.layers, hidden=config.hidden,
            params=count_params(config), final_fm_loss=loss,
            psnr_nearest=psnr_nearest,
        ))
    return AblationReport(tuple(rows))


def _nearest_train_psnr(model: GenerativeModel, head: FlowMatchingHead,
                        corpus: Corpus, vocab: Vocabulary,
                        tokenizer: PatchTokenizer, seed: int) -> float:
    from .metrics import psnr
    from .latents import decode_tokens
    from .sampler import SamplerConfig, generate

    sample = next(s for s in corpus.samples if s.images())
    caption = sample.texts()[0]
    original_head = model.fm_head
    model.fm_head = head
    try:
        size = corpus.spec.image_size
        grid = size // (2 * tokenizer.config.patch)
        seq, _ = generate(
            model, vocab.tokenize(caption), vocab,
            SamplerConfig(euler_steps=64, temperature=0.0, seed=seed,
                          forced_area=(grid, grid)),
        )
        _, images = _parse_images(seq)
        decoded = decode_tokens(images[0], tokenizer, model.channel_stats())
        return max(psnr(decoded, img) for img in corpus.images())
    finally:
        model.fm_head = original_head


def _parse_images(seq):
    from .sequence import parse_sequence

    text_ids, parsed = parse_sequence(seq)
    return text_ids, [p.tokens for p in parsed]
