"""Training: staged recipe, modality-mixed batching, Eq.-style loss
assembly (weighted CE + flow MSE), and gradient verification.

Determinism strategy: every stochastic decision at step k is drawn from
a generator seeded by (stage.seed, k), never from a long-lived stream,
so training resumed from a checkpoint at step k is bit-identical to an
uninterrupted run.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np
import torch

from .corpus import CATEGORIES, Corpus, Sample
from .heads import FlowSample, ce_loss, draw_flow_samples, fm_loss, total_loss
from .latents import (
    ChannelStats, PatchTokenizer, PerturbationSpec, compute_channel_stats,
    encode_image,
)
from .model import GenerativeModel
from .optim import AdamW, clip_grad_norm, lr_at
from .sequence import MultimodalSequence, sequence_arrays
from .vocab import EOS_ID, Vocabulary


def mix64(seed: int, step: int) -> int:
    """Stateless per-step stream key for torch generators."""
    return (seed * 6364136223846793005 + step * 1442695040888963407 + 5) % 2**63


@dataclass
class StageConfig:
    name: str = "stage1"
    lr_max: float = 3e-4
    lr_min: float = 0.0
    schedule: str = "constant"
    warmup_steps: int = 0
    total_steps: int = 100
    lambda_text: float = 0.01
    lambda_visual: float = 1.0
    ratios: dict[str, float] = field(default_factory=lambda: {"pair": 1.0})
    image_sizes: tuple[int, ...] = (32,)
    caption_drop: float = 0.1
    gamma: float = 0.5
    batch_size: int = 8
    samples_per_token: int = 4
    grad_clip: float = 1.0
    checkpoint_every: int = 0
    seed: int = 0

    def __post_init__(self):
        for cat, r in self.ratios.items():
            if cat not in CATEGORIES:
                raise ValueError(f"unknown category {cat!r}")
            if r < 0:
                raise ValueError(f"ratio for {cat!r} must be >= 0")
        if abs(sum(self.ratios.values()) - 1.0) > 1e-6:
            raise ValueError("data ratios must sum to 1")
        if self.total_steps <= 0:
            raise ValueError("total_steps must be > 0")
        if not 0 <= self.warmup_steps <= self.total_steps:
            raise ValueError("warmup_steps must lie in [0, total_steps]")
        if not 0.0 <= self.caption_drop <= 1.0:
            raise ValueError("caption_drop must lie in [0, 1]")
        if self.gamma < 0 or self.batch_size < 1 or self.samples_per_token < 1:
            raise ValueError("invalid stage hyperparameters")
        if self.schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown schedule {self.schedule!r}")


def stage_lr(stage: StageConfig, step: int) -> float:
    return lr_at(step, stage.warmup_steps, stage.total_steps, stage.lr_max,
                 stage.lr_min, stage.schedule)


def _active_categories(ratios: dict[str, float]) -> tuple[list[str], list[float]]:
    cats = [c for c in CATEGORIES if ratios.get(c, 0.0) > 0.0]
    probs = [ratios[c] for c in cats]
    return cats, probs


def batch_at(corpora: dict[int, Corpus], stage: StageConfig,
             step: int) -> tuple[int, list[Sample]]:
    """The (image size, samples) pair for step k, a pure function of
    (corpora, stage, k)."""
    rng = np.random.default_rng([stage.seed, 17, step])
    size = int(stage.image_sizes[int(rng.integers(len(stage.image_sizes)))])
    if size not in corpora:
        raise ValueError(f"no corpus for image size {size}")
    by_cat = corpora[size].by_category()
    cats, probs = _active_categories(stage.ratios)
    for c in cats:
        if not by_cat.get(c):
            raise ValueError(f"ratio > 0 for empty category {c!r}")
    batch = []
    for _ in range(stage.batch_size):
        cat = cats[int(rng.choice(len(cats), p=probs))]
        pool = by_cat[cat]
        batch.append(pool[int(rng.integers(len(pool)))])
    return size, batch


def mix_batches(corpus: Corpus, ratios: dict[str, float], batch_size: int,
                seed: int):
    """Infinite deterministic batch stream over a single corpus."""
    stage = StageConfig(ratios=dict(ratios), batch_size=batch_size, seed=seed,
                        image_sizes=(corpus.spec.image_size,))
    corpora = {corpus.spec.image_size: corpus}
    step = 0
    while True:
        yield batch_at(corpora, stage, step)[1]
        step += 1


def assemble_sequence(sample: Sample, vocab: Vocabulary,
                      tokenizer: PatchTokenizer, stats: ChannelStats,
                      gamma: float, drop_caption: bool,
                      rng: np.random.Generator) -> MultimodalSequence:
    """Sample -> training sequence, ending in <eos>. Caption drop removes
    every text segment (the empty-caption unconditional convention)."""
    seq = MultimodalSequence()
    for seg in sample.segments:
        if isinstance(seg, str):
            if not drop_caption:
                seq.append_text(vocab.tokenize(seg))
        else:
            spec = None
            if gamma > 0:
                spec = PerturbationSpec(gamma, seed=int(rng.integers(2**63)))
            seq.append_image(encode_image(seg, tokenizer, stats, spec), vocab)
    seq.append_text([EOS_ID])
    return seq


@dataclass(frozen=True)
class LossRecord:
    step: int
    lr: float
    l_text: float
    l_visual: float
    total: float


def loss_history_csv(history: list[LossRecord]) -> str:
    lines = ["step,lr,L_text,L_visual,total"]
    lines += [f"{r.step},{r.lr!r},{r.l_text!r},{r.l_visual!r},{r.total!r}"
              for r in history]
    return "\n".join(lines) + "\n"


def supervision_positions(ids: np.ndarray) -> tuple[list[int], list[int]]:
    """(text positions, image positions) among elements 1..n-1; element 0
    has no preceding hidden state and is never supervised."""
    text = [i for i in range(1, len(ids)) if ids[i] >= 0]
    image = [i for i in range(1, len(ids)) if ids[i] < 0]
    return text, image


def compute_batch_loss(model: GenerativeModel, seqs: list[MultimodalSequence],
                       lambda_text: float, lambda_visual: float,
                       samples_per_token: int, generator: torch.Generator,
                       ) -> tuple[torch.Tensor, "LossBreakdownT"]:
    """Mean CE over all supervised text positions in the batch, mean flow
    MSE over all (token, draw) pairs, combined by the stage weights."""
    dtype = next(model.parameters()).dtype
    zero = torch.zeros((), dtype=dtype)
    ce_sum, fm_sum = zero, zero
    ce_count, fm_count = 0, 0
    for seq in seqs:
        ids_np, vecs_np = sequence_arrays(seq, model.config.token_dim)
        ids = torch.from_numpy(ids_np)
        vecs = torch.from_numpy(vecs_np).to(dtype)
        hidden = model(ids, vecs)
        text_pos, img_pos = supervision_positions(ids_np)
        if text_pos:
            prev = [i - 1 for i in text_pos]
            logits = model.lm_logits(hidden[prev])
            ce_sum = ce_sum + ce_loss(logits, ids[text_pos]) * len(text_pos)
            ce_count += len(text_pos)
        if img_pos:
            x1 = vecs[img_pos]
            flow = draw_flow_samples(x1, samples_per_token, generator)
            conds = hidden[[i - 1 for i in img_pos]].repeat_interleave(
                samples_per_token, dim=0
            )
            fm_sum = fm_sum + fm_loss(model.fm_head, flow, conds) * len(flow)
            fm_count += len(flow)
    l_text = ce_sum / ce_count if ce_count else zero
    l_visual = fm_sum / fm_count if fm_count else zero
    total = total_loss(l_text, l_visual, lambda_text, lambda_visual)
    breakdown = LossBreakdownT(
        float(l_text.detach()), float(l_visual.detach()),
        float(total.detach()), ce_count, fm_count,
    )
    return total, breakdown


@dataclass(frozen=True)
class LossBreakdownT:
    text: float
    visual: float
    total: float
    text_count: int
    visual_count: int


class TrainingDivergenceError(RuntimeError):
    def __init__(self, message: str, checkpoint_path: str | None = None):
        super().__init__(message)
        self.checkpoint_path = checkpoint_path


def corpus_stats(corpora: dict[int, Corpus],
                 tokenizer: PatchTokenizer) -> ChannelStats:
    grids = [tokenizer.patchify(img)
             for size in sorted(corpora) for img in corpora[size].images()]
    return compute_channel_stats(grids)


def train_stage(model: GenerativeModel, stage: StageConfig,
                corpora: dict[int, Corpus] | Corpus, vocab: Vocabulary,
                tokenizer: PatchTokenizer, out_dir: str | None = None,
                start_step: int = 0, optimizer: AdamW | None = None,
                ) -> tuple[list[LossRecord], AdamW]:
    """Run steps [start_step, stage.total_steps). Channel stats are
    recomputed from the corpora (deterministic) and frozen on the model."""
    from .checkpoint import save_checkpoint

    if isinstance(corpora, Corpus):
        corpora = {corpora.spec.image_size: corpora}
    for size in stage.image_sizes:
        if size not in corpora:
            raise ValueError(f"stage needs a corpus for image size {size}")
    model.set_channel_stats(corpus_stats(corpora, tokenizer))
    if optimizer is None:
        optimizer = AdamW(model.parameters(), lr=stage.lr_max)
    history: list[LossRecord] = []
    model.train()
    for step in range(start_step, stage.total_steps):
        lr = stage_lr(stage, step)
        optimizer.set_lr(lr)
        _, batch = batch_at(corpora, stage, step)
        rng = np.random.default_rng([stage.seed, 23, step])
        seqs = [
            assemble_sequence(
                sample, vocab, tokenizer, model.channel_stats(), stage.gamma,
                drop_caption=bool(rng.random() < stage.caption_drop)
                and any(isinstance(s, str) for s in sample.segments),
                rng=rng,
            )
            for sample in batch
        ]
        generator = torch.Generator().manual_seed(mix64(stage.seed, step))
        optimizer.zero_grad(set_to_none=True)
        total, breakdown = compute_batch_loss(
            model, seqs, stage.lambda_text, stage.lambda_visual,
            stage.samples_per_token, generator,
        )
        if not math.isfinite(breakdown.total):
            path = None
            if out_dir is not None:
                path = os.path.join(out_dir, f"diagnostic_step{step}.pfck")
                save_checkpoint(path, model, optimizer, step, stage.name,
                                vocab, tokenizer.config)
            raise TrainingDivergenceError(
                f"non-finite loss {breakdown.total} at step {step}", path
            )
        total.backward()
        _check_finite_grads(model)
        if stage.grad_clip > 0:
            clip_grad_norm(model.parameters(), stage.grad_clip)
        optimizer.step()
        history.append(LossRecord(step, lr, breakdown.text, breakdown.visual,
                                  breakdown.total))
        if (out_dir is not None and stage.checkpoint_every > 0
                and (step + 1) % stage.checkpoint_every == 0):
            save_checkpoint(
                os.path.join(out_dir, f"step{step + 1:06d}.pfck"),
                model, optimizer, step + 1, stage.name, vocab,
                tokenizer.config,
            )
    return history, optimizer


def _check_finite_grads(model: torch.nn.Module):
    for name, p in model.named_parameters():
        if p.grad is not None and not torch.isfinite(p.grad).all():
            raise ValueError(f"non-finite gradient in {name}")


def make_fixed_loss(model: GenerativeModel, seqs: list[MultimodalSequence],
                    lambda_text: float, lambda_visual: float,
                    samples_per_token: int, seed: int = 0):
    """A deterministic loss closure for finite-difference checks: the
    flow-matching (t, x0) draws are frozen at construction, so repeated
    evaluations differ only through the parameters."""
    dtype = next(model.parameters()).dtype
    prepared = []
    generator = torch.Generator().manual_seed(mix64(seed, 0))
    for seq in seqs:
        ids_np, vecs_np = sequence_arrays(seq, model.config.token_dim)
        ids = torch.from_numpy(ids_np)
        vecs = torch.from_numpy(vecs_np).to(dtype)
        text_pos, img_pos = supervision_positions(ids_np)
        flow: list[FlowSample] = []
        if img_pos:
            flow = draw_flow_samples(vecs[img_pos], samples_per_token, generator)
        prepared.append((ids, vecs, text_pos, img_pos, flow))

    def loss_fn() -> torch.Tensor:
        zero = torch.zeros((), dtype=dtype)
        ce_sum, fm_sum = zero, zero
        ce_count, fm_count = 0, 0
        for ids, vecs, text_pos, img_pos, flow in prepared:
            hidden = model(ids, vecs)
            if text_pos:
                logits = model.lm_logits(hidden[[i - 1 for i in text_pos]])
                ce_sum = ce_sum + ce_loss(logits, ids[text_pos]) * len(text_pos)
                ce_count += len(text_pos)
            if flow:
                conds = hidden[[i - 1 for i in img_pos]].repeat_interleave(
                    samples_per_token, dim=0
                )
                fm_sum = fm_sum + fm_loss(model.fm_head, flow, conds) * len(flow)
                fm_count += len(flow)
        l_text = ce_sum / ce_count if ce_count else zero
        l_visual = fm_sum / fm_count if fm_count else zero
        return total_loss(l_text, l_visual, lambda_text, lambda_visual)

    return loss_fn


@dataclass(frozen=True)
class GradCheckReport:
    max_rel_err: float
    coords_checked: int
    worst_tensor: str
    per_tensor: dict[str, float]

    def describe(self) -> str:
        lines = [f"gradient check: {self.coords_checked} coordinates, "
                 f"max rel err {self.max_rel_err:.3e} ({self.worst_tensor})"]
        for name, err in sorted(self.per_tensor.items(), key=lambda kv: -kv[1]):
            lines.append(f"  {name:50s} {err:.3e}")
        return "\n".join(lines)


GRAD_FLOOR = 1e-6


def gradient_check(module: torch.nn.Module, loss_fn, epsilon: float = 1e-5,
                   min_coords: int = 200, seed: int = 0) -> GradCheckReport:
    """Central finite differences vs analytic gradients on a random
    coordinate subset spanning every parameter tensor. Use in 64-bit
    mode (module.double()).

    The relative error denominator is floored at GRAD_FLOOR: where both
    gradients are below it, the difference (hi - lo) cancels to round-off
    and only an absolute comparison at that scale is meaningful."""
    params = dict(module.named_parameters())
    module.zero_grad(set_to_none=True)
    loss_fn().backward()
    grads = {n: p.grad.detach().clone() for n, p in params.items()}
    rng = np.random.default_rng(seed)
    per_tensor_coords = max(1, math.ceil(min_coords / len(params)))
    per_tensor: dict[str, float] = {}
    checked = 0
    with torch.no_grad():
        for name, p in params.items():
            flat = p.data.view(-1)
            n = flat.numel()
            idxs = rng.choice(n, size=min(per_tensor_coords, n), replace=False)
            worst = 0.0
            for i in idxs:
                i = int(i)
                orig = float(flat[i])
                flat[i] = orig + epsilon
                hi = float(loss_fn())
                flat[i] = orig - epsilon
                lo = float(loss_fn())
                flat[i] = orig
                fd = (hi - lo) / (2.0 * epsilon)
                an = float(grads[name].view(-1)[i])
                rel = abs(fd - an) / max(abs(fd), abs(an), GRAD_FLOOR)
                worst = max(worst, rel)
                checked += 1
            per_tensor[name] = worst
    worst_tensor = max(per_tensor, key=per_tensor.get)
    return GradCheckReport(
        max_rel_err=per_tensor[worst_tensor],
        coords_checked=checked,
        worst_tensor=worst_tensor,
        per_tensor=per_tensor,
    )
