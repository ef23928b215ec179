"""Autoregressive inference.

Text and special tokens are sampled from the LM head with temperature /
top-k; image tokens are produced by Euler integration of the flow head
from Gaussian noise, with optional token-level classifier-free guidance
running dual KV caches (conditional and unconditional contexts). Every
emitted image token is recorded in a TokenStatsTrace for the drift
diagnostic.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

from .model import GenerativeModel
from .backbone import KVCache
from .sequence import ImageSpan, ImageToken, MultimodalSequence
from .vocab import BOI_ID, EOI_ID, EOS_ID, IMAGE_AREA_ID, Vocabulary, decode_area

STD_FLOOR = 1e-6


@dataclass(frozen=True)
class GuidanceSpec:
    """Token-level CFG: v~ = (1-w) v(x|empty) + w v(x|y). The
    unconditional context defaults to the empty caption."""

    w: float = 1.0
    uncond_ids: tuple[int, ...] = ()

    def __post_init__(self):
        if self.w < 0:
            raise ValueError(f"guidance scale must be >= 0, got {self.w}")


@dataclass(frozen=True)
class SamplerConfig:
    euler_steps: int = 50
    temperature: float = 1.0
    top_k: int = 0
    max_image_tokens: int = 256
    seed: int = 0
    renormalize_tokens: bool = False
    forced_area: tuple[int, int] | None = None

    def __post_init__(self):
        if self.euler_steps < 1:
            raise ValueError("euler_steps must be >= 1")
        if self.temperature < 0 or self.top_k < 0:
            raise ValueError("temperature and top_k must be >= 0")


@dataclass(frozen=True)
class TokenStats:
    index: int
    mean: float
    variance: float


@dataclass
class TokenStatsTrace:
    records: list[TokenStats] = field(default_factory=list)

    def add(self, token: torch.Tensor):
        mean = float(token.mean())
        variance = float(token.var(unbiased=False))
        self.records.append(TokenStats(len(self.records), mean, variance))

    def __len__(self) -> int:
        return len(self.records)

    def to_csv(self) -> str:
        lines = ["token_index,mean,variance"]
        lines += [f"{r.index},{r.mean!r},{r.variance!r}" for r in self.records]
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class DriftBands:
    mean_low: float = -0.5
    mean_high: float = 0.5
    var_low: float = 0.5
    var_high: float = 2.0


@dataclass(frozen=True)
class DriftReport:
    max_abs_mean: float
    max_var_deviation: float
    first_violation: int  # -1 when every record stays inside the bands
    violations: int

    def to_csv(self) -> str:
        return (
            "max_abs_mean,max_var_deviation,first_violation,violations\n"
            f"{self.max_abs_mean!r},{self.max_var_deviation!r},"
            f"{self.first_violation},{self.violations}\n"
        )


def drift_report(trace: TokenStatsTrace, bands: DriftBands = DriftBands()) -> DriftReport:
    if len(trace) == 0:
        raise ValueError("drift_report needs a non-empty trace")
    first = -1
    violations = 0
    for r in trace.records:
        ok = (bands.mean_low <= r.mean <= bands.mean_high
              and bands.var_low <= r.variance <= bands.var_high)
        if not ok:
            violations += 1
            if first < 0:
                first = r.index
    return DriftReport(
        max_abs_mean=max(abs(r.mean) for r in trace.records),
        max_var_deviation=max(abs(r.variance - 1.0) for r in trace.records),
        first_violation=first,
        violations=violations,
    )


def guided_velocity(v_uncond: torch.Tensor, v_cond: torch.Tensor,
                    w: float) -> torch.Tensor:
    if v_uncond.shape != v_cond.shape:
        raise ValueError(f"shape mismatch: {v_uncond.shape} vs {v_cond.shape}")
    return (1.0 - w) * v_uncond + w * v_cond


def renormalize_token(token: torch.Tensor) -> torch.Tensor:
    """Standardize one token over its channels (std floored at 1e-6, so
    a constant token maps to zeros)."""
    mean = token.mean()
    std = token.std(unbiased=False).clamp_min(STD_FLOOR)
    return (token - mean) / std


def sample_image_token(head, cond_hidden: torch.Tensor,
                       uncond_hidden: torch.Tensor | None,
                       spec: GuidanceSpec, cfg: SamplerConfig,
                       generator: torch.Generator) -> torch.Tensor:
    """Integrate dx/dt = v~ from x ~ N(0, I) over euler_steps at
    t = k/steps. The unconditional branch consumes no randomness."""
    dtype = cond_hidden.dtype
    x = torch.randn(head.config.token_dim, generator=generator, dtype=dtype)
    dt = 1.0 / cfg.euler_steps
    for k in range(cfg.euler_steps):
        t = torch.tensor(k / cfg.euler_steps, dtype=dtype)
        v_cond = head(x, t, cond_hidden)
        if uncond_hidden is None:
            v = v_cond
        else:
            v = guided_velocity(head(x, t, uncond_hidden), v_cond, spec.w)
        x = x + dt * v
    return x


def sample_text_token(logits: torch.Tensor, temperature: float, top_k: int,
                      generator: torch.Generator) -> int:
    """temperature 0 selects the argmax and consumes no randomness."""
    if temperature == 0.0:
        return int(logits.argmax())
    scaled = logits / temperature
    if top_k > 0 and top_k < scaled.shape[-1]:
        kth = torch.topk(scaled, top_k).values[..., -1]
        scaled = scaled.masked_fill(scaled < kth, float("-inf"))
    probs = torch.softmax(scaled, dim=-1)
    return int(torch.multinomial(probs, 1, generator=generator))


class GenerationError(RuntimeError):
    pass


class GenerationBudgetError(GenerationError):
    """Image token budget exhausted before <eoi>. Carries the partial
    sequence and trace."""

    def __init__(self, message: str, sequence: MultimodalSequence,
                 trace: TokenStatsTrace):
        super().__init__(message)
        self.sequence = sequence
        self.trace = trace


def generate(model: GenerativeModel, prompt_ids: list[int], vocab: Vocabulary,
             cfg: SamplerConfig = SamplerConfig(),
             spec: GuidanceSpec | None = None,
             ) -> tuple[MultimodalSequence, TokenStatsTrace]:
    """Decode from a text prompt until <eos> (or the sequence-length
    limit). spec=None disables guidance entirely (conditional-only);
    spec with w = 1 is bit-identical to that, by construction."""
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            return _generate(model, prompt_ids, vocab, cfg, spec)
    finally:
        model.train(was_training)


def _generate(model, prompt_ids, vocab, cfg, spec):
    generator = torch.Generator().manual_seed(cfg.seed)
    seq = MultimodalSequence()
    trace = TokenStatsTrace()
    cond_cache = KVCache(model.config)
    uncond_cache = KVCache(model.config) if spec is not None else None
    hidden: torch.Tensor | None = None
    uncond_hidden: torch.Tensor | None = None

    def feed_text(token_id: int, to_uncond: bool = True):
        nonlocal hidden, uncond_hidden
        seq.append_text([token_id])
        hidden = model.backbone.forward_step(token_id, None, cond_cache)
        if to_uncond and uncond_cache is not None:
            uncond_hidden = model.backbone.forward_step(
                token_id, None, uncond_cache
            )

    def feed_image_token(token: torch.Tensor):
        nonlocal hidden, uncond_hidden
        seq.elements.append(ImageToken(token.numpy()))
        hidden = model.backbone.forward_step(-1, token, cond_cache)
        if uncond_cache is not None:
            uncond_hidden = model.backbone.forward_step(-1, token, uncond_cache)

    def emit_image(rows: int, cols: int):
        start = len(seq.elements)
        for _ in range(rows * cols):
            if len(trace) >= cfg.max_image_tokens:
                raise GenerationBudgetError(
                    f"image token budget {cfg.max_image_tokens} exhausted "
                    f"before <eoi>", seq, trace,
                )
            token = sample_image_token(
                model.fm_head, hidden, uncond_hidden, spec or GuidanceSpec(),
                cfg, generator,
            )
            if cfg.renormalize_tokens:
                token = renormalize_token(token)
            trace.add(token)
            feed_image_token(token)
        seq.image_spans.append(ImageSpan(start, rows, cols))
        feed_text(EOI_ID)

    # The prompt conditions only the conditional branch; the
    # unconditional cache starts from spec.uncond_ids instead.
    if len(prompt_ids) == 0:
        raise ValueError("prompt must contain at least one token")
    for token_id in prompt_ids:
        feed_text(token_id, to_uncond=False)
    if spec is not None:
        for token_id in spec.uncond_ids:
            uncond_hidden = model.backbone.forward_step(
                token_id, None, uncond_cache
            )

    if cfg.forced_area is not None:
        # Forced mode bypasses the area negotiation entirely: frame,
        # decode one grid, and stop.
        for token_id in vocab.encode_area(*cfg.forced_area) + [BOI_ID]:
            feed_text(token_id)
        emit_image(*cfg.forced_area)
        return seq, trace

    marker: list[int] | None = None
    while len(seq.elements) < model.config.max_seq_len:
        token_id = sample_text_token(
            model.lm_logits(hidden), cfg.temperature, cfg.top_k, generator
        )
        if token_id == EOS_ID:
            seq.append_text([EOS_ID])
            break
        if token_id == BOI_ID:
            if marker is None:
                raise GenerationError("<boi> emitted without an area marker")
            rows, cols = decode_area(marker)
            marker = None
            feed_text(BOI_ID)
            emit_image(rows, cols)
            continue
        if token_id == IMAGE_AREA_ID:
            marker = [token_id]
        elif marker is not None:
            marker.append(token_id)
        feed_text(token_id)
    return seq, trace
