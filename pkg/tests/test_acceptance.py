"""Acceptance gate: nine numbered criteria with pinned tolerances.

Each test prints exactly one `criterion N: PASS/FAIL` line outside the
capture machinery, so both `pytest -v` and plain runs show the verdicts
inline. Every stochastic quantity is drawn from pinned seeds, so a
passing run is reproducible bit for bit.
"""

import math
import pathlib
import time
from dataclasses import replace
from types import SimpleNamespace

import numpy as np
import pytest
import torch

from patchflow.ablate import DESK_ABLATION_HEADS, AblationSettings, ablate_heads
from patchflow.backbone import KVCache
from patchflow.checkpoint import (
    load_checkpoint, restore_model, restore_optimizer, restore_tokenizer,
    save_checkpoint,
)
from patchflow.config import load_config
from patchflow.corpus import SyntheticCorpusSpec, build_vocabulary, make_corpus
from patchflow.heads import FlowMatchingHead, count_params
from patchflow.latency import REFERENCE_ANCHORS, accumulate
from patchflow.latents import (
    PatchTokenizer, PatchTokenizerConfig, PerturbationSpec,
    compute_channel_stats, decode_tokens, depth_to_space, normalize, perturb,
    space_to_depth,
)
from patchflow.metrics import psnr
from patchflow.model import GenerativeModel
from patchflow.optim import AdamW
from patchflow.sampler import (
    GuidanceSpec, SamplerConfig, generate, guided_velocity, sample_image_token,
)
from patchflow.sequence import parse_sequence, sequence_arrays
from patchflow.trainer import (
    StageConfig, assemble_sequence, batch_at, corpus_stats, gradient_check,
    make_fixed_loss, supervision_positions, train_stage,
)

CONFIGS = pathlib.Path(__file__).resolve().parent.parent / "configs"


def _verdict(capsys, n: int, ok: bool, detail: str) -> str:
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    with capsys.disabled():
        print(line, flush=True)
    return line


# --- shared overfit run (criterion 4 owns its cost; 8 reuses the backbone) ---

OVERFIT_STAGE = StageConfig(
    name="overfit", lr_max=2e-3, lr_min=0.0, schedule="cosine",
    warmup_steps=50, total_steps=2000, lambda_text=0.01, lambda_visual=1.0,
    ratios={"pair": 1.0}, image_sizes=(32,), caption_drop=0.0, gamma=0.0,
    batch_size=16, samples_per_token=4, grad_clip=1.0, checkpoint_every=0,
    seed=0,
)


@pytest.fixture(scope="module")
def desk():
    cfg = load_config(str(CONFIGS / "desk.ini"))
    tokenizer = PatchTokenizer(cfg.tokenizer)
    vocab = build_vocabulary(cfg.model.vocab_size)
    corpus = make_corpus(
        SyntheticCorpusSpec(image_size=32, size_per_category=16, seed=0,
                            categories=("pair",)),
        tokenizer,
    )
    return SimpleNamespace(cfg=cfg, tokenizer=tokenizer, vocab=vocab,
                           corpus=corpus)


@pytest.fixture(scope="module")
def overfit(desk):
    model = GenerativeModel(desk.cfg.model, seed=desk.cfg.model_seed)
    t0 = time.perf_counter()
    history, optimizer = train_stage(
        model, OVERFIT_STAGE, desk.corpus, desk.vocab, desk.tokenizer
    )
    seconds = time.perf_counter() - t0
    return SimpleNamespace(model=model, optimizer=optimizer, history=history,
                           seconds=seconds)


def test_criterion_1_latency_table(capsys):
    t0 = time.perf_counter()
    profile = accumulate(REFERENCE_ANCHORS, lengths=(256, 1024, 4096))
    elapsed = time.perf_counter() - t0
    targets = {256: (2.82, 1.95), 1024: (11.31, 7.83), 4096: (45.77, 31.86)}
    worst = 0.0
    for row in profile.rows:
        total_ref, wo_fm_ref = targets[row.context_len]
        worst = max(worst, abs(row.accum_s - total_ref) / total_ref,
                    abs(row.accum_wo_fm_s - wo_fm_ref) / wo_fm_ref)
    ok = worst < 0.02 and elapsed < 1.0
    line = _verdict(
        capsys, 1, ok,
        f"accumulated latency vs reference (2.82/11.31/45.77 s and "
        f"1.95/7.83/31.86 s w/o FM): worst deviation {worst * 100:.2f}% "
        f"(tolerance 2%); runtime {elapsed:.3f} s (< 1 s)",
    )
    assert ok, line


def test_criterion_2_param_counts(capsys):
    t0 = time.perf_counter()
    table = {
        "small": ((6, 1024), 40e6, 0.15),
        "base": ((12, 1536), 157e6, 0.10),
        "large": ((24, 2048), 528e6, 0.15),
    }
    from patchflow.ablate import REFERENCE_HEADS
    worst_rel = 0.0
    enum_exact = True
    counts = {}
    for name, ((layers, hidden), target, tol) in table.items():
        config = REFERENCE_HEADS[name]
        assert (config.layers, config.hidden) == (layers, hidden)
        n = count_params(config)
        counts[name] = n
        worst_rel = max(worst_rel, abs(n - target) / target / tol)
        with torch.device("meta"):
            head = FlowMatchingHead(config)
        enum_exact &= n == sum(p.numel() for p in head.parameters())
    elapsed = time.perf_counter() - t0
    ok = worst_rel < 1.0 and enum_exact and elapsed < 1.0
    line = _verdict(
        capsys, 2, ok,
        f"head params {counts['small']:,}/{counts['base']:,}/"
        f"{counts['large']:,} vs 40M/157M/528M within 15%/10%/15% "
        f"(worst at {worst_rel * 100:.1f}% of budget); closed form == "
        f"enumerated tensors: {enum_exact}; runtime {elapsed:.3f} s (< 1 s)",
    )
    assert ok, line


def test_criterion_3_gradient_check(capsys):
    t0 = time.perf_counter()
    cfg = load_config(str(CONFIGS / "gradcheck.ini"))
    model = GenerativeModel(cfg.model, seed=cfg.model_seed).double()
    tokenizer = PatchTokenizer(cfg.tokenizer)
    vocab = build_vocabulary(cfg.model.vocab_size)
    corpus = make_corpus(cfg.corpus, tokenizer)
    model.set_channel_stats(
        corpus_stats({corpus.spec.image_size: corpus}, tokenizer)
    )
    rng = np.random.default_rng(0)
    batch = [s for s in corpus.samples if s.images()][:2]
    seqs = [
        assemble_sequence(s, vocab, tokenizer, model.channel_stats(),
                          gamma=0.0, drop_caption=False, rng=rng)
        for s in batch
    ]
    both_active = all(
        supervision_positions(sequence_arrays(s, cfg.model.token_dim)[0])[i]
        for s in seqs for i in (0, 1)
    )
    loss_fn = make_fixed_loss(model, seqs, lambda_text=0.01,
                              lambda_visual=1.0, samples_per_token=2, seed=0)
    report = gradient_check(model, loss_fn, epsilon=1e-4, min_coords=200,
                            seed=0)
    elapsed = time.perf_counter() - t0
    ok = both_active and report.max_rel_err < 1e-4 and elapsed < 120.0
    line = _verdict(
        capsys, 3, ok,
        f"finite differences vs autograd on 2-layer dim-32 model, both "
        f"losses active ({both_active}): max rel err {report.max_rel_err:.3e} "
        f"over {report.coords_checked} coordinates (tolerance 1e-4, 64-bit); "
        f"runtime {elapsed:.1f} s (< 120 s)",
    )
    assert ok, line


def test_criterion_4_overfit_convergence(capsys, desk, overfit):
    t0 = time.perf_counter()
    model = overfit.model
    initial = overfit.history[0].total
    final = overfit.history[-1].total
    loss_ok = final < 0.10 * initial

    spec = GuidanceSpec(w=1.0)
    cfg = SamplerConfig(euler_steps=64, temperature=0.0, seed=0)
    psnrs = []
    for sample in desk.corpus.samples:
        caption = sample.texts()[0]
        target = sample.images()[0]
        seq, _ = generate(model, desk.vocab.tokenize(caption), desk.vocab,
                          cfg, spec)
        _, images = parse_sequence(seq)
        if not images:
            psnrs.append(float("-inf"))
            continue
        decoded = decode_tokens(images[0].tokens, desk.tokenizer,
                                model.channel_stats())
        psnrs.append(psnr(decoded, target))
    elapsed = overfit.seconds + (time.perf_counter() - t0)
    psnr_ok = min(psnrs) >= 25.0
    ok = loss_ok and psnr_ok and elapsed < 1800.0
    line = _verdict(
        capsys, 4, ok,
        f"overfit 16 pairs / 2000 steps on {model.param_count():,}-param "
        f"model: loss {initial:.4g} -> {final:.4g} "
        f"({final / initial * 100:.1f}% of initial, need < 10%); per-caption "
        f"PSNR min {min(psnrs):.1f} dB / median "
        f"{sorted(psnrs)[len(psnrs) // 2]:.1f} dB (need >= 25, w=1, 64 Euler "
        f"steps); runtime {elapsed:.0f} s (< 1800 s)",
    )
    assert ok, line


def test_criterion_5_cfg_algebra(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(10_000):
        v_u = torch.from_numpy(rng.normal(size=64))
        v_c = torch.from_numpy(rng.normal(size=64))
        w = float(rng.uniform(0.0, 4.0))
        lhs = float(torch.linalg.norm(guided_velocity(v_u, v_c, w) - v_c))
        rhs = abs(w - 1.0) * float(torch.linalg.norm(v_c - v_u))
        worst = max(worst, abs(lhs - rhs))
    algebra_ok = worst < 1e-6

    from patchflow.heads import FMHeadConfig
    from patchflow.backbone import ModelConfig
    tiny = ModelConfig(
        layers=2, model_dim=32, n_heads=2, ffn_dim=64, vocab_size=64,
        max_seq_len=64, token_dim=64,
        head=FMHeadConfig(layers=2, hidden=32, cond_dim=32, token_dim=64,
                          time_dim=8),
    )
    model = GenerativeModel(tiny, seed=0)
    vocab = build_vocabulary(64)
    scfg = SamplerConfig(euler_steps=16, temperature=0.0, seed=3,
                         forced_area=(3, 3))
    plain_seq, plain_trace = generate(model, [16, 17], vocab, scfg, spec=None)
    guided_seq, guided_trace = generate(model, [16, 17], vocab, scfg,
                                        spec=GuidanceSpec(w=1.0))
    bit_ok = (
        np.array_equal(parse_sequence(plain_seq)[1][0].tokens,
                       parse_sequence(guided_seq)[1][0].tokens)
        and [(r.mean, r.variance) for r in plain_trace.records]
        == [(r.mean, r.variance) for r in guided_trace.records]
    )
    elapsed = time.perf_counter() - t0
    ok = algebra_ok and bit_ok and elapsed < 10.0
    line = _verdict(
        capsys, 5, ok,
        f"||v_guided - v_cond|| == |w-1| * ||v_cond - v_uncond|| on 10^4 "
        f"draws: worst |lhs - rhs| {worst:.2e} (tolerance 1e-6); w=1 "
        f"sampling bit-identical to conditional-only: {bit_ok}; runtime "
        f"{elapsed:.1f} s (< 10 s)",
    )
    assert ok, line


class AnalyticTransportHead:
    """MMSE-optimal rectified-flow velocity for N(0, I) -> N(mu, I) under
    the independent coupling, applied blockwise so one token carries n
    iid samples: v(x, t) = mu + (2t - 1) (x - t mu) / ((1-t)^2 + t^2).
    Its exact flow map is the translation x0 + mu."""

    def __init__(self, mu: torch.Tensor, blocks: int):
        self.mu = mu.repeat(blocks)
        self.config = SimpleNamespace(token_dim=self.mu.numel())

    def __call__(self, x, t, cond):
        t = float(t)
        s2 = (1.0 - t) ** 2 + t ** 2
        return self.mu + (2.0 * t - 1.0) * (x - t * self.mu) / s2


def test_criterion_6_gaussian_transport(capsys):
    t0 = time.perf_counter()
    mu = torch.linspace(-2.0, 2.0, 8, dtype=torch.float64)
    n = 10_000
    head = AnalyticTransportHead(mu, blocks=n)
    cond = torch.zeros(1, dtype=torch.float64)
    x0 = torch.randn(head.config.token_dim,
                     generator=torch.Generator().manual_seed(0),
                     dtype=torch.float64)
    exact = x0 + head.mu

    errors = {}
    finals = {}
    for steps in (8, 16, 32, 64):
        cfg = SamplerConfig(euler_steps=steps, seed=0)
        out = sample_image_token(head, cond, None, GuidanceSpec(), cfg,
                                 torch.Generator().manual_seed(0))
        finals[steps] = out
        errors[steps] = float(torch.sqrt(((out - exact) ** 2).mean()))

    means = finals[64].reshape(n, 8).mean(dim=0)
    mean_dev = float((means - mu).abs().max())
    seq = [errors[s] for s in (8, 16, 32, 64)]
    monotone = all(a >= b for a, b in zip(seq, seq[1:]))
    elapsed = time.perf_counter() - t0
    ok = mean_dev < 0.05 and monotone and elapsed < 60.0
    line = _verdict(
        capsys, 6, ok,
        f"analytic N(0,I)->N(mu,I) transport, 10^4 samples: max |mean - mu| "
        f"{mean_dev:.4f} at 64 steps (tolerance 0.05); RMS transport error "
        f"{seq[0]:.4f}/{seq[1]:.4f}/{seq[2]:.4f}/{seq[3]:.4f} at 8/16/32/64 "
        f"steps (non-increasing: {monotone}); runtime {elapsed:.1f} s (< 60 s)",
    )
    assert ok, line


def test_criterion_7_latent_invariants(capsys, desk):
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)

    grid = rng.normal(size=(6, 8, 16)).astype(np.float32)
    tokens = rng.normal(size=(3, 4, 64)).astype(np.float32)
    shuffle_ok = (
        np.array_equal(depth_to_space(space_to_depth(grid)), grid)
        and np.array_equal(space_to_depth(depth_to_space(tokens)), tokens)
    )

    identity = PatchTokenizer(PatchTokenizerConfig(patch=4, channels=48))
    image = rng.random((32, 32, 3)).astype(np.float32)
    patchify_ok = np.array_equal(
        identity.unpatchify(identity.patchify(image)), image
    )
    for img in desk.corpus.images()[:4]:
        patchify_ok &= np.array_equal(
            identity.unpatchify(identity.patchify(img)), img
        )

    grids = [desk.tokenizer.patchify(img) for img in desk.corpus.images()]
    stats = compute_channel_stats(grids)
    pooled = np.concatenate(
        [normalize(g, stats).reshape(-1, stats.channels) for g in grids]
    ).astype(np.float64)
    mean_dev = float(np.abs(pooled.mean(axis=0)).max())
    std_dev = float(np.abs(pooled.std(axis=0) - 1.0).max())
    renorm_ok = mean_dev < 1e-5 and std_dev < 1e-4

    gamma = 0.5
    values = np.concatenate([
        perturb(np.zeros((5, 5, 1), dtype=np.float32),
                PerturbationSpec(gamma, seed=k)).ravel()
        for k in range(4000)
    ])
    var = float(np.mean(values.astype(np.float64) ** 2))
    var_dev = abs(var - gamma**2 / 3.0)
    var_ok = var_dev < 0.005 and values.size == 100_000

    elapsed = time.perf_counter() - t0
    ok = shuffle_ok and patchify_ok and renorm_ok and var_ok and elapsed < 60.0
    line = _verdict(
        capsys, 7, ok,
        f"pixel-shuffle and patchify round trips bit-exact: "
        f"{shuffle_ok and patchify_ok}; corpus renorm max |mean| "
        f"{mean_dev:.1e} (< 1e-5), max |std-1| {std_dev:.1e} (< 1e-4); "
        f"perturbation variance {var:.4f} vs gamma^2/3 = "
        f"{gamma ** 2 / 3:.4f} (dev {var_dev:.4f}, tolerance 0.005, 10^5 "
        f"samples); runtime {elapsed:.1f} s (< 60 s)",
    )
    assert ok, line


def test_criterion_8_head_size_insensitivity(capsys, desk, overfit):
    t0 = time.perf_counter()
    settings = AblationSettings(steps=1500, batch_size=128, lr=2e-3,
                                weight_decay=0.0, caption_drop=0.5,
                                eval_draws=64, seed=0)
    report = ablate_heads(overfit.model, DESK_ABLATION_HEADS, desk.corpus,
                          desk.vocab, desk.tokenizer, settings)
    diff = report.max_pairwise_rel_diff()
    elapsed = time.perf_counter() - t0
    ok = diff <= 0.15 and elapsed < 3600.0
    losses = ", ".join(
        f"{r.name}({r.params:,}p)={r.final_fm_loss:.4f}" for r in report.rows
    )
    line = _verdict(
        capsys, 8, ok,
        f"equal-budget head-only training ({settings.steps} steps, batch "
        f"{settings.batch_size}): final flow loss {losses}; max pairwise "
        f"difference {diff * 100:.1f}% (tolerance 15%); runtime "
        f"{elapsed:.0f} s (< 3600 s)",
    )
    assert ok, line


def test_criterion_9_infrastructure(capsys, tmp_path, desk, overfit):
    t0 = time.perf_counter()

    a = tmp_path / "a.pfck"
    b = tmp_path / "b.pfck"
    save_checkpoint(str(a), overfit.model, overfit.optimizer, 2000,
                    "overfit", desk.vocab, desk.tokenizer.config)
    ckpt = load_checkpoint(str(a))
    restored, rvocab = restore_model(ckpt)
    opt = AdamW(restored.parameters(), lr=OVERFIT_STAGE.lr_max)
    restore_optimizer(ckpt, restored, opt)
    save_checkpoint(str(b), restored, opt, ckpt.step, ckpt.config["stage"],
                    rvocab, restore_tokenizer(ckpt).config)
    byte_ok = a.read_bytes() == b.read_bytes()

    stage20 = StageConfig(
        name="resume", lr_max=1e-3, schedule="constant", total_steps=20,
        ratios={"pair": 1.0}, image_sizes=(32,), caption_drop=0.0, gamma=0.5,
        batch_size=2, samples_per_token=2, seed=11,
    )
    straight = GenerativeModel(desk.cfg.model, seed=1)
    hist_straight, _ = train_stage(straight, stage20, desk.corpus, desk.vocab,
                                   desk.tokenizer)
    half = GenerativeModel(desk.cfg.model, seed=1)
    stage10 = replace(stage20, total_steps=10)
    _, opt10 = train_stage(half, stage10, desk.corpus, desk.vocab,
                           desk.tokenizer)
    mid = tmp_path / "mid.pfck"
    save_checkpoint(str(mid), half, opt10, 10, stage20.name, desk.vocab,
                    desk.tokenizer.config)
    ckpt10 = load_checkpoint(str(mid))
    resumed, _ = restore_model(ckpt10)
    opt_resumed = AdamW(resumed.parameters(), lr=stage20.lr_max)
    restore_optimizer(ckpt10, resumed, opt_resumed)
    hist_resumed, _ = train_stage(resumed, stage20, desk.corpus, desk.vocab,
                                  desk.tokenizer, start_step=ckpt10.step,
                                  optimizer=opt_resumed)
    resume_ok = (
        [r.total for r in hist_resumed]
        == [r.total for r in hist_straight[10:]]
        and all(torch.equal(p, q) for p, q in
                zip(straight.parameters(), resumed.parameters()))
    )

    mix_corpus = make_corpus(
        SyntheticCorpusSpec(image_size=32, size_per_category=4, seed=0),
        desk.tokenizer,
    )
    stage1 = desk.cfg.stages["stage1"]
    counts = {c: 0 for c in stage1.ratios}
    total = 0
    for step in range(10_000):
        _, batch = batch_at({32: mix_corpus}, stage1, step)
        for s in batch:
            counts[s.category] += 1
            total += 1
    mix_dev = max(abs(counts[c] / total - r) for c, r in stage1.ratios.items())
    mix_ok = mix_dev < 0.02

    sample = desk.corpus.samples[0]
    seq = assemble_sequence(sample, desk.vocab, desk.tokenizer,
                            overfit.model.channel_stats(), gamma=0.0,
                            drop_caption=False, rng=np.random.default_rng(0))
    ids_np, vecs_np = sequence_arrays(seq, desk.cfg.model.token_dim)
    model = overfit.model
    model.eval()
    with torch.no_grad():
        full = model(torch.from_numpy(ids_np), torch.from_numpy(vecs_np))
        cache = KVCache(model.config)
        worst_kv = 0.0
        for i in range(len(ids_np)):
            vec = None if ids_np[i] >= 0 else torch.from_numpy(vecs_np[i])
            hidden = model.backbone.forward_step(int(ids_np[i]), vec, cache)
            worst_kv = max(worst_kv, float((hidden - full[i]).abs().max()))
    kv_ok = worst_kv < 1e-4

    elapsed = time.perf_counter() - t0
    ok = byte_ok and resume_ok and mix_ok and kv_ok and elapsed < 300.0
    line = _verdict(
        capsys, 9, ok,
        f"checkpoint re-save byte-identical: {byte_ok}; 10+10-step resume == "
        f"20 straight steps bitwise: {resume_ok}; batch-mix deviation "
        f"{mix_dev * 100:.2f}% from 0.2/0.6/0.2 over 10^4 batches "
        f"(tolerance 2%); KV cache vs full forward max diff {worst_kv:.1e} "
        f"(< 1e-4); runtime {elapsed:.0f} s (< 300 s)",
    )
    assert ok, line
