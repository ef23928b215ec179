"""Command-line entry points.

Subcommands:
    sample     decode text and one or more images from a checkpoint
    train      run one training stage from a config file
    corpus     materialize the synthetic corpus to disk
    gradcheck  finite-difference gradient verification
    latency    roofline latency table from per-token anchors
    ablate     equal-budget flow-head size ablation
    params     closed-form head parameter counts
"""

from __future__ import annotations

import argparse
import configparser
import os
import sys
from dataclasses import replace

import numpy as np

from .ablate import (AblationSettings, DESK_ABLATION_HEADS, REFERENCE_HEADS,
                     ablate_heads)
from .checkpoint import (load_checkpoint, restore_model, restore_optimizer,
                         restore_tokenizer, save_checkpoint)
from .config import ConfigError, load_config
from .corpus import SyntheticCorpusSpec, build_vocabulary, make_corpus
from .heads import count_params
from .latency import (H100, HardwareSpec, REFERENCE_ANCHORS, accumulate,
                      fit_decoder_cost, parse_anchor_csv)
from .latents import (PatchTokenizer, decode_tokens, histogram_to_csv,
                      latent_histogram, normalize)
from .model import GenerativeModel
from .optim import AdamW
from .ppm import write_ppm
from .sampler import (DriftBands, GenerationBudgetError, GuidanceSpec,
                      SamplerConfig, drift_report, generate)
from .sequence import parse_sequence
from .trainer import (assemble_sequence, corpus_stats, gradient_check,
                      loss_history_csv, make_fixed_loss, train_stage)


def _write(path: str, text: str):
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        f.write(text)


def _parse_area(raw: str) -> tuple[int, int]:
    rows, _, cols = raw.partition("x")
    return int(rows), int(cols)


def _resolve_ckpt(path: str) -> str:
    """Accept a .pfck file or a directory holding them (latest wins)."""
    if os.path.isdir(path):
        names = sorted(n for n in os.listdir(path) if n.endswith(".pfck"))
        if not names:
            raise FileNotFoundError(f"no .pfck checkpoints under {path}")
        return os.path.join(path, names[-1])
    return path


def _cmd_sample(args) -> int:
    ckpt = load_checkpoint(_resolve_ckpt(args.ckpt))
    model, vocab = restore_model(ckpt)
    tokenizer = restore_tokenizer(ckpt)
    prompt_ids = vocab.tokenize(args.prompt)
    spec = None if args.cfg_scale is None else GuidanceSpec(w=args.cfg_scale)
    cfg = SamplerConfig(
        euler_steps=args.steps,
        temperature=args.temperature,
        top_k=args.top_k,
        max_image_tokens=args.max_image_tokens,
        seed=args.seed,
        renormalize_tokens=args.renormalize,
        forced_area=_parse_area(args.force_area) if args.force_area else None,
    )
    try:
        seq, trace = generate(model, prompt_ids, vocab, cfg, spec)
    except GenerationBudgetError as exc:
        if args.trace:
            _write(args.trace, exc.trace.to_csv())
        print(f"error: {exc}", file=sys.stderr)
        return 1

    if args.trace:
        _write(args.trace, trace.to_csv())
    text_ids, images = parse_sequence(seq)
    print(f"text: {vocab.detokenize(text_ids)}")
    print(f"images: {len(images)}  image tokens: {len(trace)}")
    if len(trace):
        report = drift_report(trace, DriftBands())
        print(f"drift: max |mean| {report.max_abs_mean:.4f}, "
              f"max var deviation {report.max_var_deviation:.4f}, "
              f"first violation at {report.first_violation}")
    if args.out:
        if not images:
            print("error: no image in the generated sequence", file=sys.stderr)
            return 1
        decoded = decode_tokens(images[0].tokens, tokenizer,
                                model.channel_stats())
        parent = os.path.dirname(args.out)
        if parent:
            os.makedirs(parent, exist_ok=True)
        write_ppm(args.out, decoded)
        print(f"wrote {args.out} ({decoded.shape[0]}x{decoded.shape[1]})")
    return 0


def _cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.stage not in cfg.stages:
        known = ", ".join(sorted(cfg.stages)) or "(none)"
        print(f"error: unknown stage {args.stage!r}; config defines: {known}",
              file=sys.stderr)
        return 1
    stage = cfg.stages[args.stage]
    tokenizer = PatchTokenizer(cfg.tokenizer)
    vocab = build_vocabulary(cfg.model.vocab_size)
    model = GenerativeModel(cfg.model, seed=cfg.model_seed)
    optimizer = None
    start_step = 0
    if args.resume:
        ckpt = load_checkpoint(_resolve_ckpt(args.resume))
        model, vocab = restore_model(ckpt)
        tokenizer = restore_tokenizer(ckpt)
        optimizer = AdamW(model.parameters(), lr=stage.lr_max)
        restore_optimizer(ckpt, model, optimizer)
        if ckpt.config.get("stage") == stage.name:
            start_step = ckpt.step  # mid-stage resume
        print(f"resumed from {args.resume} "
              f"(stage {ckpt.config.get('stage')!r}, step {ckpt.step}); "
              f"starting at step {start_step}")

    corpora = {
        size: make_corpus(replace(cfg.corpus, image_size=size), tokenizer)
        for size in stage.image_sizes
    }
    os.makedirs(args.out, exist_ok=True)
    history, optimizer = train_stage(
        model, stage, corpora, vocab, tokenizer,
        out_dir=args.out, start_step=start_step, optimizer=optimizer,
    )
    _write(os.path.join(args.out, "loss.csv"), loss_history_csv(history))
    final = os.path.join(args.out, f"{stage.name}_final.pfck")
    save_checkpoint(final, model, optimizer, stage.total_steps, stage.name,
                    vocab, tokenizer.config)
    if history:
        print(f"stage {stage.name}: {len(history)} steps, "
              f"total loss {history[0].total:.6g} -> {history[-1].total:.6g}")
    print(f"wrote {final}")
    return 0


def _cmd_corpus(args) -> int:
    cfg = load_config(args.spec)
    tokenizer = PatchTokenizer(cfg.tokenizer)
    corpus = make_corpus(cfg.corpus, tokenizer)
    vocab = build_vocabulary(cfg.model.vocab_size)
    os.makedirs(os.path.join(args.out, "images"), exist_ok=True)
    vocab.save(os.path.join(args.out, "vocab.txt"))

    lines = []
    image_index = 0
    for sample in corpus.samples:
        parts = []
        for segment in sample.segments:
            if isinstance(segment, str):
                parts.append(segment)
            else:
                name = f"{image_index:03d}.ppm"
                write_ppm(os.path.join(args.out, "images", name), segment)
                parts.append(f"<image:{name}>")
                image_index += 1
        lines.append(f"{sample.category}\t" + " | ".join(parts))
    _write(os.path.join(args.out, "samples.txt"), "\n".join(lines) + "\n")

    grids = [tokenizer.patchify(img) for img in corpus.images()]
    stats = corpus_stats({corpus.spec.image_size: corpus}, tokenizer)
    normalized = [normalize(g, stats) for g in grids]
    _write(os.path.join(args.out, "histogram.csv"),
           histogram_to_csv(latent_histogram(normalized, bins=args.bins)))
    print(f"wrote {len(corpus.samples)} samples ({image_index} images) "
          f"to {args.out}")
    return 0


def _cmd_gradcheck(args) -> int:
    cfg = load_config(args.config)
    model = GenerativeModel(cfg.model, seed=cfg.model_seed)
    model.double()
    tokenizer = PatchTokenizer(cfg.tokenizer)
    vocab = build_vocabulary(cfg.model.vocab_size)
    corpus = make_corpus(cfg.corpus, tokenizer)
    model.set_channel_stats(
        corpus_stats({corpus.spec.image_size: corpus}, tokenizer)
    )
    rng = np.random.default_rng(args.seed)
    batch = [s for s in corpus.samples if s.images()][: args.batch]
    if not batch:
        print("error: the corpus has no image-bearing samples", file=sys.stderr)
        return 1
    seqs = [
        assemble_sequence(s, vocab, tokenizer, model.channel_stats(),
                          gamma=0.0, drop_caption=False, rng=rng)
        for s in batch
    ]
    loss_fn = make_fixed_loss(model, seqs, lambda_text=0.01, lambda_visual=1.0,
                              samples_per_token=2, seed=args.seed)
    report = gradient_check(model, loss_fn, epsilon=args.epsilon,
                            min_coords=args.coords, seed=args.seed)
    print(report.describe())
    if args.sweep:
        print("epsilon sweep (max rel err):")
        for eps in (1e-4, 1e-5, 1e-6):
            sweep = gradient_check(model, loss_fn, epsilon=eps,
                                   min_coords=min(args.coords, 60),
                                   seed=args.seed)
            print(f"  eps {eps:.0e}  {sweep.max_rel_err:.3e}")
    if report.max_rel_err >= args.threshold:
        print(f"FAIL: max rel err {report.max_rel_err:.3e} "
              f">= {args.threshold:.0e}", file=sys.stderr)
        return 1
    print(f"OK: max rel err {report.max_rel_err:.3e} < {args.threshold:.0e}")
    return 0


def _load_hardware(path: str | None) -> HardwareSpec:
    if path is None:
        return H100
    parser = configparser.ConfigParser(interpolation=None)
    with open(path, "r", encoding="utf-8") as f:
        parser.read_string(f.read())
    raw = dict(parser.items("hardware"))
    return HardwareSpec(flops_per_s=float(raw["flops_per_s"]),
                        bytes_per_s=float(raw["bytes_per_s"]))


def _cmd_latency(args) -> int:
    hw = _load_hardware(args.hw)
    if args.anchors:
        with open(args.anchors, "r", encoding="utf-8") as f:
            anchors = parse_anchor_csv(f.read())
    else:
        anchors = REFERENCE_ANCHORS
    lengths = tuple(int(x) for x in args.lengths.split(",") if x.strip())
    profile = accumulate(anchors, lengths)
    _write(args.out, profile.to_csv())
    print(profile.to_csv(), end="")
    fitted = fit_decoder_cost(args.params, hw, anchors,
                              bytes_per_param=args.bytes_per_param)
    print(fitted.describe())
    print(f"wrote {args.out}")
    return 0


def _cmd_ablate(args) -> int:
    ckpt = load_checkpoint(_resolve_ckpt(args.ckpt))
    model, vocab = restore_model(ckpt)
    tokenizer = restore_tokenizer(ckpt)
    if args.configs:
        cfg = load_config(args.configs)
        heads = cfg.heads
        if not heads:
            print("error: configs file defines no [head:*] sections",
                  file=sys.stderr)
            return 1
        corpus = make_corpus(cfg.corpus, tokenizer)
    else:
        heads = dict(DESK_ABLATION_HEADS)
        corpus = make_corpus(SyntheticCorpusSpec(), tokenizer)
    settings = AblationSettings(steps=args.steps, batch_size=args.batch_size,
                                lr=args.lr, eval_draws=args.eval_draws,
                                seed=args.seed)
    report = ablate_heads(model, heads, corpus, vocab, tokenizer, settings,
                          sample_images=args.sample_images)
    _write(args.out, report.to_csv())
    print(report.to_csv(), end="")
    print(f"max pairwise relative fm-loss difference: "
          f"{report.max_pairwise_rel_diff():.4f}")
    print(f"wrote {args.out}")
    return 0


def _cmd_params(args) -> int:
    if args.config:
        cfg = load_config(args.config)
        heads = cfg.heads
        if not heads:
            print("error: config defines no [head:*] sections",
                  file=sys.stderr)
            return 1
    else:
        heads = dict(REFERENCE_HEADS)
    lines = ["name,layers,hidden,params"]
    for name, config in heads.items():
        lines.append(f"{name},{config.layers},{config.hidden},"
                     f"{count_params(config)}")
    text = "\n".join(lines) + "\n"
    print(text, end="")
    if args.out:
        _write(args.out, text)
        print(f"wrote {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="patchflow",
        description="autoregressive text+image generation with "
                    "continuous patch tokens",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("sample", help="decode from a checkpoint")
    p.add_argument("--ckpt", required=True, help=".pfck file or directory")
    p.add_argument("--prompt", required=True)
    p.add_argument("--cfg-scale", type=float, default=None,
                   help="guidance weight w; omit for conditional-only")
    p.add_argument("--steps", type=int, default=50, help="Euler steps")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="PPM path for the first image")
    p.add_argument("--trace", default=None, help="CSV path for token stats")
    p.add_argument("--renormalize", action="store_true",
                   help="renormalize each image token before committing it")
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--top-k", type=int, default=0)
    p.add_argument("--force-area", default=None, metavar="RxC",
                   help="skip the area negotiation and decode RxC tokens")
    p.add_argument("--max-image-tokens", type=int, default=256)
    p.set_defaults(func=_cmd_sample)

    p = sub.add_parser("train", help="run one training stage")
    p.add_argument("--config", required=True)
    p.add_argument("--stage", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", default=None,
                   help="checkpoint to warm-start (same stage resumes mid-run)")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("corpus", help="materialize the synthetic corpus")
    p.add_argument("--spec", required=True, help="config file with [corpus]")
    p.add_argument("--out", required=True)
    p.add_argument("--bins", type=int, default=32)
    p.set_defaults(func=_cmd_corpus)

    p = sub.add_parser("gradcheck", help="finite-difference gradient check")
    p.add_argument("--config", required=True)
    p.add_argument("--epsilon", type=float, default=1e-5)
    p.add_argument("--coords", type=int, default=200)
    p.add_argument("--threshold", type=float, default=1e-4)
    p.add_argument("--batch", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sweep", action="store_true",
                   help="also report errors at eps 1e-4, 1e-5, 1e-6")
    p.set_defaults(func=_cmd_gradcheck)

    p = sub.add_parser("latency", help="roofline latency table")
    p.add_argument("--hw", default=None,
                   help="INI file with [hardware] flops_per_s / bytes_per_s")
    p.add_argument("--anchors", default=None,
                   help="CSV context_len,llm_ms,lmhead_ms,fmhead_ms")
    p.add_argument("--lengths", default="256,1024,4096")
    p.add_argument("--out", default="latency.csv")
    p.add_argument("--params", type=float, default=14e9,
                   help="decoder parameter count for the fitted cost model")
    p.add_argument("--bytes-per-param", type=float, default=1.0)
    p.set_defaults(func=_cmd_latency)

    p = sub.add_parser("ablate", help="flow-head size ablation")
    p.add_argument("--ckpt", required=True, help=".pfck file or directory")
    p.add_argument("--configs", default=None,
                   help="config file with [head:*] sections")
    p.add_argument("--steps", type=int, default=1500)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--lr", type=float, default=2e-3)
    p.add_argument("--eval-draws", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sample-images", action="store_true")
    p.add_argument("--out", default="ablation.csv")
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("params", help="closed-form head parameter counts")
    p.add_argument("--config", default=None,
                   help="config file with [head:*] sections")
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_params)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
