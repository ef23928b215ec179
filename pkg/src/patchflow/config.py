"""Structured text configuration.

INI-style files (key = value lines under [section] headers) define the
model, its flow head, the tokenizer, the corpus spec, training stages
([stage:<name>]) and standalone head configs ([head:<name>]). Unknown
sections or keys are errors, as are malformed values.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field

from .backbone import ModelConfig
from .corpus import SyntheticCorpusSpec
from .heads import FMHeadConfig
from .latents import PatchTokenizerConfig
from .trainer import StageConfig


class ConfigError(ValueError):
    pass


def _csv_ints(raw: str) -> tuple[int, ...]:
    return tuple(int(x) for x in raw.split(",") if x.strip())


def _csv_strs(raw: str) -> tuple[str, ...]:
    return tuple(x.strip() for x in raw.split(",") if x.strip())


_MODEL_KEYS = {
    "layers": int, "model_dim": int, "n_heads": int, "ffn_dim": int,
    "vocab_size": int, "max_seq_len": int, "token_dim": int,
    "rope_base": float, "seed": int,
}
_FM_HEAD_KEYS = {"layers": int, "hidden": int, "time_dim": int}
_HEAD_KEYS = {
    "layers": int, "hidden": int, "cond_dim": int, "token_dim": int,
    "time_dim": int,
}
_TOKENIZER_KEYS = {
    "patch": int, "channels": int, "projection_seed": int, "gamma": float,
}
_CORPUS_KEYS = {
    "image_size": int, "size_per_category": int, "seed": int,
    "categories": _csv_strs,
}
_STAGE_KEYS = {
    "lr_max": float, "lr_min": float, "schedule": str, "warmup_steps": int,
    "total_steps": int, "lambda_text": float, "lambda_visual": float,
    "ratio_text": float, "ratio_pair": float, "ratio_edit": float,
    "ratio_interleaved": float, "image_sizes": _csv_ints,
    "caption_drop": float, "gamma": float, "batch_size": int,
    "samples_per_token": int, "grad_clip": float, "checkpoint_every": int,
    "seed": int,
}


def _parse_section(name: str, raw: dict[str, str], schema: dict) -> dict:
    out = {}
    for key, value in raw.items():
        if key not in schema:
            raise ConfigError(f"unknown key {key!r} in section [{name}]")
        try:
            out[key] = schema[key](value)
        except ConfigError:
            raise
        except Exception as exc:
            raise ConfigError(
                f"bad value for {key!r} in [{name}]: {value!r} ({exc})"
            ) from exc
    return out


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    model_seed: int = 0
    tokenizer: PatchTokenizerConfig = field(default_factory=PatchTokenizerConfig)
    corpus: SyntheticCorpusSpec = field(default_factory=SyntheticCorpusSpec)
    stages: dict[str, StageConfig] = field(default_factory=dict)
    heads: dict[str, FMHeadConfig] = field(default_factory=dict)


def parse_config(text: str) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc

    cfg = ExperimentConfig()
    model_kwargs: dict = {}
    fm_head_kwargs: dict = {}
    for section in parser.sections():
        raw = dict(parser.items(section))
        if section == "model":
            model_kwargs = _parse_section(section, raw, _MODEL_KEYS)
        elif section == "fm_head":
            fm_head_kwargs = _parse_section(section, raw, _FM_HEAD_KEYS)
        elif section == "tokenizer":
            cfg.tokenizer = PatchTokenizerConfig(
                **_parse_section(section, raw, _TOKENIZER_KEYS)
            )
        elif section == "corpus":
            cfg.corpus = SyntheticCorpusSpec(
                **_parse_section(section, raw, _CORPUS_KEYS)
            )
        elif section.startswith("stage:"):
            cfg.stages[section[6:]] = _build_stage(
                section[6:], _parse_section(section, raw, _STAGE_KEYS)
            )
        elif section.startswith("head:"):
            cfg.heads[section[5:]] = FMHeadConfig(
                **_parse_section(section, raw, _HEAD_KEYS)
            )
        else:
            raise ConfigError(f"unknown section [{section}]")

    cfg.model_seed = model_kwargs.pop("seed", 0)
    head = FMHeadConfig(
        cond_dim=model_kwargs.get("model_dim", 128),
        token_dim=model_kwargs.get("token_dim", 64),
        **fm_head_kwargs,
    )
    try:
        cfg.model = ModelConfig(head=head, **model_kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def _build_stage(name: str, parsed: dict) -> StageConfig:
    ratios = {}
    for cat in ("text", "pair", "edit", "interleaved"):
        value = parsed.pop(f"ratio_{cat}", None)
        if value is not None:
            ratios[cat] = value
    if not ratios:
        ratios = {"pair": 1.0}
    try:
        return StageConfig(name=name, ratios=ratios, **parsed)
    except ValueError as exc:
        raise ConfigError(f"invalid stage [{name}]: {exc}") from exc


def load_config(path: str) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as f:
        return parse_config(f.read())
