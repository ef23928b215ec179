"""Binary checkpoint format "PFCK".

Layout (all integers little-endian):

    magic b"PFCK" | u32 version | u64 checksum(payload)
    payload:
      u64 config_len | config JSON (UTF-8, canonical)
      3 sections (model, optimizer, meta), each:
        u32 name_len | name | u64 entry_count
        entries: u32 name_len | name | u32 rank | rank x u64 dims
                 | float32 data

The checksum is CRC-32 of the payload zero-extended to u64, so any
truncation or corruption past the header surfaces as a checksum error;
a file too short for the header is a truncation error; a foreign
version is a version error.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass

import numpy as np
import torch

from .backbone import ModelConfig
from .heads import FMHeadConfig
from .latents import PatchTokenizer, PatchTokenizerConfig
from .model import GenerativeModel
from .optim import AdamW
from .vocab import Vocabulary, WORD_BASE

MAGIC = b"PFCK"
VERSION = 1
_HEADER = struct.Struct("<4sIQ")
SECTIONS = ("model", "optimizer", "meta")


class CheckpointError(RuntimeError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointChecksumError(CheckpointError):
    pass


def _pack_name(name: str) -> bytes:
    raw = name.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def _pack_section(name: str, tensors: dict[str, np.ndarray]) -> bytes:
    parts = [_pack_name(name), struct.pack("<Q", len(tensors))]
    for key, arr in tensors.items():
        arr = np.asarray(arr, dtype=np.float32)
        parts.append(_pack_name(key))
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.astype("<f4").tobytes())
    return b"".join(parts)


def save_tensor_archive(path: str, config: dict,
                        sections: dict[str, dict[str, np.ndarray]]):
    config_blob = json.dumps(config, sort_keys=True,
                             separators=(",", ":")).encode("utf-8")
    payload = [struct.pack("<Q", len(config_blob)), config_blob]
    for name in SECTIONS:
        payload.append(_pack_section(name, sections.get(name, {})))
    body = b"".join(payload)
    header = _HEADER.pack(MAGIC, VERSION, zlib.crc32(body))
    with open(path, "wb") as f:
        f.write(header + body)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointTruncatedError(
                f"need {n} bytes at offset {self.pos}, have "
                f"{len(self.blob) - self.pos}"
            )
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def name(self) -> str:
        return self.take(self.u32()).decode("utf-8")


def _parse_section(r: _Reader, expected: str) -> dict[str, np.ndarray]:
    name = r.name()
    if name != expected:
        raise CheckpointError(f"expected section {expected!r}, found {name!r}")
    out: dict[str, np.ndarray] = {}
    for _ in range(r.u64()):
        key = r.name()
        rank = r.u32()
        dims = struct.unpack(f"<{rank}Q", r.take(8 * rank)) if rank else ()
        count = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(r.take(4 * count), dtype="<f4")
        out[key] = data.reshape(dims).astype(np.float32)
    return out


@dataclass
class Checkpoint:
    version: int
    config: dict
    model: dict[str, np.ndarray]
    optimizer: dict[str, np.ndarray]
    meta: dict[str, np.ndarray]

    @property
    def step(self) -> int:
        return int(round(float(self.meta["step"])))


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < _HEADER.size:
        raise CheckpointTruncatedError(
            f"file holds {len(blob)} bytes, header needs {_HEADER.size}"
        )
    magic, version, checksum = _HEADER.unpack(blob[: _HEADER.size])
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointVersionError(f"version {version}, expected {VERSION}")
    payload = blob[_HEADER.size :]
    if zlib.crc32(payload) != checksum:
        raise CheckpointChecksumError("payload checksum mismatch")
    r = _Reader(payload)
    config = json.loads(r.take(r.u64()).decode("utf-8"))
    model = _parse_section(r, "model")
    optimizer = _parse_section(r, "optimizer")
    meta = _parse_section(r, "meta")
    if r.pos != len(payload):
        raise CheckpointError(f"{len(payload) - r.pos} trailing bytes")
    return Checkpoint(version, config, model, optimizer, meta)


def _model_config_dict(config: ModelConfig) -> dict:
    return {
        "layers": config.layers,
        "model_dim": config.model_dim,
        "n_heads": config.n_heads,
        "ffn_dim": config.ffn_dim,
        "vocab_size": config.vocab_size,
        "max_seq_len": config.max_seq_len,
        "token_dim": config.token_dim,
        "rope_base": config.rope_base,
        "head": {
            "layers": config.head.layers,
            "hidden": config.head.hidden,
            "cond_dim": config.head.cond_dim,
            "token_dim": config.head.token_dim,
            "time_dim": config.head.time_dim,
        },
    }


def model_config_from_dict(d: dict) -> ModelConfig:
    head = FMHeadConfig(**d["head"])
    rest = {k: v for k, v in d.items() if k != "head"}
    return ModelConfig(head=head, **rest)


def optimizer_tensors(model: GenerativeModel,
                      optimizer: AdamW) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    for name, p in model.named_parameters():
        state = optimizer.state.get(p)
        if not state:
            continue
        out[f"{name}.exp_avg"] = state["exp_avg"].detach().numpy()
        out[f"{name}.exp_avg_sq"] = state["exp_avg_sq"].detach().numpy()
        out[f"{name}.step"] = np.float32(state["step"])
    return out


def save_checkpoint(path: str, model: GenerativeModel, optimizer: AdamW | None,
                    step: int, stage_name: str, vocab: Vocabulary,
                    tokenizer: PatchTokenizerConfig = PatchTokenizerConfig()):
    config = {
        "model": _model_config_dict(model.config),
        "stage": stage_name,
        "vocab_words": list(vocab.tokens[WORD_BASE:]),
        "vocab_size": vocab.size,
        "tokenizer": {
            "patch": tokenizer.patch,
            "channels": tokenizer.channels,
            "projection_seed": tokenizer.projection_seed,
            "gamma": tokenizer.gamma,
        },
    }
    model_tensors = {
        k: v.detach().cpu().numpy() for k, v in model.state_dict().items()
    }
    opt_tensors = optimizer_tensors(model, optimizer) if optimizer else {}
    meta = {"step": np.float32(step)}
    save_tensor_archive(path, config, {
        "model": model_tensors, "optimizer": opt_tensors, "meta": meta,
    })


def restore_model(ckpt: Checkpoint) -> tuple[GenerativeModel, Vocabulary]:
    config = model_config_from_dict(ckpt.config["model"])
    model = GenerativeModel(config)
    state = {k: torch.from_numpy(v.copy()) for k, v in ckpt.model.items()}
    model.load_state_dict(state)
    vocab = Vocabulary(ckpt.config["vocab_words"],
                       size=ckpt.config["vocab_size"])
    return model, vocab


def restore_tokenizer(ckpt: Checkpoint) -> PatchTokenizer:
    return PatchTokenizer(PatchTokenizerConfig(**ckpt.config["tokenizer"]))


def restore_optimizer(ckpt: Checkpoint, model: GenerativeModel,
                      optimizer: AdamW):
    for name, p in model.named_parameters():
        key = f"{name}.exp_avg"
        if key not in ckpt.optimizer:
            continue
        optimizer.state[p] = {
            "step": int(round(float(ckpt.optimizer[f"{name}.step"]))),
            "exp_avg": torch.from_numpy(ckpt.optimizer[key].copy()),
            "exp_avg_sq": torch.from_numpy(
                ckpt.optimizer[f"{name}.exp_avg_sq"].copy()
            ),
        }
