"""Analytic latent pipeline.

Images are float32 arrays of shape (H, W, 3) with values in [0, 1].
Latent grids are float32 arrays of shape (H, W, C); token grids are
float32 arrays of shape (rows, cols, token_dim). The tokenizer here is a
lossless-by-construction linear patchify (optionally projected to a fixed
channel count), so reconstruction error is attributable to the generative
model, never to the tokenizer.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

STD_FLOOR = 1e-6


def _check_grid(grid: np.ndarray, name: str = "grid") -> np.ndarray:
    if grid.ndim != 3:
        raise ValueError(f"{name} must have shape (H, W, C), got {grid.shape}")
    return grid


@dataclass(frozen=True)
class ChannelStats:
    """Per-channel mean/std used to standardize latents. stds are > 0."""

    means: np.ndarray
    stds: np.ndarray

    def __post_init__(self):
        if self.means.shape != self.stds.shape or self.means.ndim != 1:
            raise ValueError("means/stds must be 1D arrays of equal length")
        if not np.all(self.stds > 0):
            raise ValueError("stds must be strictly positive")

    @property
    def channels(self) -> int:
        return int(self.means.shape[0])


@dataclass(frozen=True)
class PerturbationSpec:
    """Noise injection for normalized latents: x + alpha * eps with
    alpha ~ U[0, gamma] drawn once per grid and eps ~ N(0, I) per element."""

    gamma: float
    seed: int = 0

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")


def compute_channel_stats(grids: list[np.ndarray]) -> ChannelStats:
    """Pool every position of every grid and return empirical per-channel
    mean and standard deviation (population, ddof=0).

    Zero-variance channels are clamped to STD_FLOOR with a warning.
    """
    if len(grids) == 0:
        raise ValueError("compute_channel_stats needs at least one grid")
    channels = _check_grid(grids[0]).shape[2]
    for g in grids:
        if _check_grid(g).shape[2] != channels:
            raise ValueError(
                f"channel mismatch: expected {channels}, got {g.shape[2]}"
            )
    pooled = np.concatenate([g.reshape(-1, channels) for g in grids], axis=0)
    pooled = pooled.astype(np.float64)
    means = pooled.mean(axis=0)
    stds = pooled.std(axis=0, ddof=0)
    if np.any(stds < STD_FLOOR):
        degenerate = np.flatnonzero(stds < STD_FLOOR)
        warnings.warn(
            f"degenerate channels {degenerate.tolist()}: std clamped to {STD_FLOOR}",
            RuntimeWarning,
            stacklevel=2,
        )
        stds = np.maximum(stds, STD_FLOOR)
    return ChannelStats(means.astype(np.float32), stds.astype(np.float32))


def _check_channels(grid: np.ndarray, stats: ChannelStats):
    if grid.shape[2] != stats.channels:
        raise ValueError(
            f"channel mismatch: grid has {grid.shape[2]}, stats have {stats.channels}"
        )


def normalize(grid: np.ndarray, stats: ChannelStats) -> np.ndarray:
    _check_grid(grid)
    _check_channels(grid, stats)
    return ((grid - stats.means) / stats.stds).astype(np.float32)


def denormalize(grid: np.ndarray, stats: ChannelStats) -> np.ndarray:
    _check_grid(grid)
    _check_channels(grid, stats)
    return (grid * stats.stds + stats.means).astype(np.float32)


def perturb(grid: np.ndarray, spec: PerturbationSpec) -> np.ndarray:
    """Noise-regularize a (normalized) grid: one alpha per grid, fresh
    standard-normal eps per element. Deterministic given spec.seed."""
    _check_grid(grid)
    rng = np.random.default_rng(spec.seed)
    alpha = rng.uniform(0.0, spec.gamma)
    eps = rng.standard_normal(grid.shape, dtype=np.float32)
    return (grid + np.float32(alpha) * eps).astype(np.float32)


def space_to_depth(grid: np.ndarray) -> np.ndarray:
    """2x2 pixel shuffle: each output token at (r, c) concatenates the
    channel vectors of (2r,2c), (2r,2c+1), (2r+1,2c), (2r+1,2c+1)."""
    h, w, c = _check_grid(grid).shape
    if h % 2 != 0 or w % 2 != 0:
        raise ValueError(f"height and width must be even, got {h}x{w}")
    blocks = grid.reshape(h // 2, 2, w // 2, 2, c)
    return np.ascontiguousarray(blocks.transpose(0, 2, 1, 3, 4)).reshape(
        h // 2, w // 2, 4 * c
    )


def depth_to_space(tokens: np.ndarray) -> np.ndarray:
    """Exact inverse of space_to_depth."""
    rows, cols, token_dim = _check_grid(tokens, "tokens").shape
    if token_dim % 4 != 0:
        raise ValueError(f"token_dim must be divisible by 4, got {token_dim}")
    c = token_dim // 4
    blocks = tokens.reshape(rows, cols, 2, 2, c)
    return np.ascontiguousarray(blocks.transpose(0, 2, 1, 3, 4)).reshape(
        rows * 2, cols * 2, c
    )


def flatten_tokens(tokens: np.ndarray) -> np.ndarray:
    """Raster-order (row-major) flattening to shape (rows*cols, token_dim)."""
    rows, cols, token_dim = _check_grid(tokens, "tokens").shape
    return tokens.reshape(rows * cols, token_dim)


def unflatten_tokens(seq: np.ndarray, rows: int, cols: int) -> np.ndarray:
    if seq.ndim != 2 or seq.shape[0] != rows * cols:
        raise ValueError(f"expected {rows * cols} tokens, got shape {seq.shape}")
    return seq.reshape(rows, cols, seq.shape[1])


@dataclass(frozen=True)
class PatchTokenizerConfig:
    """Patchify geometry. channels == 3*patch**2 selects the identity
    (pure reshape) mapping; a smaller channel count selects a fixed
    orthonormal-row projection built from projection_seed. gamma is the
    training-time noise intensity applied to normalized latents."""

    patch: int = 4
    channels: int = 16
    projection_seed: int = 7
    gamma: float = 0.5

    def __post_init__(self):
        if self.patch < 1:
            raise ValueError("patch must be >= 1")
        if not 1 <= self.channels <= 3 * self.patch**2:
            raise ValueError(
                f"channels must be in [1, {3 * self.patch ** 2}], got {self.channels}"
            )
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")

    @property
    def flat_dim(self) -> int:
        return 3 * self.patch**2

    @property
    def token_dim(self) -> int:
        return 4 * self.channels


def _block_mean_rows(patch: int, channels: int) -> np.ndarray:
    """Orthonormal rows spanning per-channel s x s block means, for the
    coarsest s that fits in the channel budget. Any image constant on
    s x s blocks survives the projection round trip exactly."""
    for s in range(1, patch + 1):
        if patch % s == 0 and 3 * (patch // s) ** 2 <= channels:
            break
    else:
        return np.zeros((0, 3 * patch**2))
    g = patch // s
    rows = []
    for c in range(3):
        for bi in range(g):
            for bj in range(g):
                r = np.zeros((patch, patch, 3))
                r[bi * s : (bi + 1) * s, bj * s : (bj + 1) * s, c] = 1.0 / s
                rows.append(r.reshape(-1))
    return np.stack(rows, axis=0)


def _build_projection(cfg: PatchTokenizerConfig) -> np.ndarray:
    """Orthonormal-row matrix (channels, flat_dim): structured block-mean
    rows first, then a seeded random completion (Gram-Schmidt)."""
    flat = cfg.flat_dim
    base = _block_mean_rows(cfg.patch, cfg.channels)
    rows = [base[i] for i in range(base.shape[0])]
    rng = np.random.default_rng(cfg.projection_seed)
    while len(rows) < cfg.channels:
        cand = rng.standard_normal(flat)
        for r in rows:
            cand = cand - np.dot(cand, r) * r
        norm = np.linalg.norm(cand)
        if norm > 1e-6:
            rows.append(cand / norm)
    return np.stack(rows, axis=0).astype(np.float32)


class PatchTokenizer:
    """Maps images to latent grids and back by flattening p x p x 3 pixel
    blocks, optionally through a fixed orthonormal-row channel projection
    (transpose used as the decoder, i.e. the pseudo-inverse)."""

    def __init__(self, config: PatchTokenizerConfig | None = None):
        self.config = config or PatchTokenizerConfig()
        if self.config.channels == self.config.flat_dim:
            self.projection = None
            self.structured_rows = 0
        else:
            self.structured_rows = _block_mean_rows(
                self.config.patch, self.config.channels
            ).shape[0]
            self.projection = _build_projection(self.config)

    def patchify(self, image: np.ndarray) -> np.ndarray:
        if image.ndim != 3 or image.shape[2] != 3:
            raise ValueError(f"expected (H, W, 3) image, got {image.shape}")
        p = self.config.patch
        h, w, _ = image.shape
        if h % p != 0 or w % p != 0:
            raise ValueError(f"image dims {h}x{w} not divisible by patch {p}")
        blocks = image.reshape(h // p, p, w // p, p, 3).transpose(0, 2, 1, 3, 4)
        flat = np.ascontiguousarray(blocks).reshape(h // p, w // p, self.config.flat_dim)
        if self.projection is None:
            return flat.astype(np.float32)
        return (flat @ self.projection.T).astype(np.float32)

    def unpatchify(self, latents: np.ndarray) -> np.ndarray:
        _check_grid(latents, "latents")
        if latents.shape[2] != self.config.channels:
            raise ValueError(
                f"expected {self.config.channels} channels, got {latents.shape[2]}"
            )
        p = self.config.patch
        gh, gw, _ = latents.shape
        flat = latents if self.projection is None else latents @ self.projection
        blocks = flat.reshape(gh, gw, p, p, 3).transpose(0, 2, 1, 3, 4)
        return np.ascontiguousarray(blocks).reshape(gh * p, gw * p, 3).astype(np.float32)


def encode_image(image: np.ndarray, tokenizer: PatchTokenizer,
                 stats: ChannelStats,
                 perturbation: PerturbationSpec | None = None) -> np.ndarray:
    """image -> patchify -> normalize [-> perturb] -> space_to_depth.
    Returns a (rows, cols, 4 * channels) token grid."""
    latents = normalize(tokenizer.patchify(image), stats)
    if perturbation is not None:
        latents = perturb(latents, perturbation)
    return space_to_depth(latents)


def decode_tokens(tokens: np.ndarray, tokenizer: PatchTokenizer,
                  stats: ChannelStats) -> np.ndarray:
    """tokens -> depth_to_space -> denormalize -> unpatchify."""
    return tokenizer.unpatchify(denormalize(depth_to_space(tokens), stats))


def latent_histogram(grids: list[np.ndarray], bins: int) -> list[tuple[int, float, float, int]]:
    """Per-channel histogram over a symmetric range (-r, r) with r the
    largest absolute value seen in that channel. Rows are
    (channel, bin_left, bin_right, count)."""
    if len(grids) == 0:
        raise ValueError("latent_histogram needs at least one grid")
    if bins <= 0:
        raise ValueError(f"bins must be positive, got {bins}")
    channels = _check_grid(grids[0]).shape[2]
    pooled = np.concatenate([g.reshape(-1, channels) for g in grids], axis=0)
    out: list[tuple[int, float, float, int]] = []
    for c in range(channels):
        values = pooled[:, c].astype(np.float64)
        r = float(np.max(np.abs(values)))
        if r == 0.0:
            raise ValueError(f"channel {c} has zero range")
        counts, edges = np.histogram(values, bins=bins, range=(-r, r))
        for b in range(bins):
            out.append((c, float(edges[b]), float(edges[b + 1]), int(counts[b])))
    return out


def histogram_to_csv(rows: list[tuple[int, float, float, int]]) -> str:
    lines = ["channel,bin_left,bin_right,count"]
    for channel, left, right, count in rows:
        lines.append(f"{channel},{left!r},{right!r},{count}")
    return "\n".join(lines) + "\n"
