"""Synthetic multimodal corpus.

Scenes are (color, shape, position) triples over a closed grammar;
captions describe scenes one-to-one and rendering is a pure function of
the scene, so caption/image consistency is exact. Four sample
categories: text-only lines, image-text pairs, analytic edit triples
(recolor / move), and two-image interleaved sequences.

Rendering detail: shapes are drawn at half resolution and upsampled 2x
(so images are constant on 2x2 pixel blocks, the subspace captured
exactly by the tokenizer's block-mean projection rows), then a small
per-patch texture is added inside the span of the tokenizer's remaining
projection rows. Both components survive the tokenizer round trip
exactly, and every latent channel carries variance.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .latents import PatchTokenizer
from .vocab import Vocabulary

COLORS = ("red", "green", "blue", "yellow", "cyan", "magenta")
SHAPES = ("circle", "square", "cross", "diamond")
POSITIONS = ("top left", "top right", "bottom left", "bottom right", "center")

_HI, _LO = 0.8, 0.15
COLOR_RGB = {
    "red": (_HI, _LO, _LO),
    "green": (_LO, _HI, _LO),
    "blue": (_LO, _LO, _HI),
    "yellow": (_HI, _HI, _LO),
    "cyan": (_LO, _HI, _HI),
    "magenta": (_HI, _LO, _HI),
}
BACKGROUND = (_LO, _LO, _LO)

GRAMMAR_WORDS = (
    ("a", "at", "the", "to", "then", "recolor", "move")
    + COLORS + SHAPES + ("top", "bottom", "left", "right", "center")
)

TEXTURE_AMPLITUDE = 0.06
_TEXTURE_STREAM = 151


@dataclass(frozen=True)
class Scene:
    color: str
    shape: str
    position: str

    def __post_init__(self):
        if self.color not in COLORS:
            raise ValueError(f"unknown color {self.color!r}")
        if self.shape not in SHAPES:
            raise ValueError(f"unknown shape {self.shape!r}")
        if self.position not in POSITIONS:
            raise ValueError(f"unknown position {self.position!r}")

    @property
    def code(self) -> tuple[int, int, int]:
        return (COLORS.index(self.color), SHAPES.index(self.shape),
                POSITIONS.index(self.position))


def caption_of(scene: Scene) -> str:
    return f"a {scene.color} {scene.shape} at the {scene.position}"


def parse_caption(caption: str) -> Scene:
    words = caption.split()
    if len(words) < 6 or words[0] != "a" or words[3] != "at" or words[4] != "the":
        raise ValueError(f"caption does not match the grammar: {caption!r}")
    return Scene(words[1], words[2], " ".join(words[5:]))


def _position_center(position: str, half: int) -> tuple[float, float]:
    q = half / 4.0
    centers = {
        "top left": (q, q),
        "top right": (q, 3 * q),
        "bottom left": (3 * q, q),
        "bottom right": (3 * q, 3 * q),
        "center": (2 * q, 2 * q),
    }
    cy, cx = centers[position]
    return cy - 0.5, cx - 0.5


def _shape_mask(shape: str, half: int, cy: float, cx: float) -> np.ndarray:
    r = half / 5.0
    y, x = np.mgrid[0:half, 0:half]
    dy, dx = y - cy, x - cx
    if shape == "circle":
        return dy**2 + dx**2 <= r**2
    if shape == "square":
        return np.maximum(np.abs(dy), np.abs(dx)) <= r * 0.9
    if shape == "diamond":
        return np.abs(dy) + np.abs(dx) <= r * 1.2
    if shape == "cross":
        arm = np.abs(dy) <= r * 0.35
        return (arm & (np.abs(dx) <= r * 1.2)) | \
               ((np.abs(dx) <= r * 0.35) & (np.abs(dy) <= r * 1.2))
    raise ValueError(f"unknown shape {shape!r}")


def render_scene(scene: Scene, image_size: int = 32,
                 tokenizer: PatchTokenizer | None = None) -> np.ndarray:
    """Deterministic (H, W, 3) float32 image of the scene, strictly
    inside [0, 1]."""
    if image_size % 4 != 0:
        raise ValueError(f"image_size must be divisible by 4, got {image_size}")
    tokenizer = tokenizer or PatchTokenizer()
    half = image_size // 2
    cy, cx = _position_center(scene.position, half)
    mask = _shape_mask(scene.shape, half, cy, cx)
    small = np.empty((half, half, 3), dtype=np.float32)
    small[:] = BACKGROUND
    small[mask] = COLOR_RGB[scene.color]
    image = np.repeat(np.repeat(small, 2, axis=0), 2, axis=1)
    image = _add_texture(image, scene, tokenizer)
    if np.min(image) < 0.0 or np.max(image) > 1.0:
        raise AssertionError("rendered image escaped [0, 1]")
    return image


def _add_texture(image: np.ndarray, scene: Scene,
                 tokenizer: PatchTokenizer) -> np.ndarray:
    if tokenizer.projection is None:
        return image
    patterns = tokenizer.projection[tokenizer.structured_rows :]
    if patterns.shape[0] == 0:
        return image
    p = tokenizer.config.patch
    gh, gw = image.shape[0] // p, image.shape[1] // p
    rng = np.random.default_rng([_TEXTURE_STREAM, *scene.code, image.shape[0]])
    coeffs = rng.uniform(
        -TEXTURE_AMPLITUDE, TEXTURE_AMPLITUDE, size=(gh, gw, patterns.shape[0])
    ).astype(np.float32)
    delta = (coeffs @ patterns).reshape(gh, gw, p, p, 3)
    blocks = image.reshape(gh, p, gw, p, 3).transpose(0, 2, 1, 3, 4)
    out = (blocks + delta).transpose(0, 2, 1, 3, 4)
    return np.ascontiguousarray(out).reshape(image.shape).astype(np.float32)


Segment = str | np.ndarray

CATEGORIES = ("text", "pair", "edit", "interleaved")


@dataclass
class Sample:
    """One training sample: alternating text / image segments."""

    category: str
    segments: list[Segment]

    def texts(self) -> list[str]:
        return [s for s in self.segments if isinstance(s, str)]

    def images(self) -> list[np.ndarray]:
        return [s for s in self.segments if isinstance(s, np.ndarray)]


@dataclass(frozen=True)
class SyntheticCorpusSpec:
    image_size: int = 32
    size_per_category: int = 16
    seed: int = 0
    categories: tuple[str, ...] = CATEGORIES

    def __post_init__(self):
        for c in self.categories:
            if c not in CATEGORIES:
                raise ValueError(f"unknown category {c!r}")


@dataclass
class Corpus:
    spec: SyntheticCorpusSpec
    samples: list[Sample] = field(default_factory=list)

    def by_category(self) -> dict[str, list[Sample]]:
        out: dict[str, list[Sample]] = {}
        for s in self.samples:
            out.setdefault(s.category, []).append(s)
        return out

    def images(self) -> list[np.ndarray]:
        return [img for s in self.samples for img in s.images()]


def _distinct_scenes(rng: np.random.Generator, n: int) -> list[Scene]:
    total = len(COLORS) * len(SHAPES) * len(POSITIONS)
    picks = rng.choice(total, size=min(n, total), replace=False)
    scenes = []
    for k in picks:
        c, rest = divmod(int(k), len(SHAPES) * len(POSITIONS))
        s, p = divmod(rest, len(POSITIONS))
        scenes.append(Scene(COLORS[c], SHAPES[s], POSITIONS[p]))
    while len(scenes) < n:  # wrap around if n exceeds the grammar
        scenes.append(scenes[len(scenes) % total])
    return scenes


def _other(rng: np.random.Generator, options: tuple[str, ...], not_this: str) -> str:
    rest = [o for o in options if o != not_this]
    return rest[int(rng.integers(len(rest)))]


def make_corpus(spec: SyntheticCorpusSpec,
                tokenizer: PatchTokenizer | None = None) -> Corpus:
    """Deterministic dataset with size_per_category samples per listed
    category."""
    tokenizer = tokenizer or PatchTokenizer()
    rng = np.random.default_rng([spec.seed, 0])
    corpus = Corpus(spec)
    n = spec.size_per_category

    def render(scene: Scene) -> np.ndarray:
        return render_scene(scene, spec.image_size, tokenizer)

    for category in spec.categories:
        scenes = _distinct_scenes(rng, n)
        for scene in scenes:
            caption = caption_of(scene)
            if category == "text":
                corpus.samples.append(Sample("text", [caption]))
            elif category == "pair":
                corpus.samples.append(Sample("pair", [caption, render(scene)]))
            elif category == "edit":
                if rng.random() < 0.5:
                    color2 = _other(rng, COLORS, scene.color)
                    edited = Scene(color2, scene.shape, scene.position)
                    instruction = (
                        f"recolor the {scene.color} {scene.shape} at the "
                        f"{scene.position} to {color2}"
                    )
                else:
                    position2 = _other(rng, POSITIONS, scene.position)
                    edited = Scene(scene.color, scene.shape, position2)
                    instruction = (
                        f"move the {scene.color} {scene.shape} at the "
                        f"{scene.position} to the {position2}"
                    )
                corpus.samples.append(
                    Sample("edit", [instruction, render(scene), render(edited)])
                )
            else:
                second = _distinct_scenes(rng, 1)[0]
                corpus.samples.append(Sample("interleaved", [
                    caption, render(scene),
                    f"then {caption_of(second)}", render(second),
                ]))
    return corpus


def build_vocabulary(size: int | None = None) -> Vocabulary:
    return Vocabulary(list(GRAMMAR_WORDS), size=size)
