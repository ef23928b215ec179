"""Unified multimodal sequences.

A sequence interleaves discrete text/special ids with continuous image
token vectors. Every embedded image is framed as

    <image_area> rows-digits * cols-digits <boi> tokens... <eoi>

with exactly rows*cols image tokens between the brackets, flattened in
raster order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .vocab import BOI_ID, EOI_ID, IMAGE_AREA_ID, Vocabulary, decode_area

SPECIAL_IDS = frozenset({0, 1, BOI_ID, EOI_ID, IMAGE_AREA_ID})


@dataclass(frozen=True)
class TextToken:
    id: int


@dataclass(frozen=True)
class Special:
    id: int


@dataclass
class ImageToken:
    vector: np.ndarray

    def __post_init__(self):
        if self.vector.ndim != 1:
            raise ValueError(f"image token must be 1D, got shape {self.vector.shape}")
        self.vector = self.vector.astype(np.float32)


SequenceElement = TextToken | Special | ImageToken


@dataclass(frozen=True)
class ImageSpan:
    """Location of one image token block: `start` indexes the first
    ImageToken (the element after `<boi>`)."""

    start: int
    rows: int
    cols: int

    @property
    def count(self) -> int:
        return self.rows * self.cols


@dataclass
class MultimodalSequence:
    elements: list[SequenceElement] = field(default_factory=list)
    image_spans: list[ImageSpan] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.elements)

    @property
    def token_dim(self) -> int | None:
        for el in self.elements:
            if isinstance(el, ImageToken):
                return int(el.vector.shape[0])
        return None

    def append_text(self, ids: list[int]):
        self.elements.extend(
            Special(i) if i in SPECIAL_IDS else TextToken(i) for i in ids
        )

    def append_image(self, tokens: np.ndarray, vocab: Vocabulary):
        """Append a framed image block from a (rows, cols, token_dim) grid."""
        if tokens.ndim != 3:
            raise ValueError(f"expected (rows, cols, token_dim), got {tokens.shape}")
        dim = self.token_dim
        if dim is not None and tokens.shape[2] != dim:
            raise ValueError(
                f"token_dim mismatch: sequence has {dim}, grid has {tokens.shape[2]}"
            )
        rows, cols, _ = tokens.shape
        self.append_text(vocab.encode_area(rows, cols))
        self.elements.append(Special(BOI_ID))
        start = len(self.elements)
        for vec in tokens.reshape(rows * cols, -1):
            self.elements.append(ImageToken(vec.copy()))
        self.elements.append(Special(EOI_ID))
        self.image_spans.append(ImageSpan(start, rows, cols))

    def validate(self):
        """Check the framing invariant for every image span."""
        for span in self.image_spans:
            if self.elements[span.start - 1] != Special(BOI_ID):
                raise ValueError(f"span at {span.start} not preceded by <boi>")
            block = self.elements[span.start : span.start + span.count]
            if len(block) != span.count or not all(
                isinstance(el, ImageToken) for el in block
            ):
                raise ValueError(
                    f"span at {span.start} does not hold {span.count} image tokens"
                )
            end = span.start + span.count
            if end >= len(self.elements) or self.elements[end] != Special(EOI_ID):
                raise ValueError(f"span at {span.start} not terminated by <eoi>")


def build_sequence(caption_ids: list[int], image_tokens: np.ndarray,
                   vocab: Vocabulary) -> MultimodalSequence:
    """Caption ids, then one framed image block."""
    seq = MultimodalSequence()
    seq.append_text(caption_ids)
    seq.append_image(image_tokens, vocab)
    return seq


@dataclass(frozen=True)
class ParsedImage:
    rows: int
    cols: int
    tokens: np.ndarray  # (rows, cols, token_dim)


def parse_sequence(seq: MultimodalSequence) -> tuple[list[int], list[ParsedImage]]:
    """Recover the interleaved content: text ids outside image framing
    (area markers, `<boi>`/`<eoi>` excluded) and each image as a grid.

    Raises ValueError on malformed framing.
    """
    text_ids: list[int] = []
    images: list[ParsedImage] = []
    i = 0
    n = len(seq.elements)
    while i < n:
        el = seq.elements[i]
        if isinstance(el, ImageToken):
            raise ValueError(f"image token outside <boi>/<eoi> framing at {i}")
        if el == Special(IMAGE_AREA_ID):
            marker = [el.id]
            i += 1
            while i < n and isinstance(seq.elements[i], TextToken | Special) \
                    and seq.elements[i].id != BOI_ID:
                marker.append(seq.elements[i].id)
                i += 1
            if i >= n or seq.elements[i] != Special(BOI_ID):
                raise ValueError("area marker not followed by <boi>")
            rows, cols = decode_area(marker)
            i += 1
            vectors = []
            while i < n and isinstance(seq.elements[i], ImageToken):
                vectors.append(seq.elements[i].vector)
                i += 1
            if len(vectors) != rows * cols:
                raise ValueError(
                    f"expected {rows * cols} image tokens, found {len(vectors)}"
                )
            if i >= n or seq.elements[i] != Special(EOI_ID):
                raise ValueError("image block not terminated by <eoi>")
            i += 1
            grid = np.stack(vectors).reshape(rows, cols, -1)
            images.append(ParsedImage(rows, cols, grid))
        elif isinstance(el, TextToken | Special):
            if el.id in (BOI_ID, EOI_ID):
                raise ValueError(f"stray image bracket at position {i}")
            text_ids.append(el.id)
            i += 1
        else:
            raise TypeError(f"unknown element {el!r}")
    return text_ids, images


def sequence_arrays(seq: MultimodalSequence, token_dim: int) -> tuple[np.ndarray, np.ndarray]:
    """Dense view for the embedding layer: int64 ids with -1 at image
    positions, and float32 vectors (zero rows at discrete positions)."""
    n = len(seq.elements)
    ids = np.full(n, -1, dtype=np.int64)
    vectors = np.zeros((n, token_dim), dtype=np.float32)
    for i, el in enumerate(seq.elements):
        if isinstance(el, ImageToken):
            if el.vector.shape[0] != token_dim:
                raise ValueError(
                    f"token_dim mismatch at {i}: {el.vector.shape[0]} != {token_dim}"
                )
            vectors[i] = el.vector
        else:
            ids[i] = el.id
    return ids, vectors
