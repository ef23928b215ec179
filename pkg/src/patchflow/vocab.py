"""Word-level vocabulary over the synthetic caption grammar.

Id layout is fixed: five specials, then the ten decimal digits, then the
`*` separator, then words in the order given at construction. Image area
markers are encoded as `<image_area>` followed by the decimal digits of
rows, `*`, and the digits of cols.
"""

from __future__ import annotations

import os

PAD = "<pad>"
EOS = "<eos>"
BOI = "<boi>"
EOI = "<eoi>"
IMAGE_AREA = "<image_area>"

SPECIALS = (PAD, EOS, BOI, EOI, IMAGE_AREA)
PAD_ID, EOS_ID, BOI_ID, EOI_ID, IMAGE_AREA_ID = range(5)
DIGIT_BASE = len(SPECIALS)
STAR_ID = DIGIT_BASE + 10
WORD_BASE = STAR_ID + 1

_RESERVED = SPECIALS + tuple(str(d) for d in range(10)) + ("*",)


class Vocabulary:
    """Immutable token table. `size` may exceed the number of defined
    tokens; the tail is reserved (unused) capacity."""

    def __init__(self, words: list[str], size: int | None = None):
        seen = set(_RESERVED)
        for w in words:
            if not w or any(c.isspace() for c in w) or w.startswith("#"):
                raise ValueError(f"invalid vocabulary word {w!r}")
            if w in seen:
                raise ValueError(f"duplicate vocabulary token {w!r}")
            seen.add(w)
        self.tokens: tuple[str, ...] = _RESERVED + tuple(words)
        if size is None:
            size = len(self.tokens)
        if size < len(self.tokens):
            raise ValueError(
                f"size {size} smaller than defined token count {len(self.tokens)}"
            )
        self.size = size
        self._ids = {tok: i for i, tok in enumerate(self.tokens)}

    def id_of(self, token: str) -> int:
        try:
            return self._ids[token]
        except KeyError:
            raise KeyError(f"token {token!r} not in vocabulary") from None

    def token_of(self, token_id: int) -> str:
        if not 0 <= token_id < len(self.tokens):
            raise KeyError(f"id {token_id} has no token (defined: {len(self.tokens)})")
        return self.tokens[token_id]

    def tokenize(self, text: str) -> list[int]:
        """Whitespace tokenization; every piece must be a known token."""
        return [self.id_of(piece) for piece in text.split()]

    def detokenize(self, ids: list[int]) -> str:
        return " ".join(self.token_of(i) for i in ids)

    def encode_area(self, rows: int, cols: int) -> list[int]:
        """`<image_area>` rows-digits `*` cols-digits."""
        if rows < 1 or cols < 1:
            raise ValueError(f"rows/cols must be >= 1, got {rows}x{cols}")
        ids = [IMAGE_AREA_ID]
        ids += [DIGIT_BASE + int(c) for c in str(rows)]
        ids.append(STAR_ID)
        ids += [DIGIT_BASE + int(c) for c in str(cols)]
        return ids

    def serialize(self) -> str:
        lines = [
            "# one token per line; line number (0-based, comments and blanks",
            "# excluded) is the token id",
            f"# specials: {' '.join(f'{t}={i}' for i, t in enumerate(SPECIALS))}",
            f"# size: {self.size}",
        ]
        lines += list(self.tokens)
        return "\n".join(lines) + "\n"

    @classmethod
    def deserialize(cls, text: str) -> "Vocabulary":
        size: int | None = None
        tokens: list[str] = []
        for line in text.splitlines():
            stripped = line.strip()
            if stripped.startswith("# size:"):
                size = int(stripped.split(":", 1)[1])
            if not stripped or stripped.startswith("#"):
                continue
            tokens.append(stripped)
        if tuple(tokens[: len(_RESERVED)]) != _RESERVED:
            raise ValueError("vocabulary file does not start with the reserved block")
        return cls(tokens[len(_RESERVED) :], size=size)

    def save(self, path: str | os.PathLike):
        with open(path, "w", encoding="utf-8") as f:
            f.write(self.serialize())

    @classmethod
    def load(cls, path: str | os.PathLike) -> "Vocabulary":
        with open(path, "r", encoding="utf-8") as f:
            return cls.deserialize(f.read())


def decode_area(ids: list[int]) -> tuple[int, int]:
    """Inverse of Vocabulary.encode_area."""
    if not ids or ids[0] != IMAGE_AREA_ID:
        raise ValueError("area marker must start with <image_area>")
    digits: list[list[int]] = [[]]
    for i in ids[1:]:
        if i == STAR_ID:
            digits.append([])
        elif DIGIT_BASE <= i < DIGIT_BASE + 10:
            digits[-1].append(i - DIGIT_BASE)
        else:
            raise ValueError(f"unexpected id {i} inside area marker")
    if len(digits) != 2 or not digits[0] or not digits[1]:
        raise ValueError("area marker must contain rows * cols")
    rows = int("".join(str(d) for d in digits[0]))
    cols = int("".join(str(d) for d in digits[1]))
    if rows < 1 or cols < 1:
        raise ValueError(f"invalid area {rows}x{cols}")
    return rows, cols
