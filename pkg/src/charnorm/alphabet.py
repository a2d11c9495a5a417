"""The character inventory and its integer encoding.

An alphabet file lists one character per line; the character's index
is its line number minus one. The shipped default covers printable
ASCII plus a handful of currency and Latin-1 characters, 127 in all.
Three reserved symbols follow the file content: padding, sequence
start and sequence end, so the model vocabulary is 130 wide.

Only the trailing newline is stripped when reading, which is what
lets a bare space hold index 0.
"""

from __future__ import annotations

import importlib.resources
from dataclasses import dataclass, field

import numpy as np

ALPHABET_SIZE = 127
PAD = 127
SOS = 128
EOS = 129
VOCAB_SIZE = 130


class AlphabetError(ValueError):
    """The alphabet file or an encode/decode request is malformed."""


@dataclass(frozen=True)
class Alphabet:
    """Bidirectional mapping between characters and indices 0..126."""

    chars: tuple[str, ...]
    index: dict[str, int] = field(repr=False)

    pad = PAD
    sos = SOS
    eos = EOS
    vocab_size = VOCAB_SIZE

    def __contains__(self, char: str) -> bool:
        return char in self.index

    def is_clean(self, text: str) -> bool:
        """True when every character of ``text`` is in the alphabet."""
        return all(c in self.index for c in text)

    def encode(self, text: str) -> np.ndarray:
        """Character indices for ``text`` as an int array."""
        out = np.empty(len(text), dtype=np.int64)
        for pos, char in enumerate(text):
            idx = self.index.get(char)
            if idx is None:
                raise AlphabetError(
                    f"character {char!r} at position {pos} is not in the alphabet")
            out[pos] = idx
        return out

    def decode(self, indices) -> str:
        """Text for a sequence of data-character indices.

        Reserved indices (padding and the sequence markers) are not
        characters and are rejected.
        """
        parts = []
        for pos, idx in enumerate(np.asarray(indices, dtype=np.int64)):
            if not 0 <= idx < ALPHABET_SIZE:
                raise AlphabetError(
                    f"index {int(idx)} at position {pos} does not name a character")
            parts.append(self.chars[idx])
        return "".join(parts)

    def one_hot(self, text: str) -> np.ndarray:
        """(vocab_size, len(text)) float32 matrix, one column per character."""
        indices = self.encode(text)
        out = np.zeros((VOCAB_SIZE, len(text)), dtype=np.float32)
        out[indices, np.arange(len(text))] = 1.0
        return out


def _build(chars: list[str], source: str) -> Alphabet:
    if len(chars) != ALPHABET_SIZE:
        raise AlphabetError(
            f"{source}: alphabet must list exactly {ALPHABET_SIZE} characters, "
            f"found {len(chars)}")
    index: dict[str, int] = {}
    for line_no, char in enumerate(chars, start=1):
        if len(char) != 1:
            raise AlphabetError(
                f"{source}: line {line_no} holds {char!r}, expected a single character")
        if char in index:
            raise AlphabetError(
                f"{source}: duplicate character {char!r} on line {line_no} "
                f"(first seen on line {index[char] + 1})")
        index[char] = line_no - 1
    return Alphabet(chars=tuple(chars), index=index)


def parse_alphabet(text: str, source: str = "<string>") -> Alphabet:
    """Build an alphabet from file content (one character per line)."""
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()  # trailing newline, not an empty entry
    return _build(lines, source)


def from_chars(chars: str) -> Alphabet:
    """Build an alphabet from its characters in index order."""
    return _build(list(chars), source="<chars>")


def load_alphabet(path) -> Alphabet:
    with open(path, encoding="utf-8", newline="\n") as fh:
        return parse_alphabet(fh.read(), source=str(path))


def default_alphabet() -> Alphabet:
    """The alphabet shipped with the package."""
    text = (importlib.resources.files("charnorm") / "data" / "default_alphabet.txt").read_text("utf-8")
    return parse_alphabet(text, source="default_alphabet.txt")
