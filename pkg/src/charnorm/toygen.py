"""Synthetic diagnostic tasks.

Two generators: a copy task (output equals input) and a digits task
(a number in digits becomes its spelled-out words). Both append the
" ." sentence tail so the examples look like miniature normalization
sentences rather than bare tokens.
"""

from __future__ import annotations

import numpy as np

from .pipeline import SentencePair

_UNITS = ("zero", "one", "two", "three", "four", "five", "six", "seven",
          "eight", "nine")
_TEENS = ("ten", "eleven", "twelve", "thirteen", "fourteen", "fifteen",
          "sixteen", "seventeen", "eighteen", "nineteen")
_TENS = ("", "", "twenty", "thirty", "forty", "fifty", "sixty", "seventy",
         "eighty", "ninety")

COPY_POOL = "abcdefghijklmnopqrstuvwxyz0123456789"


def number_to_words(value: int) -> str:
    """English words for 0..999, space separated, no hyphens or 'and'."""
    if not 0 <= value <= 999:
        raise ValueError(f"value must be in 0..999, got {value}")
    hundreds = value // 100
    tens = value // 10 % 10
    ones = value % 10
    words = []
    if hundreds:
        words.append(_UNITS[hundreds])
        words.append("hundred")
    if tens == 1:
        words.append(_TEENS[ones])
    else:
        if tens:
            words.append(_TENS[tens])
        if ones or value == 0:
            words.append(_UNITS[ones])
    return " ".join(words)


def gen_copy(n: int, seed: int = 0) -> list[SentencePair]:
    """n pairs whose output repeats the input: random short strings."""
    if n < 0:
        raise ValueError(f"n must be >= 0, got {n}")
    rng = np.random.default_rng(seed)
    pool = list(COPY_POOL)
    pairs = []
    for _ in range(n):
        text = "".join(rng.choice(pool, size=int(rng.integers(1, 11)))) + " ."
        pairs.append(SentencePair(input=text, output=text))
    return pairs


def gen_digits(n: int, seed: int = 0) -> list[SentencePair]:
    """n pairs mapping a number 0..999 in digits to its words."""
    if n < 0:
        raise ValueError(f"n must be >= 0, got {n}")
    rng = np.random.default_rng(seed)
    pairs = []
    for value in rng.integers(0, 1000, size=n):
        pairs.append(SentencePair(
            input=f"{int(value)} .",
            output=f"{number_to_words(int(value))} ."))
    return pairs
