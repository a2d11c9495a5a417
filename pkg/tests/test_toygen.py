"""Synthetic task generator tests."""

import numpy as np
import pytest

from charnorm.alphabet import default_alphabet
from charnorm.toygen import COPY_POOL, gen_copy, gen_digits, number_to_words
from helpers import reference_number_words


def test_number_words_special_cases():
    assert number_to_words(0) == "zero"
    assert number_to_words(7) == "seven"
    assert number_to_words(13) == "thirteen"
    assert number_to_words(20) == "twenty"
    assert number_to_words(21) == "twenty one"
    assert number_to_words(100) == "one hundred"
    assert number_to_words(110) == "one hundred ten"
    assert number_to_words(999) == "nine hundred ninety nine"


def test_number_words_match_reference_for_full_range():
    for n in range(1000):
        assert number_to_words(n) == reference_number_words(n)


def test_number_words_reject_out_of_range():
    with pytest.raises(ValueError, match="0..999"):
        number_to_words(-1)
    with pytest.raises(ValueError, match="0..999"):
        number_to_words(1000)


def test_copy_pairs_repeat_their_input():
    pairs = gen_copy(200, seed=1)
    assert len(pairs) == 200
    allowed = set(COPY_POOL) | {" ", "."}
    for pair in pairs:
        assert pair.output == pair.input
        assert pair.input.endswith(" .")
        assert set(pair.input) <= allowed
        assert 3 <= len(pair.input) <= 12


def test_copy_pairs_are_seed_deterministic():
    assert gen_copy(50, seed=4) == gen_copy(50, seed=4)
    assert gen_copy(50, seed=4) != gen_copy(50, seed=5)


def test_digit_pairs_spell_their_number():
    pairs = gen_digits(300, seed=2)
    assert len(pairs) == 300
    for pair in pairs:
        digits = pair.input[:-2]
        assert pair.input == digits + " ."
        assert pair.output == reference_number_words(int(digits)) + " ."


def test_digit_pairs_cover_the_range():
    values = {int(p.input[:-2]) for p in gen_digits(5000, seed=0)}
    assert min(values) >= 0 and max(values) <= 999
    assert len(values) > 900  # 5000 draws cover nearly all of 0..999


def test_generated_text_fits_the_alphabet():
    alpha = default_alphabet()
    for pair in gen_digits(100, seed=3) + gen_copy(100, seed=3):
        assert alpha.is_clean(pair.input)
        assert alpha.is_clean(pair.output)


def test_generators_reject_negative_counts():
    with pytest.raises(ValueError, match=">= 0"):
        gen_copy(-1)
    with pytest.raises(ValueError, match=">= 0"):
        gen_digits(-1)
