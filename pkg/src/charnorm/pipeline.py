"""From the token-level source format to batched training pairs.

The source data is a quoted three-column CSV of (semiotic class,
input token, output token) rows, with sentence boundaries marked by
``<eos>`` rows. Preprocessing recomposes sentences, substitutes the
``<self>``/``sil`` placeholders, drops pairs that leave the alphabet
or exceed the output length bound, and sorts what remains by output
length so batches of neighbours need almost no padding.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from typing import Iterable, Sequence, TextIO

import numpy as np

from .alphabet import Alphabet, PAD, SOS, EOS, VOCAB_SIZE

log = logging.getLogger(__name__)

EOS_MARK = "<eos>"
SELF_MARK = "<self>"
SIL_MARK = "sil"
MAX_OUTPUT_LEN = 177

RECORDS_HEADER = ("Semiotic Class", "Input Token", "Output Token")
PAIRS_HEADER = ("Input Token", "Output Token")


class ParseError(ValueError):
    """A source file does not follow the expected CSV layout."""


@dataclass(frozen=True)
class RawRecord:
    semiotic_class: str
    input_token: str
    output_token: str


@dataclass(frozen=True)
class SentencePair:
    input: str
    output: str


@dataclass
class DatasetSplit:
    train: list[SentencePair]
    validation: list[SentencePair]
    test: list[SentencePair]


@dataclass
class Batch:
    """One training batch: one-hot inputs and framed target indices.

    ``inputs`` is (batch, vocab, max_input_len) float32 where padding
    columns are the one-hot of PAD; ``targets`` is (batch,
    max_output_len + 2) int64 rows of SOS, the output characters, EOS,
    then PAD filler.
    """

    inputs: np.ndarray
    targets: np.ndarray
    pairs: list[SentencePair]


@dataclass
class PreprocessStats:
    records: int
    sentences: int
    dropped_alphabet: int
    dropped_length: int
    kept: int


# ---------------------------------------------------------------------------
# parsing


def _read_csv(stream: TextIO, source: str, header: tuple[str, ...],
              n_fields: int) -> Iterable[tuple[int, list[str]]]:
    reader = csv.reader(stream)
    try:
        first = next(reader, None)
    except csv.Error as exc:
        raise ParseError(f"{source}: line 1: {exc}") from exc
    if first is None:
        return
    if tuple(first) != header:
        raise ParseError(
            f"{source}: line 1: expected header {list(header)}, found {first}")
    while True:
        try:
            row = next(reader, None)
        except csv.Error as exc:
            raise ParseError(f"{source}: line {reader.line_num}: {exc}") from exc
        if row is None:
            return
        if not row:
            continue
        if len(row) != n_fields:
            raise ParseError(
                f"{source}: line {reader.line_num}: expected {n_fields} fields, "
                f"found {len(row)}")
        yield reader.line_num, row


def parse_records(stream: TextIO, source: str = "<stream>") -> list[RawRecord]:
    """Read the three-column token format, header included."""
    return [RawRecord(*row) for _, row in
            _read_csv(stream, source, RECORDS_HEADER, 3)]


def parse_records_file(path) -> list[RawRecord]:
    with open(path, encoding="utf-8", newline="") as fh:
        return parse_records(fh, source=str(path))


def read_pairs(stream: TextIO, source: str = "<stream>") -> list[SentencePair]:
    """Read the two-column sentence-pair format, header included."""
    return [SentencePair(*row) for _, row in
            _read_csv(stream, source, PAIRS_HEADER, 2)]


def read_pairs_file(path) -> list[SentencePair]:
    with open(path, encoding="utf-8", newline="") as fh:
        return read_pairs(fh, source=str(path))


def write_pairs(stream: TextIO, pairs: Iterable[SentencePair]) -> None:
    writer = csv.writer(stream, quoting=csv.QUOTE_ALL, lineterminator="\n")
    writer.writerow(PAIRS_HEADER)
    for pair in pairs:
        writer.writerow((pair.input, pair.output))


def write_pairs_file(path, pairs: Iterable[SentencePair]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        write_pairs(fh, pairs)


# ---------------------------------------------------------------------------
# sentence recomposition and filtering


def recompose(records: Iterable[RawRecord]) -> list[SentencePair]:
    """Join token rows into sentence pairs at the ``<eos>`` markers.

    ``<self>`` and ``sil`` outputs copy the input token; the marker
    rows themselves vanish. A trailing sentence without a closing
    marker is still emitted.
    """
    pairs: list[SentencePair] = []
    inputs: list[str] = []
    outputs: list[str] = []

    def flush():
        if not inputs:
            log.warning("skipping sentence with zero tokens")
            return
        pairs.append(SentencePair(" ".join(inputs), " ".join(outputs)))
        inputs.clear()
        outputs.clear()

    for record in records:
        if record.semiotic_class == EOS_MARK:
            flush()
            continue
        inputs.append(record.input_token)
        out = record.output_token
        if out in (SELF_MARK, SIL_MARK):
            out = record.input_token
        outputs.append(out)
    if inputs:
        flush()
    return pairs


def filter_and_sort(pairs: Iterable[SentencePair], alphabet: Alphabet,
                    max_output_len: int = MAX_OUTPUT_LEN) -> list[SentencePair]:
    """Drop out-of-alphabet and over-long pairs, sort by output length.

    The sort is descending and stable, so equal lengths keep their
    original relative order.
    """
    kept = [p for p in pairs
            if alphabet.is_clean(p.input) and alphabet.is_clean(p.output)
            and len(p.output) <= max_output_len]
    return sorted(kept, key=lambda p: -len(p.output))


def preprocess(records: Sequence[RawRecord], alphabet: Alphabet,
               max_output_len: int = MAX_OUTPUT_LEN
               ) -> tuple[list[SentencePair], PreprocessStats]:
    """Full pipeline from token rows to sorted sentence pairs."""
    records = list(records)
    sentences = recompose(records)
    clean = [p for p in sentences
             if alphabet.is_clean(p.input) and alphabet.is_clean(p.output)]
    dropped_alphabet = len(sentences) - len(clean)
    final = filter_and_sort(clean, alphabet, max_output_len)
    stats = PreprocessStats(
        records=len(records),
        sentences=len(sentences),
        dropped_alphabet=dropped_alphabet,
        dropped_length=len(clean) - len(final),
        kept=len(final),
    )
    return final, stats


# ---------------------------------------------------------------------------
# split selection and batching


def select_subset(pairs: Sequence[SentencePair], n: int, mode: str,
                  seed: int | None = None) -> DatasetSplit:
    """Carve train/validation/test out of the pair pool.

    Training gets ``n`` pairs and the two held-out splits get
    ``ceil(n/5)`` each. ``shortest`` takes the pairs with the smallest
    output lengths (train first, then validation, then test);
    ``random`` draws them with the given seed. Every split is returned
    sorted by descending output length, ready for batching.
    """
    side = math.ceil(n / 5)
    need = n + 2 * side
    if len(pairs) < need:
        raise ValueError(
            f"insufficient data: need {need} pairs "
            f"({n} train + 2x{side} held out), have {len(pairs)}")
    if mode == "shortest":
        ordered = sorted(pairs, key=lambda p: len(p.output))
        chosen = ordered[:need]
    elif mode == "random":
        if seed is None:
            raise ValueError("random selection needs a seed")
        rng = np.random.default_rng(seed)
        indices = rng.permutation(len(pairs))[:need]
        chosen = [pairs[i] for i in indices]
    else:
        raise ValueError(f"unknown selection mode {mode!r}, "
                         f"expected 'shortest' or 'random'")
    by_len = lambda ps: sorted(ps, key=lambda p: -len(p.output))
    return DatasetSplit(
        train=by_len(chosen[:n]),
        validation=by_len(chosen[n:n + side]),
        test=by_len(chosen[n + side:]),
    )


def write_split_manifest(path, split: DatasetSplit, mode: str,
                         seed: int | None) -> None:
    """Line-oriented record of how the split was drawn."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"train\t{len(split.train)}\n")
        fh.write(f"validation\t{len(split.validation)}\n")
        fh.write(f"test\t{len(split.test)}\n")
        fh.write(f"mode\t{mode}\n")
        fh.write(f"seed\t{'' if seed is None else seed}\n")


def make_batches(pairs: Sequence[SentencePair], batch_size: int,
                 alphabet: Alphabet) -> list[Batch]:
    """Group consecutive pairs and pad them to a rectangle.

    Callers hand in length-sorted pairs, so neighbouring pairs have
    similar lengths and padding stays small. Input padding columns are
    the one-hot of PAD; target rows are SOS, characters, EOS, then PAD.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    batches = []
    for start in range(0, len(pairs), batch_size):
        group = list(pairs[start:start + batch_size])
        max_in = max(len(p.input) for p in group)
        max_out = max(len(p.output) for p in group)
        inputs = np.zeros((len(group), VOCAB_SIZE, max_in), dtype=np.float32)
        targets = np.full((len(group), max_out + 2), PAD, dtype=np.int64)
        for b, pair in enumerate(group):
            cols = alphabet.one_hot(pair.input)
            inputs[b, :, :cols.shape[1]] = cols
            inputs[b, PAD, cols.shape[1]:] = 1.0
            targets[b, 0] = SOS
            codes = alphabet.encode(pair.output)
            targets[b, 1:1 + len(codes)] = codes
            targets[b, 1 + len(codes)] = EOS
        batches.append(Batch(inputs=inputs, targets=targets, pairs=group))
    return batches


def count_pad_positions(batches: Iterable[Batch]) -> int:
    """Total one-hot PAD columns across all batches (padding cost)."""
    total = 0
    for batch in batches:
        total += int(batch.inputs[:, PAD, :].sum())
    return total
