"""Metrics, the paired significance test, and error classification.

Accuracy is exact string match; the character error rate divides the
total edit distance by the total reference length. The approximate
randomization test estimates how often random pairwise swaps of two
prediction sets produce a metric gap at least as large as the
observed one. The error classifier sorts wrong predictions into the
coarse failure shapes: cap-limited loops, isolated character slips,
early stops, and everything else.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Iterable, Sequence, TextIO

import numpy as np

from . import autodiff as ad
from .alphabet import PAD
from .model import DecodeResult, Model
from .pipeline import SentencePair, make_batches


@dataclass(frozen=True)
class PredictionRecord:
    input: str
    reference: str
    prediction: str
    hit_cap: bool


@dataclass
class EvalReport:
    nll: float
    cer_percent: float
    accuracy_percent: float
    n: int


@dataclass
class ErrorBreakdown:
    t1: int
    t2: int
    t3: int
    others: int
    total: int


PREDICTIONS_HEADER = ("input", "reference", "prediction", "hit_cap")


# ---------------------------------------------------------------------------
# metrics


def levenshtein(a: str, b: str) -> int:
    """Minimal number of character inserts, deletes and substitutions."""
    if a == b:
        return 0
    if not a:
        return len(b)
    if not b:
        return len(a)
    cb = np.fromiter(map(ord, b), dtype=np.int64, count=len(b))
    offsets = np.arange(len(b) + 1)
    prev = offsets.copy()
    cur = np.empty_like(prev)
    for i, ch in enumerate(a):
        cur[0] = i + 1
        np.minimum(prev[:-1] + (cb != ord(ch)), prev[1:] + 1, out=cur[1:])
        # serial "insertion" recurrence cur[j] = min(cur[j], cur[j-1]+1)
        # via a running prefix minimum of cur[j] - j
        np.minimum(cur, np.minimum.accumulate(cur - offsets) + offsets, out=cur)
        prev, cur = cur, prev
    return int(prev[-1])


def accuracy(records: Sequence[PredictionRecord]) -> float:
    """Percentage of exact-match predictions."""
    if not records:
        raise ValueError("accuracy of an empty prediction set")
    correct = sum(r.prediction == r.reference for r in records)
    return 100.0 * correct / len(records)


def cer(records: Sequence[PredictionRecord]) -> float:
    """100 * total edit distance / total reference length."""
    if not records:
        raise ValueError("character error rate of an empty prediction set")
    total_ref = sum(len(r.reference) for r in records)
    if total_ref == 0:
        raise ValueError("character error rate undefined: zero total reference length")
    total_dist = sum(levenshtein(r.prediction, r.reference) for r in records)
    return 100.0 * total_dist / total_ref


def evaluate(model: Model, pairs: Sequence[SentencePair], batch_size: int = 32
             ) -> tuple[EvalReport, list[PredictionRecord]]:
    """Teacher-forced NLL plus greedy-decoding metrics on a pair set.

    The NLL pass re-sorts a copy of the pairs by output length for
    batching; predictions come back in the caller's order, which is
    what the paired significance test requires.
    """
    if not pairs:
        raise ValueError("cannot evaluate an empty pair set")
    by_len = sorted(pairs, key=lambda p: -len(p.output))
    nll_sum = 0.0
    nll_positions = 0
    for batch in make_batches(by_len, batch_size, model.alphabet):
        with ad.no_grad():
            loss = model.forward_teacher(batch)
        positions = int((batch.targets[:, 1:] != PAD).sum())
        nll_sum += float(loss.data) * positions
        nll_positions += positions
    records = []
    for pair in pairs:
        result = model.greedy_decode(pair.input)
        records.append(PredictionRecord(
            input=pair.input, reference=pair.output,
            prediction=result.text, hit_cap=result.hit_cap))
    report = EvalReport(
        nll=nll_sum / nll_positions,
        cer_percent=cer(records),
        accuracy_percent=accuracy(records),
        n=len(records),
    )
    return report, records


# ---------------------------------------------------------------------------
# approximate randomization


def approx_randomization(a: Sequence[PredictionRecord],
                         b: Sequence[PredictionRecord],
                         metric: str = "accuracy", rounds: int = 1000,
                         seed: int = 0) -> float:
    """Paired significance test between two prediction sets.

    Each trial swaps every prediction pair independently with
    probability one half and measures the absolute metric gap; the
    p-value is (trials with a gap >= the observed one, plus one)
    divided by (rounds plus one). Trial randomness comes from streams
    indexed by trial number, so the count does not depend on execution
    order.
    """
    if len(a) != len(b):
        raise ValueError(f"prediction set length mismatch: {len(a)} vs {len(b)}")
    if not a:
        raise ValueError("cannot compare empty prediction sets")
    for i, (ra, rb) in enumerate(zip(a, b)):
        if ra.reference != rb.reference:
            raise ValueError(f"reference mismatch at index {i}")
    if rounds < 1:
        raise ValueError(f"rounds must be >= 1, got {rounds}")

    n = len(a)
    if metric == "accuracy":
        va = np.array([r.prediction == r.reference for r in a], dtype=np.float64)
        vb = np.array([r.prediction == r.reference for r in b], dtype=np.float64)

        def gap(swap: np.ndarray) -> np.ndarray:
            ea = np.where(swap, vb, va).mean(axis=-1)
            eb = np.where(swap, va, vb).mean(axis=-1)
            return np.abs(ea - eb) * 100.0

    elif metric == "cer":
        va = np.array([levenshtein(r.prediction, r.reference) for r in a],
                      dtype=np.float64)
        vb = np.array([levenshtein(r.prediction, r.reference) for r in b],
                      dtype=np.float64)
        total_ref = float(sum(len(r.reference) for r in a))
        if total_ref == 0:
            raise ValueError("character error rate undefined: zero total reference length")

        def gap(swap: np.ndarray) -> np.ndarray:
            ea = np.where(swap, vb, va).sum(axis=-1) / total_ref
            eb = np.where(swap, va, vb).sum(axis=-1) / total_ref
            return np.abs(ea - eb) * 100.0

    else:
        raise ValueError(f"unknown metric {metric!r}, expected 'accuracy' or 'cer'")

    t0 = float(gap(np.zeros(n, dtype=bool)[None])[0])
    streams = np.random.SeedSequence(seed).spawn(rounds)
    swaps = np.stack([np.random.default_rng(s).random(n) for s in streams]) < 0.5
    count = int((gap(swaps) >= t0).sum())
    return (count + 1) / (rounds + 1)


# ---------------------------------------------------------------------------
# error taxonomy


def _common_prefix_len(a: str, b: str) -> int:
    n = min(len(a), len(b))
    for i in range(n):
        if a[i] != b[i]:
            return i
    return n


def classify_errors(records: Iterable[PredictionRecord],
                    t2_max_substitutions: int = 3,
                    t3_length_ratio: float = 0.6,
                    t3_prefix_ratio: float = 0.9) -> ErrorBreakdown:
    """Bucket every incorrect prediction into one failure shape.

    First match wins: cap-limited decodes (T1); early stops, meaning much
    shorter than the reference but agreeing with its start (T3);
    same-length outputs with at most a few wrong characters (T2);
    everything else, including jumps, lands in Others.
    """
    t1 = t2 = t3 = others = 0
    for r in records:
        if r.prediction == r.reference:
            continue
        if r.hit_cap:
            t1 += 1
        elif (len(r.prediction) < t3_length_ratio * len(r.reference)
              and _common_prefix_len(r.prediction, r.reference)
              >= t3_prefix_ratio * len(r.prediction)):
            t3 += 1
        elif (len(r.prediction) == len(r.reference)
              and sum(x != y for x, y in zip(r.prediction, r.reference))
              <= t2_max_substitutions):
            t2 += 1
        else:
            others += 1
    return ErrorBreakdown(t1=t1, t2=t2, t3=t3, others=others,
                          total=t1 + t2 + t3 + others)


# ---------------------------------------------------------------------------
# file formats


def dump_predictions(stream: TextIO, records: Iterable[PredictionRecord]) -> None:
    writer = csv.writer(stream, quoting=csv.QUOTE_ALL, lineterminator="\n")
    writer.writerow(PREDICTIONS_HEADER)
    for r in records:
        writer.writerow((r.input, r.reference, r.prediction,
                         "true" if r.hit_cap else "false"))


def dump_predictions_file(path, records: Iterable[PredictionRecord]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        dump_predictions(fh, records)


def read_predictions(stream: TextIO, source: str = "<stream>"
                     ) -> list[PredictionRecord]:
    reader = csv.reader(stream)
    header = next(reader, None)
    if header is None or tuple(header) != PREDICTIONS_HEADER:
        raise ValueError(
            f"{source}: expected header {list(PREDICTIONS_HEADER)}, found {header}")
    records = []
    for row in reader:
        if not row:
            continue
        if len(row) != 4:
            raise ValueError(
                f"{source}: line {reader.line_num}: expected 4 fields, found {len(row)}")
        flag = row[3]
        if flag not in ("true", "false"):
            raise ValueError(
                f"{source}: line {reader.line_num}: hit_cap must be 'true' or "
                f"'false', found {flag!r}")
        records.append(PredictionRecord(row[0], row[1], row[2], flag == "true"))
    return records


def read_predictions_file(path) -> list[PredictionRecord]:
    with open(path, encoding="utf-8", newline="") as fh:
        return read_predictions(fh, source=str(path))


def dump_attention(result: DecodeResult, input_text: str, path,
                   image_path=None, cell_size: int = 8) -> None:
    """Write the attention trace: input line, output line, then one
    tab-separated row of weights per emitted character. Optionally
    rasterize the matrix to a grayscale image, brighter cells for
    larger weights."""
    matrix = result.trace.matrix
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(input_text + "\n")
        fh.write(result.text + "\n")
        for row in matrix:
            fh.write("\t".join(f"{v:.8f}" for v in row) + "\n")
    if image_path is not None:
        from PIL import Image

        if matrix.size == 0:
            raise ValueError("cannot rasterize an empty attention trace")
        cells = np.clip(np.round(matrix * 255.0), 0, 255).astype(np.uint8)
        scaled = np.kron(cells, np.ones((cell_size, cell_size), dtype=np.uint8))
        Image.fromarray(scaled, mode="L").save(image_path)
