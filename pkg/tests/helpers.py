"""Shared numeric oracles for the test suite.

These are deliberately independent of the package internals: the
finite-difference gradients re-run the forward pass, the Levenshtein
oracle is the plain quadratic table, the convolution oracle is the
direct nested-loop sum.
"""

from __future__ import annotations

import numpy as np


def finite_difference_grads(build, params, step=1e-3):
    """Central-difference gradients of a scalar loss wrt each parameter.

    ``build()`` must rebuild the forward pass from the current parameter
    values and return the scalar loss tensor. Parameters should hold
    float64 data or the difference quotient drowns in roundoff.
    """
    grads = []
    for p in params:
        g = np.zeros_like(p.data)
        flat = p.data.ravel()
        gflat = g.ravel()
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + step
            up = float(build().data)
            flat[i] = saved - step
            down = float(build().data)
            flat[i] = saved
            gflat[i] = (up - down) / (2.0 * step)
        grads.append(g)
    return grads


def assert_grads_close(analytic, numeric, rel=1e-3, floor=1e-6):
    """Relative-error check on every entry with non-negligible gradient."""
    for a, n in zip(analytic, numeric):
        a = np.asarray(a, dtype=np.float64)
        n = np.asarray(n, dtype=np.float64)
        mask = np.abs(n) > floor
        if not mask.any():
            continue
        err = np.abs(a - n)[mask] / np.maximum(np.abs(a), np.abs(n))[mask]
        assert err.max() < rel, f"gradient relative error {err.max():.3e}"


def reference_levenshtein(a: str, b: str) -> int:
    """Quadratic dynamic-programming table, unit costs."""
    rows, cols = len(a) + 1, len(b) + 1
    table = [[0] * cols for _ in range(rows)]
    for i in range(rows):
        table[i][0] = i
    for j in range(cols):
        table[0][j] = j
    for i in range(1, rows):
        for j in range(1, cols):
            same = a[i - 1] == b[j - 1]
            table[i][j] = min(
                table[i - 1][j] + 1,
                table[i][j - 1] + 1,
                table[i - 1][j - 1] + (0 if same else 1),
            )
    return table[-1][-1]


def reference_conv1d(x, w, bias=None, dilation=1, padding="symmetric"):
    """Direct summation over every tap, batch and position."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    squeeze = x.ndim == 2
    if squeeze:
        x = x[None]
    batch, _, length = x.shape
    n_out, n_in, k = w.shape
    span = (k - 1) * dilation
    out = np.zeros((batch, n_out, length))
    for b in range(batch):
        for o in range(n_out):
            for t in range(length):
                acc = 0.0
                for j in range(k):
                    if padding == "causal-left":
                        src = t - j * dilation
                    elif padding == "causal-right":
                        src = t + j * dilation
                    else:
                        src = t + j * dilation - span // 2
                    if 0 <= src < length:
                        acc += float(np.dot(w[o, :, j], x[b, :, src]))
                out[b, o, t] = acc
            if bias is not None:
                out[b, o] += float(np.asarray(bias, dtype=np.float64)[o])
    return out[0] if squeeze else out


SMALL_NUMBERS = [
    "zero", "one", "two", "three", "four", "five", "six", "seven", "eight",
    "nine", "ten", "eleven", "twelve", "thirteen", "fourteen", "fifteen",
    "sixteen", "seventeen", "eighteen", "nineteen",
]
TENS_NUMBERS = [
    "", "", "twenty", "thirty", "forty", "fifty", "sixty", "seventy",
    "eighty", "ninety",
]


def reference_number_words(n: int) -> str:
    """Table-composed spelling for 0..999, independent of the generator."""
    if n < 20:
        return SMALL_NUMBERS[n]
    if n < 100:
        tens, rest = divmod(n, 10)
        word = TENS_NUMBERS[tens]
        return word if rest == 0 else word + " " + SMALL_NUMBERS[rest]
    hundreds, rest = divmod(n, 100)
    word = SMALL_NUMBERS[hundreds] + " hundred"
    return word if rest == 0 else word + " " + reference_number_words(rest)
