"""Additive attention scoring and the context-matrix selection.

Instead of collapsing the code into one weighted-sum vector, the
decoder receives a small matrix: the d code columns with the largest
attention weights, each scaled by its weight. Ties pick the lowest
position, and codes shorter than d are completed with zero columns so
the decoder input width never changes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoders import Code


@dataclass
class AttentionParams:
    """Single-hidden-layer scoring network: v . tanh(W_h h + W_z z + b).

    ``w_h`` is laid out (state_dim, hidden) so the state multiplies it
    directly; ``w_z`` is (hidden, channels) so it can left-multiply the
    whole code in one product.
    """

    w_h: Tensor
    w_z: Tensor
    b: Tensor
    v: Tensor

    @classmethod
    def create(cls, rng: np.random.Generator, hidden: int, code_dim: int,
               state_dim: int) -> "AttentionParams":
        return cls(
            w_h=ad.parameter(rng, (state_dim, hidden), fan_in=state_dim),
            w_z=ad.parameter(rng, (hidden, code_dim), fan_in=code_dim),
            b=ad.parameter(rng, (hidden,), fan_in=code_dim),
            v=ad.parameter(rng, (hidden,), fan_in=hidden),
        )

    def named(self, prefix: str = "attn") -> dict[str, Tensor]:
        return {f"{prefix}.w_h": self.w_h, f"{prefix}.w_z": self.w_z,
                f"{prefix}.b": self.b, f"{prefix}.v": self.v}


def _code_features(z: Code | Tensor) -> Tensor:
    return z.features if isinstance(z, Code) else z


def score(h: Tensor, z: Code | Tensor, params: AttentionParams) -> Tensor:
    """One raw score per code position.

    ``h`` is the decoder state description, (state_dim,) or (batch,
    state_dim); the code is (channels, l) or (batch, channels, l).
    Returns (l,) or (batch, l) accordingly.
    """
    feats = _code_features(z)
    if feats.data.shape[-1] == 0:
        raise ad.ShapeError("cannot score an empty code")
    squeeze = feats.data.ndim == 2
    if squeeze:
        feats = ad.reshape(feats, (1,) + feats.data.shape)
        h = ad.reshape(h, (1,) + h.data.shape)
    batch, _, length = feats.data.shape
    hidden = params.b.data.shape[0]
    # (hidden, channels) @ (batch, channels, l) -> (batch, hidden, l)
    zs = ad.matmul(params.w_z, feats)
    hs = ad.reshape(ad.matmul(h, params.w_h), (batch, hidden, 1))
    mix = ad.tanh(ad.add(ad.add(zs, hs), ad.reshape(params.b, (hidden, 1))))
    scores = ad.reshape(ad.matmul(ad.reshape(params.v, (1, hidden)), mix),
                        (batch, length))
    if squeeze:
        scores = ad.reshape(scores, (length,))
    return scores


def normalize(scores: Tensor) -> Tensor:
    """Scores to a stochastic vector along the position axis."""
    return ad.softmax(scores, axis=-1)


def top_indices(alpha: np.ndarray, d: int) -> np.ndarray:
    """Positions of the d largest weights, largest first, ties by lowest
    index; padded with -1 when there are fewer than d positions."""
    length = alpha.shape[-1]
    k = min(d, length)
    order = np.argsort(-alpha, axis=-1, kind="stable")[..., :k]
    if k < d:
        pad_shape = alpha.shape[:-1] + (d - k,)
        order = np.concatenate(
            [order, np.full(pad_shape, -1, dtype=order.dtype)], axis=-1)
    return order


def context_matrix(alpha: Tensor, z: Code | Tensor, d: int
                   ) -> tuple[Tensor, np.ndarray]:
    """The d highest-weight code columns, scaled by their weights.

    Returns the (channels, d) or (batch, channels, d) matrix plus the
    selected source positions (-1 marks a zero-padding column).
    Gradients flow into both the weights and the code through the
    selected entries; the selection itself is treated as constant.
    """
    if d < 1:
        raise ad.ShapeError(f"context size d must be >= 1, got {d}")
    feats = _code_features(z)
    if feats.data.shape[-1] == 0:
        raise ad.ShapeError("cannot build a context matrix from an empty code")
    squeeze = feats.data.ndim == 2
    a2 = alpha.data[None] if squeeze else alpha.data
    z3 = feats.data[None] if squeeze else feats.data
    batch, channels, length = z3.shape
    k = min(d, length)
    sel = top_indices(a2, d)
    idx = sel[:, :k]
    rows = np.arange(batch)[:, None]
    picked = z3[rows, :, idx]                      # (batch, k, channels)
    weights = a2[rows, idx]                        # (batch, k)
    out = np.zeros((batch, channels, d),
                   dtype=np.result_type(a2.dtype, z3.dtype))
    out[:, :, :k] = (picked * weights[:, :, None]).transpose(0, 2, 1)

    def bw(g):
        g3 = g[None] if squeeze else g
        ga = np.zeros_like(a2)
        gz = np.zeros_like(z3)
        gcols = g3[:, :, :k].transpose(0, 2, 1)    # (batch, k, channels)
        np.add.at(ga, (rows, idx), (gcols * picked).sum(axis=2))
        np.add.at(gz.transpose(0, 2, 1), (rows, idx), gcols * weights[:, :, None])
        alpha.accumulate_grad(ga[0] if squeeze else ga)
        feats.accumulate_grad(gz[0] if squeeze else gz)

    result = Tensor._from_op(out[0] if squeeze else out, (alpha, feats), bw)
    return result, (sel[0] if squeeze else sel)


@dataclass
class AttentionTrace:
    """Attention weights of a decode: row i is the α used for the i-th
    emitted character, one column per input position."""

    matrix: np.ndarray

    @property
    def steps(self) -> int:
        return self.matrix.shape[0]

    @property
    def positions(self) -> int:
        return self.matrix.shape[1]


def record_trace(step_alphas: list[np.ndarray]) -> AttentionTrace:
    """Stack per-step weight vectors into the trace matrix."""
    if not step_alphas:
        return AttentionTrace(matrix=np.zeros((0, 0), dtype=np.float32))
    lengths = {len(a) for a in step_alphas}
    if len(lengths) != 1:
        raise ValueError(
            f"ragged attention rows: lengths {sorted(lengths)}; the code "
            f"length is fixed per example")
    return AttentionTrace(matrix=np.stack([np.asarray(a) for a in step_alphas]))
