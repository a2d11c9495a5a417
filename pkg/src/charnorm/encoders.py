"""The four interchangeable encoders producing the code Z.

Every encoder starts with the same stem, a width-1 convolution that
embeds the one-hot columns into ``channels`` features, and preserves
the input length, so downstream attention sees one feature column per
character no matter which encoder produced it.

The bidirectional kinds (LSTM and the causal feature extractor) split
``channels`` into two half-width directions and concatenate; the
symmetric feature extractor mirrors that split with two parallel
half-width stacks, which is what makes its parameter count identical
to the causal one for every configuration; the two differ only in
padding mode.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .alphabet import VOCAB_SIZE

ENCODER_KINDS = ("lstm", "fcnn", "fe", "cfe")


class ConfigError(ValueError):
    """An encoder or model configuration is invalid."""


@dataclass
class EncoderConfig:
    kind: str = "cfe"
    channels: int = 64
    layers: int = 4
    kernel: int = 3
    base_dilation: int = 1

    def validate(self) -> None:
        if self.kind not in ENCODER_KINDS:
            raise ConfigError(
                f"encoder.kind must be one of {ENCODER_KINDS}, got {self.kind!r}")
        if self.channels < 1 or self.layers < 1:
            raise ConfigError("encoder.channels and encoder.layers must be >= 1")
        if self.kind in ("fe", "cfe") and self.kernel < 2:
            raise ConfigError(
                f"encoder.kernel must be >= 2 for {self.kind}, got {self.kernel}")
        if self.kind in ("lstm", "fe", "cfe") and self.channels % 2:
            raise ConfigError(
                f"encoder.channels must be even for {self.kind} "
                f"(two directions), got {self.channels}")
        if self.base_dilation < 1:
            raise ConfigError("encoder.base_dilation must be >= 1")

    def dilation(self, layer: int) -> int:
        """Dilation of the given stack layer: doubles every layer."""
        return self.base_dilation * (2 ** layer)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "channels": self.channels,
                "layers": self.layers, "kernel": self.kernel,
                "base_dilation": self.base_dilation}

    @classmethod
    def from_dict(cls, raw: dict) -> "EncoderConfig":
        cfg = cls(**raw)
        cfg.validate()
        return cfg


@dataclass
class Code:
    """Per-position features Z produced by an encoder.

    ``features`` is (channels, length) or (batch, channels, length);
    there is exactly one column per input position.
    """

    features: ad.Tensor
    length: int


def count_parameters(cfg: EncoderConfig) -> int:
    """Exact number of trainable scalars in the encoder, stem included."""
    cfg.validate()
    c = cfg.channels
    stem = VOCAB_SIZE * c + c
    if cfg.kind == "fcnn":
        return stem + cfg.layers * (c * c + c)
    if cfg.kind in ("fe", "cfe"):
        half = c // 2
        branch = cfg.kernel * c * half + half
        branch += (cfg.layers - 1) * (cfg.kernel * half * half + half)
        return stem + 2 * branch
    half = c // 2
    per_direction_layer = c * 4 * half + half * 4 * half + 4 * half
    return stem + cfg.layers * 2 * per_direction_layer


class Encoder:
    """Common stem handling and the parameter registry."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        cfg.validate()
        self.cfg = cfg
        self._params: dict[str, ad.Tensor] = {}
        self._add("stem.w", ad.parameter(rng, (cfg.channels, VOCAB_SIZE, 1),
                                         fan_in=VOCAB_SIZE))
        self._add("stem.b", ad.parameter(rng, (cfg.channels,), fan_in=VOCAB_SIZE))

    def _add(self, name: str, tensor: ad.Tensor) -> ad.Tensor:
        self._params[name] = tensor
        return tensor

    def parameters(self) -> dict[str, ad.Tensor]:
        return dict(self._params)

    def _stem(self, x: ad.Tensor) -> ad.Tensor:
        return ad.relu(ad.conv1d(x, self._params["stem.w"], self._params["stem.b"]))

    def encode(self, x) -> Code:
        """One-hot input (vocab, l) or (batch, vocab, l) to the code Z."""
        if not isinstance(x, ad.Tensor):
            x = ad.Tensor(np.asarray(x, dtype=np.float32))
        length = x.data.shape[-1]
        return Code(features=self._encode(self._stem(x)), length=length)

    def _encode(self, h: ad.Tensor) -> ad.Tensor:
        raise NotImplementedError


class FcnnEncoder(Encoder):
    """Position-wise multi-layer perceptron: no cross-position mixing."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        super().__init__(cfg, rng)
        c = cfg.channels
        for i in range(cfg.layers):
            self._add(f"body.{i}.w", ad.parameter(rng, (c, c, 1), fan_in=c))
            self._add(f"body.{i}.b", ad.parameter(rng, (c,), fan_in=c))

    def _encode(self, h: ad.Tensor) -> ad.Tensor:
        for i in range(self.cfg.layers):
            if i > 0:
                h = ad.relu(h)
            h = ad.conv1d(h, self._params[f"body.{i}.w"], self._params[f"body.{i}.b"])
        return h


class ConvEncoder(Encoder):
    """Two parallel half-width dilated stacks, concatenated per position.

    The padding modes tell the symmetric feature extractor apart from
    the causal one: ("symmetric", "symmetric") versus ("causal-left",
    "causal-right"). Shapes and parameter counts are identical.
    """

    paddings: tuple[str, str]

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        super().__init__(cfg, rng)
        c, half, k = cfg.channels, cfg.channels // 2, cfg.kernel
        for branch in (0, 1):
            self._add(f"branch{branch}.0.w",
                      ad.parameter(rng, (half, c, k), fan_in=c * k))
            self._add(f"branch{branch}.0.b",
                      ad.parameter(rng, (half,), fan_in=c * k))
            for i in range(1, cfg.layers):
                self._add(f"branch{branch}.{i}.w",
                          ad.parameter(rng, (half, half, k), fan_in=half * k))
                self._add(f"branch{branch}.{i}.b",
                          ad.parameter(rng, (half,), fan_in=half * k))

    def _run_branch(self, h: ad.Tensor, branch: int, padding: str) -> ad.Tensor:
        for i in range(self.cfg.layers):
            if i > 0:
                h = ad.relu(h)
            h = ad.conv1d(h, self._params[f"branch{branch}.{i}.w"],
                          self._params[f"branch{branch}.{i}.b"],
                          dilation=self.cfg.dilation(i), padding=padding)
        return h

    def _encode(self, h: ad.Tensor) -> ad.Tensor:
        a = self._run_branch(h, 0, self.paddings[0])
        b = self._run_branch(h, 1, self.paddings[1])
        return ad.concat([a, b], axis=-2)


class FeEncoder(ConvEncoder):
    """Symmetric dilated convolutions: each position sees both sides."""

    paddings = ("symmetric", "symmetric")


class CfeEncoder(ConvEncoder):
    """Causal feature extractor: a past-only and a future-only stack.

    Branch 0 is causal-left (the feature at t depends on positions
    <= t), branch 1 causal-right (>= t). Dilation doubles per layer.
    """

    paddings = ("causal-left", "causal-right")


class LstmEncoder(Encoder):
    """Stacked bidirectional LSTM over the input columns."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        super().__init__(cfg, rng)
        c, half = cfg.channels, cfg.channels // 2
        for layer in range(cfg.layers):
            for direction in ("fwd", "bwd"):
                prefix = f"{direction}.{layer}"
                self._add(f"{prefix}.w_x", ad.parameter(rng, (c, 4 * half), fan_in=c))
                self._add(f"{prefix}.w_h",
                          ad.parameter(rng, (half, 4 * half), fan_in=half))
                self._add(f"{prefix}.b", ad.parameter(rng, (4 * half,), fan_in=half))

    def _run_direction(self, columns: list[ad.Tensor], layer: int,
                       direction: str) -> list[ad.Tensor]:
        prefix = f"{direction}.{layer}"
        w_x = self._params[f"{prefix}.w_x"]
        w_h = self._params[f"{prefix}.w_h"]
        b = self._params[f"{prefix}.b"]
        batch = columns[0].data.shape[0]
        half = self.cfg.channels // 2
        dtype = columns[0].data.dtype
        h = ad.Tensor(np.zeros((batch, half), dtype=dtype), dtype=dtype)
        c = ad.Tensor(np.zeros((batch, half), dtype=dtype), dtype=dtype)
        order = columns if direction == "fwd" else list(reversed(columns))
        states = []
        for x in order:
            h, c = ad.lstm_step(x, (h, c), w_x, w_h, b)
            states.append(h)
        return states if direction == "fwd" else list(reversed(states))

    def _encode(self, h: ad.Tensor) -> ad.Tensor:
        squeeze = h.data.ndim == 2
        if squeeze:
            h = ad.reshape(h, (1,) + h.data.shape)
        batch, _, length = h.data.shape
        columns = [ad.reshape(ad.narrow(h, 2, t, 1), (batch, self.cfg.channels))
                   for t in range(length)]
        for layer in range(self.cfg.layers):
            fwd = self._run_direction(columns, layer, "fwd")
            bwd = self._run_direction(columns, layer, "bwd")
            columns = [ad.concat([f, b], axis=-1) for f, b in zip(fwd, bwd)]
        stacked = ad.concat(
            [ad.reshape(col, (batch, self.cfg.channels, 1)) for col in columns],
            axis=2)
        if squeeze:
            stacked = ad.reshape(stacked, stacked.data.shape[1:])
        return stacked


_BUILDERS: dict[str, Callable[[EncoderConfig, np.random.Generator], Encoder]] = {
    "lstm": LstmEncoder,
    "fcnn": FcnnEncoder,
    "fe": FeEncoder,
    "cfe": CfeEncoder,
}


def make_encoder(cfg: EncoderConfig, rng: np.random.Generator) -> Encoder:
    cfg.validate()
    return _BUILDERS[cfg.kind](cfg, rng)
