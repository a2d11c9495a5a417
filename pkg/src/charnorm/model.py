"""Encoder-decoder normalization model.

The encoder turns the one-hot input into the code Z; a single-layer
LSTM decoder walks the output characters, at each step scoring Z
against its hidden state, flattening the resulting context matrix
next to the previous character's embedding, and projecting to
log-probabilities over the vocabulary. Training teacher-forces the
gold characters; inference decodes greedily until EOS or the output
cap.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import attention as at
from . import autodiff as ad
from .alphabet import Alphabet, PAD, SOS, EOS, VOCAB_SIZE
from .encoders import Code, ConfigError, EncoderConfig, make_encoder
from .pipeline import Batch, MAX_OUTPUT_LEN


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder_hidden: int = 128
    d: int = 5
    embed_dim: int = 32
    attn_hidden: int = 64
    max_output: int = MAX_OUTPUT_LEN
    vocab: int = VOCAB_SIZE

    def validate(self) -> None:
        self.encoder.validate()
        for name in ("decoder_hidden", "d", "embed_dim", "attn_hidden",
                     "max_output"):
            if getattr(self, name) < 1:
                raise ConfigError(f"model.{name} must be >= 1")
        if self.vocab != VOCAB_SIZE:
            raise ConfigError(
                f"model.vocab must be {VOCAB_SIZE} (127 characters plus "
                f"PAD/SOS/EOS), got {self.vocab}")

    def to_dict(self) -> dict:
        return {"encoder": self.encoder.to_dict(),
                "decoder_hidden": self.decoder_hidden, "d": self.d,
                "embed_dim": self.embed_dim, "attn_hidden": self.attn_hidden,
                "max_output": self.max_output, "vocab": self.vocab}

    @classmethod
    def from_dict(cls, raw: dict) -> "ModelConfig":
        raw = dict(raw)
        raw["encoder"] = EncoderConfig(**raw.get("encoder", {}))
        cfg = cls(**raw)
        cfg.validate()
        return cfg


@dataclass
class DecodeResult:
    text: str
    trace: at.AttentionTrace
    hit_cap: bool


class Model:
    """Any encoder plus the attention decoder, with named parameters."""

    def __init__(self, cfg: ModelConfig, alphabet: Alphabet,
                 rng: np.random.Generator):
        cfg.validate()
        self.cfg = cfg
        self.alphabet = alphabet
        self.encoder = make_encoder(cfg.encoder, rng)
        code_dim = cfg.encoder.channels
        hidden = cfg.decoder_hidden
        self.attn = at.AttentionParams.create(
            rng, cfg.attn_hidden, code_dim, state_dim=hidden)
        self.embed = ad.parameter(rng, (cfg.vocab, cfg.embed_dim),
                                  fan_in=cfg.vocab)
        step_in = cfg.embed_dim + code_dim * cfg.d
        self.dec_w_x = ad.parameter(rng, (step_in, 4 * hidden), fan_in=step_in)
        self.dec_w_h = ad.parameter(rng, (hidden, 4 * hidden), fan_in=hidden)
        self.dec_b = ad.parameter(rng, (4 * hidden,), fan_in=hidden)
        self.out_w = ad.parameter(rng, (hidden, cfg.vocab), fan_in=hidden)
        self.out_b = ad.parameter(rng, (cfg.vocab,), fan_in=hidden)

    def parameters(self) -> dict[str, ad.Tensor]:
        params = {f"encoder.{name}": p
                  for name, p in self.encoder.parameters().items()}
        params.update(self.attn.named("attn"))
        params.update({
            "embed.table": self.embed,
            "dec.w_x": self.dec_w_x,
            "dec.w_h": self.dec_w_h,
            "dec.b": self.dec_b,
            "out.w": self.out_w,
            "out.b": self.out_b,
        })
        return params

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters().values())

    def load_parameters(self, arrays: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = sorted(set(params) - set(arrays))
        extra = sorted(set(arrays) - set(params))
        if missing or extra:
            raise ValueError(
                f"parameter set mismatch: missing {missing}, unexpected {extra}")
        for name, tensor in params.items():
            if arrays[name].shape != tensor.data.shape:
                raise ValueError(
                    f"parameter {name} has shape {arrays[name].shape}, "
                    f"expected {tensor.data.shape}")
            tensor.data = arrays[name].astype(np.float32)

    # -- decoding ----------------------------------------------------------

    def initial_state(self, batch: int) -> tuple[ad.Tensor, ad.Tensor]:
        hidden = self.cfg.decoder_hidden
        return (ad.Tensor(np.zeros((batch, hidden), dtype=np.float32)),
                ad.Tensor(np.zeros((batch, hidden), dtype=np.float32)))

    def decode_step(self, prev_indices: np.ndarray,
                    state: tuple[ad.Tensor, ad.Tensor], z: Code
                    ) -> tuple[ad.Tensor, tuple[ad.Tensor, ad.Tensor], ad.Tensor]:
        """One decoder step for a batch.

        Scores the code against the incoming hidden state, selects the
        context matrix, and feeds (previous character embedding,
        flattened context) through the LSTM cell and the output
        projection. Returns log-probabilities (batch, vocab), the next
        state, and the attention weights (batch, l).
        """
        h, _ = state
        batch = h.data.shape[0]
        alpha = at.normalize(at.score(h, z, self.attn))
        context, _ = at.context_matrix(alpha, z, self.cfg.d)
        flat = ad.reshape(context, (batch, self.cfg.encoder.channels * self.cfg.d))
        emb = ad.embedding(self.embed, np.asarray(prev_indices))
        x = ad.concat([emb, flat], axis=-1)
        h2, c2 = ad.lstm_step(x, state, self.dec_w_x, self.dec_w_h, self.dec_b)
        logits = ad.add(ad.matmul(h2, self.out_w), self.out_b)
        return ad.log_softmax(logits, axis=-1), (h2, c2), alpha

    def forward_teacher(self, batch: Batch) -> ad.Tensor:
        """Teacher-forced mean NLL over the non-padding target positions."""
        z = self.encoder.encode(ad.Tensor(batch.inputs))
        n, steps = batch.targets.shape
        state = self.initial_state(n)
        rows = []
        for t in range(steps - 1):
            log_probs, state, _ = self.decode_step(batch.targets[:, t], state, z)
            rows.append(log_probs)
        stacked = ad.concat(rows, axis=0)  # (steps-1)*n rows, time-major
        gold = batch.targets[:, 1:].T.reshape(-1)
        return ad.nll_loss(stacked, gold, pad_index=PAD)

    def greedy_decode(self, text: str, max_output: int | None = None
                      ) -> DecodeResult:
        """Normalize one input string with argmax decoding.

        Emits exactly one character per step until EOS or the output
        cap; the trace keeps one attention row per emitted character.
        """
        cap = self.cfg.max_output if max_output is None else max_output
        one_hot = self.alphabet.one_hot(text)[None]
        with ad.no_grad():
            z = self.encoder.encode(ad.Tensor(one_hot))
            state = self.initial_state(1)
            prev = np.array([SOS])
            chars: list[str] = []
            alphas: list[np.ndarray] = []
            hit_cap = False
            while True:
                if len(chars) >= cap:
                    hit_cap = True
                    break
                log_probs, state, alpha = self.decode_step(prev, state, z)
                scores = log_probs.data[0].copy()
                scores[PAD] = -np.inf   # padding and the start marker are
                scores[SOS] = -np.inf   # never valid emissions
                choice = int(scores.argmax())
                if choice == EOS:
                    break
                chars.append(self.alphabet.chars[choice])
                alphas.append(alpha.data[0].copy())
                prev = np.array([choice])
        return DecodeResult(text="".join(chars),
                            trace=at.record_trace(alphas),
                            hit_cap=hit_cap)
