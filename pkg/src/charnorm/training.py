"""Optimization loop, checkpointing and training logs.

Batches are built once from the length-sorted training split; every
epoch visits all of them in an order drawn deterministically from
(seed, epoch), so a resumed run consumes exactly the batch sequence
the uninterrupted run would have. Checkpoints are self-describing
binary files whose tensors round-trip bitwise.
"""

from __future__ import annotations

import json
import struct
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .alphabet import Alphabet, from_chars
from .evaluation import EvalReport, evaluate
from .model import Model, ModelConfig
from .pipeline import DatasetSplit, make_batches

CHECKPOINT_MAGIC = b"CNCK"
CHECKPOINT_VERSION = 1

OPTIMIZER_KINDS = ("sgd", "adam")
_OPTIMIZER_ALIASES = {"adaptive-moment": "adam"}


class NonFiniteLossError(FloatingPointError):
    """Training aborted on a NaN/inf loss; carries a diagnostic checkpoint."""

    def __init__(self, message: str, checkpoint: "Checkpoint"):
        super().__init__(message)
        self.checkpoint = checkpoint


@dataclass
class TrainConfig:
    seed: int = 0
    batch_size: int = 32
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    max_iterations: int | None = None
    max_duration: float | None = None
    validation_every: int | None = None
    clip_norm: float = 5.0

    def validate(self) -> None:
        kind = _OPTIMIZER_ALIASES.get(self.optimizer, self.optimizer)
        if kind not in OPTIMIZER_KINDS:
            raise ValueError(
                f"train.optimizer must be one of {OPTIMIZER_KINDS} "
                f"(or 'adaptive-moment'), got {self.optimizer!r}")
        if self.batch_size < 1:
            raise ValueError("train.batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("train.learning_rate must be positive")
        if self.max_iterations is None and self.max_duration is None:
            raise ValueError(
                "no stopping criterion: set train.max_iterations or "
                "train.max_duration (or both)")
        if self.max_iterations is not None and self.max_iterations < 0:
            raise ValueError("train.max_iterations must be >= 0")
        if self.max_duration is not None and self.max_duration < 0:
            raise ValueError("train.max_duration must be >= 0")
        if self.validation_every is not None and self.validation_every < 1:
            raise ValueError("train.validation_every must be >= 1")

    @property
    def optimizer_kind(self) -> str:
        return _OPTIMIZER_ALIASES.get(self.optimizer, self.optimizer)

    def to_dict(self) -> dict:
        return {"seed": self.seed, "batch_size": self.batch_size,
                "learning_rate": self.learning_rate,
                "optimizer": self.optimizer,
                "max_iterations": self.max_iterations,
                "max_duration": self.max_duration,
                "validation_every": self.validation_every,
                "clip_norm": self.clip_norm}

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        cfg = cls(**raw)
        cfg.validate()
        return cfg


@dataclass
class TrainEntry:
    iteration: int
    wall_time: float
    loss: float


@dataclass
class ValEntry:
    iteration: int
    wall_time: float
    nll: float
    cer_percent: float
    accuracy_percent: float


@dataclass
class TrainLog:
    train: list[TrainEntry] = field(default_factory=list)
    validation: list[ValEntry] = field(default_factory=list)

    HEADER = ("# training log\n"
              "# train\titeration\twall_time_s\tloss\n"
              "# val\titeration\twall_time_s\tnll\tcer_percent\taccuracy_percent\n")

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.HEADER)
            events = ([("train", e.iteration, e) for e in self.train]
                      + [("val", e.iteration, e) for e in self.validation])
            for kind, _, e in sorted(events, key=lambda item: (item[1], item[0])):
                if kind == "train":
                    fh.write(f"train\t{e.iteration}\t{e.wall_time:.6f}\t{e.loss!r}\n")
                else:
                    fh.write(f"val\t{e.iteration}\t{e.wall_time:.6f}\t{e.nll!r}"
                             f"\t{e.cer_percent!r}\t{e.accuracy_percent!r}\n")

    @classmethod
    def load(cls, path) -> "TrainLog":
        log = cls()
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if line.startswith("#") or not line.strip():
                    continue
                fields = line.rstrip("\n").split("\t")
                if fields[0] == "train":
                    log.train.append(TrainEntry(int(fields[1]), float(fields[2]),
                                                float(fields[3])))
                elif fields[0] == "val":
                    log.validation.append(ValEntry(
                        int(fields[1]), float(fields[2]), float(fields[3]),
                        float(fields[4]), float(fields[5])))
                else:
                    raise ValueError(f"{path}: unknown log row kind {fields[0]!r}")
        return log


def measure_rate(log: TrainLog) -> float:
    """Average iterations per second over the logged window."""
    if len(log.train) < 2:
        raise ValueError("rate needs at least two logged iterations")
    first, last = log.train[0], log.train[-1]
    elapsed = last.wall_time - first.wall_time
    if elapsed <= 0:
        raise ValueError("rate undefined: no wall time elapsed between entries")
    return (last.iteration - first.iteration) / elapsed


# ---------------------------------------------------------------------------
# optimizers


class Sgd:
    kind = "sgd"

    def __init__(self, learning_rate: float):
        self.learning_rate = learning_rate
        self.step_count = 0

    def step(self, params: dict[str, ad.Tensor]) -> None:
        self.step_count += 1
        for p in params.values():
            if p.grad is not None:
                p.data -= self.learning_rate * p.grad

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {}

    def load_state(self, step_count: int, arrays: dict[str, np.ndarray]) -> None:
        self.step_count = step_count


class Adam:
    """Adaptive moment estimation with bias correction."""

    kind = "adam"

    def __init__(self, learning_rate: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, ad.Tensor]) -> None:
        self.step_count += 1
        correction1 = 1.0 - self.beta1 ** self.step_count
        correction2 = 1.0 - self.beta2 ** self.step_count
        for name, p in params.items():
            g = p.grad
            if g is None:
                continue
            m = self.m.setdefault(name, np.zeros_like(p.data))
            v = self.v.setdefault(name, np.zeros_like(p.data))
            m += (1.0 - self.beta1) * (g - m)
            v += (1.0 - self.beta2) * (g * g - v)
            step = (self.learning_rate / correction1) * m
            step /= np.sqrt(v / correction2) + self.eps
            p.data -= step

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name, arr in self.m.items():
            out[f"opt.m.{name}"] = arr
        for name, arr in self.v.items():
            out[f"opt.v.{name}"] = arr
        return out

    def load_state(self, step_count: int, arrays: dict[str, np.ndarray]) -> None:
        self.step_count = step_count
        self.m = {name[len("opt.m."):]: arr.copy() for name, arr in arrays.items()
                  if name.startswith("opt.m.")}
        self.v = {name[len("opt.v."):]: arr.copy() for name, arr in arrays.items()
                  if name.startswith("opt.v.")}


def make_optimizer(cfg: TrainConfig):
    if cfg.optimizer_kind == "sgd":
        return Sgd(cfg.learning_rate)
    return Adam(cfg.learning_rate)


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    model_config: ModelConfig
    alphabet_chars: str
    params: dict[str, np.ndarray]
    optimizer_kind: str
    optimizer_step: int
    optimizer_state: dict[str, np.ndarray]
    iteration: int
    seed: int
    format_version: int = CHECKPOINT_VERSION


def make_checkpoint(model: Model, optimizer, iteration: int, seed: int
                    ) -> Checkpoint:
    return Checkpoint(
        model_config=model.cfg,
        alphabet_chars="".join(model.alphabet.chars),
        params={name: p.data.copy() for name, p in model.parameters().items()},
        optimizer_kind=optimizer.kind,
        optimizer_step=optimizer.step_count,
        optimizer_state={name: arr.copy()
                         for name, arr in optimizer.state_arrays().items()},
        iteration=iteration,
        seed=seed,
    )


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    blobs = list(ckpt.params.items()) + sorted(ckpt.optimizer_state.items())
    header = {
        "format_version": ckpt.format_version,
        "model": ckpt.model_config.to_dict(),
        "alphabet": ckpt.alphabet_chars,
        "iteration": ckpt.iteration,
        "seed": ckpt.seed,
        "optimizer": {"kind": ckpt.optimizer_kind, "step": ckpt.optimizer_step},
        "blobs": [{"name": name, "shape": list(arr.shape)}
                  for name, arr in blobs],
    }
    payload = json.dumps(header, ensure_ascii=False).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<Q", len(payload)))
        fh.write(payload)
        for _, arr in blobs:
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        (header_len,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(header_len).decode("utf-8"))
        arrays = {}
        for blob in header["blobs"]:
            shape = tuple(blob["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(count * 4)
            if len(raw) != count * 4:
                raise ValueError(f"{path}: truncated tensor {blob['name']}")
            arrays[blob["name"]] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
    params = {name: arr for name, arr in arrays.items()
              if not name.startswith("opt.")}
    opt_state = {name: arr for name, arr in arrays.items()
                 if name.startswith("opt.")}
    return Checkpoint(
        model_config=ModelConfig.from_dict(header["model"]),
        alphabet_chars=header["alphabet"],
        params=params,
        optimizer_kind=header["optimizer"]["kind"],
        optimizer_step=header["optimizer"]["step"],
        optimizer_state=opt_state,
        iteration=header["iteration"],
        seed=header["seed"],
        format_version=header["format_version"],
    )


def model_from_checkpoint(ckpt: Checkpoint) -> Model:
    """Rebuild the model a checkpoint describes, weights included."""
    alphabet = from_chars(ckpt.alphabet_chars)
    model = Model(ckpt.model_config, alphabet, np.random.default_rng(ckpt.seed))
    model.load_parameters(ckpt.params)
    return model


# ---------------------------------------------------------------------------
# the loop


def train(model: Model, dataset: DatasetSplit, cfg: TrainConfig,
          run_dir=None, resume_from: Checkpoint | None = None
          ) -> tuple[Checkpoint, TrainLog]:
    """Optimize the model on the dataset's training split.

    Stops at ``max_iterations`` and/or once ``max_duration`` seconds
    have elapsed (checked between batches, so the overshoot is at most
    one batch). When ``run_dir`` is given, writes ``final.ckpt``,
    ``log.tsv``, and, when validation runs, ``best.ckpt`` by
    validation NLL. ``resume_from`` continues the iteration numbering
    and the deterministic batch order of the interrupted run.
    """
    cfg.validate()
    if not dataset.train:
        raise ValueError("training split is empty")
    if cfg.validation_every is not None and not dataset.validation:
        raise ValueError("validation_every is set but the validation split is empty")
    run_dir = Path(run_dir) if run_dir is not None else None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)

    batches = make_batches(dataset.train, cfg.batch_size, model.alphabet)
    params = model.parameters()
    optimizer = make_optimizer(cfg)
    iteration = 0
    if resume_from is not None:
        model.load_parameters(resume_from.params)
        if resume_from.optimizer_kind != optimizer.kind:
            raise ValueError(
                f"checkpoint optimizer is {resume_from.optimizer_kind}, "
                f"config asks for {optimizer.kind}")
        optimizer.load_state(resume_from.optimizer_step,
                             resume_from.optimizer_state)
        iteration = resume_from.iteration

    log = TrainLog()
    start = time.monotonic()
    best_nll = np.inf
    stop = False
    epoch, position = divmod(iteration, len(batches))
    while not stop:
        order = np.random.default_rng((cfg.seed, epoch)).permutation(len(batches))
        while position < len(batches):
            if cfg.max_iterations is not None and iteration >= cfg.max_iterations:
                stop = True
                break
            if (cfg.max_duration is not None
                    and time.monotonic() - start >= cfg.max_duration):
                stop = True
                break
            batch = batches[order[position]]
            loss = model.forward_teacher(batch)
            if not np.isfinite(loss.data):
                diagnostic = make_checkpoint(model, optimizer, iteration, cfg.seed)
                if run_dir is not None:
                    save_checkpoint(diagnostic, run_dir / "diagnostic.ckpt")
                raise NonFiniteLossError(
                    f"loss became {float(loss.data)} at iteration {iteration + 1}",
                    diagnostic)
            graph = ad.Graph(loss)
            graph.backward()
            ad.clip_gradient_norm(params.values(), cfg.clip_norm)
            optimizer.step(params)
            graph.reset()
            iteration += 1
            position += 1
            log.train.append(TrainEntry(iteration, time.monotonic() - start,
                                        float(loss.data)))
            if (cfg.validation_every is not None
                    and iteration % cfg.validation_every == 0):
                report, _ = evaluate(model, dataset.validation, cfg.batch_size)
                log.validation.append(ValEntry(
                    iteration, time.monotonic() - start, report.nll,
                    report.cer_percent, report.accuracy_percent))
                if report.nll < best_nll:
                    best_nll = report.nll
                    if run_dir is not None:
                        save_checkpoint(
                            make_checkpoint(model, optimizer, iteration, cfg.seed),
                            run_dir / "best.ckpt")
        if not stop:
            epoch += 1
            position = 0

    final = make_checkpoint(model, optimizer, iteration, cfg.seed)
    if run_dir is not None:
        save_checkpoint(final, run_dir / "final.ckpt")
        log.save(run_dir / "log.tsv")
    return final, log


# ---------------------------------------------------------------------------
# multi-seed aggregation


@dataclass
class MultiSeedResult:
    reports: list[EvalReport]
    mean_nll: float
    mean_cer_percent: float
    mean_accuracy_percent: float


def run_multi_seed(model_cfg: ModelConfig, dataset: DatasetSplit,
                   cfg: TrainConfig, alphabet: Alphabet, n_seeds: int
                   ) -> MultiSeedResult:
    """Train ``n_seeds`` models with seeds seed, seed+1, ... and report
    per-seed and mean validation metrics."""
    if n_seeds < 1:
        raise ValueError(f"n_seeds must be >= 1, got {n_seeds}")
    if not dataset.validation:
        raise ValueError("multi-seed aggregation needs a validation split")
    reports = []
    for offset in range(n_seeds):
        seed = cfg.seed + offset
        run_cfg = replace(cfg, seed=seed)
        model = Model(model_cfg, alphabet, np.random.default_rng(seed))
        train(model, dataset, run_cfg)
        report, _ = evaluate(model, dataset.validation, cfg.batch_size)
        reports.append(report)
    return MultiSeedResult(
        reports=reports,
        mean_nll=float(np.mean([r.nll for r in reports])),
        mean_cer_percent=float(np.mean([r.cer_percent for r in reports])),
        mean_accuracy_percent=float(np.mean([r.accuracy_percent for r in reports])),
    )
