"""Command line front end.

Subcommands cover the whole workflow: turning token records into
sentence pairs, training from a JSON run config, evaluating a
checkpoint, comparing two prediction files, bucketing errors, dumping
attention matrices, and generating synthetic datasets.

Exit codes: 0 success, 1 usage or configuration problem, 2 missing or
malformed data, 3 numeric failure during training.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import evaluation as ev
from . import pipeline as pl
from . import toygen
from . import training as tr
from .alphabet import Alphabet, AlphabetError, default_alphabet, load_alphabet
from .encoders import ConfigError, EncoderConfig
from .model import Model, ModelConfig


class RunConfigError(ValueError):
    """Invalid run configuration file."""


@dataclasses.dataclass
class DataConfig:
    """Where the training pairs come from and how to split them.

    With ``select_n`` unset the whole pairs file becomes the training
    split and no validation or test split exists.
    """

    pairs_file: str = ""
    select_n: int | None = None
    select_mode: str = "shortest"
    select_seed: int = 0


@dataclasses.dataclass
class RunConfig:
    model: ModelConfig
    train: tr.TrainConfig
    data: DataConfig
    output_dir: str
    alphabet: str | None = None


_SECTION_FIELDS = {
    "model": tuple(f.name for f in dataclasses.fields(ModelConfig)),
    "model.encoder": tuple(f.name for f in dataclasses.fields(EncoderConfig)),
    "train": tuple(f.name for f in dataclasses.fields(tr.TrainConfig)),
    "data": tuple(f.name for f in dataclasses.fields(DataConfig)),
}
_TOP_FIELDS = ("model", "train", "data", "output_dir", "alphabet")


def _check_section(raw, section: str, problems: list[str]) -> None:
    if not isinstance(raw, dict):
        problems.append(f"{section} must be an object")
        return
    for key in raw:
        dotted = f"{section}.{key}"
        if key not in _SECTION_FIELDS[section]:
            problems.append(f"unknown key {dotted}")
        elif dotted in _SECTION_FIELDS:
            _check_section(raw[key], dotted, problems)


def parse_run_config(raw, source: str = "<config>") -> RunConfig:
    """Validate a decoded config dict and build the typed configs.

    Key checking is recursive and every unknown or missing key is
    reported in one pass, not just the first.
    """
    if not isinstance(raw, dict):
        raise RunConfigError(f"{source}: top level must be an object")
    problems: list[str] = []
    for key in raw:
        if key not in _TOP_FIELDS:
            problems.append(f"unknown key {key}")
        elif key in _SECTION_FIELDS:
            _check_section(raw[key], key, problems)
    if "output_dir" not in raw:
        problems.append("missing required key output_dir")
    data_raw = raw.get("data")
    if data_raw is None:
        problems.append("missing required section data")
    elif isinstance(data_raw, dict) and not data_raw.get("pairs_file"):
        problems.append("missing required key data.pairs_file")
    if problems:
        raise RunConfigError(f"{source}: " + "; ".join(problems))

    try:
        model_cfg = ModelConfig.from_dict(raw.get("model", {}))
    except (TypeError, ValueError) as exc:
        raise RunConfigError(f"{source}: model: {exc}") from exc
    try:
        train_cfg = tr.TrainConfig.from_dict(raw.get("train", {}))
    except (TypeError, ValueError) as exc:
        raise RunConfigError(f"{source}: train: {exc}") from exc
    data_cfg = DataConfig(**data_raw)
    if not isinstance(data_cfg.pairs_file, str):
        raise RunConfigError(f"{source}: data.pairs_file must be a string")
    if data_cfg.select_n is not None and not isinstance(data_cfg.select_n, int):
        raise RunConfigError(f"{source}: data.select_n must be an integer")
    if not isinstance(data_cfg.select_seed, int):
        raise RunConfigError(f"{source}: data.select_seed must be an integer")
    if data_cfg.select_n is not None and data_cfg.select_n < 1:
        raise RunConfigError(f"{source}: data.select_n must be >= 1")
    if data_cfg.select_mode not in ("shortest", "random"):
        raise RunConfigError(
            f"{source}: data.select_mode must be 'shortest' or 'random', "
            f"got {data_cfg.select_mode!r}")
    if train_cfg.validation_every is not None and data_cfg.select_n is None:
        raise RunConfigError(
            f"{source}: train.validation_every needs data.select_n, "
            f"otherwise there is no validation split to score")
    alphabet = raw.get("alphabet")
    if alphabet is not None and not isinstance(alphabet, str):
        raise RunConfigError(f"{source}: alphabet must be a path string")
    return RunConfig(model=model_cfg, train=train_cfg, data=data_cfg,
                     output_dir=str(raw["output_dir"]), alphabet=alphabet)


def resolved_config_dict(cfg: RunConfig) -> dict:
    """The config with every default filled in, ready to serialize."""
    return {"model": cfg.model.to_dict(),
            "train": cfg.train.to_dict(),
            "data": dataclasses.asdict(cfg.data),
            "output_dir": cfg.output_dir,
            "alphabet": cfg.alphabet}


def _load_alphabet(path: str | None) -> Alphabet:
    return default_alphabet() if path is None else load_alphabet(path)


# ---------------------------------------------------------------------------
# subcommands


def cmd_preprocess(args) -> int:
    alphabet = _load_alphabet(args.alphabet)
    records = pl.parse_records_file(args.records)
    pairs, stats = pl.preprocess(records, alphabet, args.max_output_len)
    pl.write_pairs_file(args.output, pairs)
    print(f"records {stats.records}")
    print(f"sentences {stats.sentences}")
    print(f"dropped_alphabet {stats.dropped_alphabet}")
    print(f"dropped_length {stats.dropped_length}")
    print(f"kept {stats.kept}")
    return 0


def cmd_train(args) -> int:
    try:
        with open(args.config, encoding="utf-8") as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise RunConfigError(f"{args.config}: {exc}") from exc
    cfg = parse_run_config(raw, source=args.config)
    if args.seed is not None:
        cfg.train = dataclasses.replace(cfg.train, seed=args.seed)

    alphabet = _load_alphabet(cfg.alphabet)
    pairs = pl.read_pairs_file(cfg.data.pairs_file)
    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if cfg.data.select_n is not None:
        split = pl.select_subset(pairs, cfg.data.select_n,
                                 cfg.data.select_mode, cfg.data.select_seed)
        pl.write_split_manifest(out_dir / "split.tsv", split,
                                cfg.data.select_mode, cfg.data.select_seed)
    else:
        ordered = sorted(pairs, key=lambda p: len(p.output), reverse=True)
        split = pl.DatasetSplit(train=ordered, validation=[], test=[])

    resume = tr.load_checkpoint(args.resume) if args.resume else None
    if resume is not None:
        model = tr.model_from_checkpoint(resume)
    else:
        model = Model(cfg.model, alphabet,
                      np.random.default_rng(cfg.train.seed))
    with open(out_dir / "config.json", "w", encoding="utf-8") as fh:
        json.dump(resolved_config_dict(cfg), fh, indent=2)
        fh.write("\n")

    ckpt, log = tr.train(model, split, cfg.train, run_dir=out_dir,
                         resume_from=resume)
    print(f"iterations {ckpt.iteration}")
    if log.train:
        print(f"final_loss {log.train[-1].loss:.6f}")
    if len(log.train) >= 2:
        print(f"rate {tr.measure_rate(log):.1f} it/s")
    if log.validation:
        last = log.validation[-1]
        print(f"val_nll {last.nll:.6f}")
        print(f"val_accuracy_percent {last.accuracy_percent:.4f}")
    return 0


def cmd_evaluate(args) -> int:
    ckpt = tr.load_checkpoint(args.checkpoint)
    model = tr.model_from_checkpoint(ckpt)
    pairs = pl.read_pairs_file(args.pairs)
    report, records = ev.evaluate(model, pairs, batch_size=args.batch_size)
    if args.predictions:
        ev.dump_predictions_file(args.predictions, records)
    print(f"n {report.n}")
    print(f"nll {report.nll:.6f}")
    print(f"cer_percent {report.cer_percent:.4f}")
    print(f"accuracy_percent {report.accuracy_percent:.4f}")
    return 0


def cmd_compare(args) -> int:
    a = ev.read_predictions_file(args.baseline)
    b = ev.read_predictions_file(args.candidate)
    p_value = ev.approx_randomization(a, b, metric=args.metric,
                                      rounds=args.rounds, seed=args.seed)
    metric_fn = ev.accuracy if args.metric == "accuracy" else ev.cer
    print(f"{args.metric}_a {metric_fn(a):.4f}")
    print(f"{args.metric}_b {metric_fn(b):.4f}")
    print(f"p_value {p_value:.6f}")
    return 0


def cmd_classify_errors(args) -> int:
    records = ev.read_predictions_file(args.predictions)
    breakdown = ev.classify_errors(
        records,
        t2_max_substitutions=args.t2_max_substitutions,
        t3_length_ratio=args.t3_length_ratio,
        t3_prefix_ratio=args.t3_prefix_ratio)
    print(f"t1_cap {breakdown.t1}")
    print(f"t2_substitution {breakdown.t2}")
    print(f"t3_truncation {breakdown.t3}")
    print(f"others {breakdown.others}")
    print(f"total_errors {breakdown.total}")
    return 0


def cmd_dump_attention(args) -> int:
    model = tr.model_from_checkpoint(tr.load_checkpoint(args.checkpoint))
    result = model.greedy_decode(args.text, max_output=args.max_output)
    ev.dump_attention(result, args.text, args.output,
                      image_path=args.image, cell_size=args.cell_size)
    print(f"output {result.text}")
    print(f"steps {result.trace.steps}")
    return 0


def cmd_gen_toy(args) -> int:
    generate = toygen.gen_copy if args.task == "copy" else toygen.gen_digits
    pairs = generate(args.n, seed=args.seed)
    pl.write_pairs_file(args.output, pairs)
    print(f"pairs {len(pairs)}")
    return 0


# ---------------------------------------------------------------------------
# parser


class _Parser(argparse.ArgumentParser):
    """Argparse variant whose usage failures exit with code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="charnorm",
                     description="Character-level text normalization toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess",
                       help="turn token records into sentence pairs")
    p.add_argument("records", help="token records file, 3-column CSV")
    p.add_argument("output", help="pairs file to write")
    p.add_argument("--alphabet", help="alphabet file (default: built in)")
    p.add_argument("--max-output-len", type=int, default=pl.MAX_OUTPUT_LEN,
                   help="drop pairs whose output is longer than this")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train a model from a JSON run config")
    p.add_argument("config", help="run config JSON file")
    p.add_argument("--resume", metavar="CHECKPOINT",
                   help="continue from a saved checkpoint")
    p.add_argument("--seed", type=int, help="override train.seed")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a checkpoint on a pairs file")
    p.add_argument("checkpoint")
    p.add_argument("pairs")
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--predictions",
                   help="write the per-pair predictions CSV here")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("compare",
                       help="randomization test between two prediction files")
    p.add_argument("baseline")
    p.add_argument("candidate")
    p.add_argument("--metric", choices=("accuracy", "cer"),
                   default="accuracy")
    p.add_argument("--rounds", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("classify-errors",
                       help="bucket the misses in a predictions file")
    p.add_argument("predictions")
    p.add_argument("--t2-max-substitutions", type=int, default=3)
    p.add_argument("--t3-length-ratio", type=float, default=0.6)
    p.add_argument("--t3-prefix-ratio", type=float, default=0.9)
    p.set_defaults(func=cmd_classify_errors)

    p = sub.add_parser("dump-attention",
                       help="decode one string and save its attention matrix")
    p.add_argument("checkpoint")
    p.add_argument("text", help="input string to normalize")
    p.add_argument("output", help="matrix text file to write")
    p.add_argument("--image", help="also render a PNG here")
    p.add_argument("--cell-size", type=int, default=8)
    p.add_argument("--max-output", type=int, help="decoding cap override")
    p.set_defaults(func=cmd_dump_attention)

    p = sub.add_parser("gen-toy", help="generate a synthetic dataset")
    p.add_argument("task", choices=("copy", "digits"))
    p.add_argument("n", type=int)
    p.add_argument("output", help="pairs file to write")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_toy)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # --help exits 0 through here; usage errors already carry 1
        return 0 if exc.code in (0, None) else 1
    try:
        return args.func(args)
    except (ConfigError, RunConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ad.NonFiniteError, tr.NonFiniteLossError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (pl.ParseError, AlphabetError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
