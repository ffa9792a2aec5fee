"""Command-line entry point.

Exit codes: 0 ok, 1 check failure, 2 usage or configuration error,
3 I/O error, 4 numeric abort during training.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import fields

import numpy as np

from .data import DatasetFormatError, GenSpec, generate, read_dataset, split, write_dataset
from .gradcheck import TOLERANCE, run_suite
from .inference import evaluate, export_latents, format_report, predict, write_predictions, write_report
from .model import ModelConfig, init_params
from .trainer import (
    CheckpointError,
    TrainConfig,
    Trainer,
    TrainingAborted,
    load_checkpoint,
    save_checkpoint,
    start_log,
)

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3, 4
CONFIG_CLASSES = (ModelConfig, TrainConfig, GenSpec)


class ConfigError(ValueError):
    pass


class CliError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


def config_defaults():
    """Every recognised config key with its default, in declaration order."""
    out = {}
    for cls in CONFIG_CLASSES:
        inst = cls()
        for f in fields(cls):
            out.setdefault(f.name, getattr(inst, f.name))
    return out


def _convert(key, raw, default):
    try:
        if isinstance(default, bool):
            return raw.lower() in ("1", "true", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw


def parse_config(text):
    """Parse flat ``key=value`` lines; ``#`` starts a comment."""
    defaults = config_defaults()
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, raw = line.partition("=")
        key, raw = key.strip(), raw.strip()
        if not sep or not key:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        if key not in defaults:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate config key {key!r}")
        values[key] = _convert(key, raw, defaults[key])
    return values


def build_configs(values):
    merged = {**config_defaults(), **values}
    try:
        return tuple(cls(**{f.name: merged[f.name] for f in fields(cls)}) for cls in CONFIG_CLASSES)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path, overrides=None):
    values = {}
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                values = parse_config(fh.read())
        except OSError as exc:
            raise CliError(f"cannot read config: {exc}", EXIT_IO) from None
    values.update(overrides or {})
    configs = build_configs(values)
    try:
        configs[2].validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return configs


def config_help():
    lines = ["config keys (key=default):"]
    lines += [f"  {k}={v}" for k, v in config_defaults().items()]
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def _read(path):
    try:
        return read_dataset(path)
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc}", EXIT_IO) from None
    except DatasetFormatError as exc:
        raise CliError(f"{path}: {exc}", EXIT_IO) from None


def _load_model(path, data=None):
    try:
        ckpt = load_checkpoint(path)
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc}", EXIT_IO) from None
    except (CheckpointError, KeyError, ValueError) as exc:
        raise CliError(f"{path}: {exc}", EXIT_USAGE) from None
    model = ckpt.model
    if ckpt.state.best_params:
        model.load_state(ckpt.state.best_params)
    if data is not None:
        _check_dims(model.config, data, "checkpoint")
    return model


def _check_dims(mc, ds, what):
    want = (mc.input_dim, mc.n_classes, mc.vocab)
    have = (ds.image.shape[1], ds.labels.shape[1], ds.vocab)
    if want != have:
        raise CliError(
            f"{what} expects (d, k, v)={want} but data has (d, k, v)={have}", EXIT_USAGE
        )


def cmd_gen_data(args):
    overrides = {"seed": args.seed} if args.seed is not None else {}
    _, _, spec = load_config(args.config, overrides)
    ds = generate(spec)
    try:
        write_dataset(ds, args.out)
    except OSError as exc:
        raise CliError(f"cannot write {args.out}: {exc}", EXIT_IO) from None
    prevalence = ds.labels.mean(axis=0) if len(ds) else np.zeros(ds.labels.shape[1])
    print(f"n={len(ds)}")
    print("prevalence " + " ".join(f"{p:.4f}" for p in prevalence))
    return EXIT_OK


def cmd_split(args):
    ds = _read(args.data)
    try:
        fractions = [float(x) for x in args.fractions.split(",")]
        parts = split(ds, fractions, args.seed)
    except ValueError as exc:
        raise CliError(str(exc), EXIT_USAGE) from None
    for name, part in zip(("train", "val", "test"), parts):
        path = f"{args.out_prefix}{name}.vkds"
        try:
            write_dataset(part, path)
        except OSError as exc:
            raise CliError(f"cannot write {path}: {exc}", EXIT_IO) from None
        print(f"{name}: n={len(part)} -> {path}")
    return EXIT_OK


def cmd_train(args):
    model_cfg, train_cfg, _ = load_config(args.config)
    train_ds, val_ds = _read(args.data), _read(args.val)
    if args.resume:
        try:
            ckpt = load_checkpoint(args.resume, expected=model_cfg)
        except OSError as exc:
            raise CliError(f"cannot read {args.resume}: {exc}", EXIT_IO) from None
        except CheckpointError as exc:
            raise CliError(str(exc), EXIT_USAGE) from None
        _check_dims(ckpt.model.config, train_ds, "checkpoint")
        trainer = ckpt.trainer(train_ds, val_ds)
    else:
        _check_dims(model_cfg, train_ds, "config")
        _check_dims(model_cfg, val_ds, "config")
        trainer = Trainer(init_params(model_cfg, train_cfg.seed), train_ds, val_ds, train_cfg)
    try:
        if args.log and not args.resume:
            start_log(args.log)
        log = trainer.fit(until_epoch=args.until_epoch, log_path=args.log)
    except TrainingAborted as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        raise CliError(f"cannot write log: {exc}", EXIT_IO) from None
    try:
        save_checkpoint(trainer, args.out)
    except OSError as exc:
        raise CliError(f"cannot write {args.out}: {exc}", EXIT_IO) from None
    if log:
        last = log[-1]
        print(f"epochs={last.epoch} t={last.t} final_train_loss={last.train_total:.6f}")
    print(f"best_val_macro_auc={trainer.state.best_auc:.6f} (epoch {trainer.state.best_epoch})")
    return EXIT_OK


def cmd_eval(args):
    ds = _read(args.data)
    model = _load_model(args.model, ds)
    try:
        report = evaluate(model, ds, args.samples, args.seed)
    except ValueError as exc:
        raise CliError(str(exc), EXIT_USAGE) from None
    print(format_report(report))
    if args.report:
        try:
            write_report(report, args.report)
        except OSError as exc:
            raise CliError(f"cannot write {args.report}: {exc}", EXIT_IO) from None
    return EXIT_OK


def cmd_infer(args):
    ds = _read(args.data)
    model = _load_model(args.model, ds)
    pred = predict(model, ds.image, args.samples, args.seed)
    try:
        write_predictions(pred, args.out)
    except OSError as exc:
        raise CliError(f"cannot write {args.out}: {exc}", EXIT_IO) from None
    print(f"wrote {len(ds)} predictions to {args.out}")
    return EXIT_OK


def cmd_export_latents(args):
    ds = _read(args.data)
    model = _load_model(args.model, ds)
    try:
        export_latents(model, ds, args.out)
    except OSError as exc:
        raise CliError(f"cannot write {args.out}: {exc}", EXIT_IO) from None
    print(f"wrote {len(ds)} latent rows to {args.out}")
    return EXIT_OK


def cmd_gradcheck(args):
    results = run_suite(trials=args.trials, seed=args.seed)
    failed = False
    for r in results:
        status = "ok" if r.passed else "FAIL"
        print(f"{r.family:<16} worst_rel_err={r.max_rel_error:.3e} trials={r.trials} {status}")
        if not r.passed:
            failed = True
            w = r.worst
            print(
                f"  param {w.param_index} coordinate {w.coordinate}: "
                f"analytic={w.analytic:.10g} numeric={w.numeric:.10g}"
            )
    print(f"tolerance={TOLERANCE:g} families={len(results)}")
    return EXIT_CHECK if failed else EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser():
    fmt = argparse.RawDescriptionHelpFormatter
    parser = _Parser(prog="vkd", description=__doc__, epilog=config_help(), formatter_class=fmt)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate a synthetic VKDS dataset", epilog=config_help(), formatter_class=fmt)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("split", help="split a VKDS file into train/val/test files")
    p.add_argument("--data", required=True)
    p.add_argument("--fractions", default="0.6666666666666666,0.16666666666666666,0.16666666666666669")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-prefix", required=True)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="train a model", epilog=config_help(), formatter_class=fmt)
    p.add_argument("--data", required=True)
    p.add_argument("--val", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", help="CSV training log path")
    p.add_argument("--resume", help="continue from this checkpoint")
    p.add_argument("--until-epoch", type=int, help="stop after this epoch (checkpoint stays resumable)")
    p.set_defaults(func=cmd_train)

    for name, func, help_text in (
        ("eval", cmd_eval, "per-class and macro AUC from images only"),
        ("infer", cmd_infer, "write per-class probabilities from images only"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--data", required=True)
        p.add_argument("--model", required=True)
        p.add_argument("--samples", type=int, default=8)
        p.add_argument("--seed", type=int, default=0)
        if name == "eval":
            p.add_argument("--report")
        else:
            p.add_argument("--out", required=True)
        p.set_defaults(func=func)

    p = sub.add_parser("export-latents", help="write prior means and labels as CSV")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_latents)

    p = sub.add_parser("gradcheck", help="run the finite-difference gradient suite")
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
