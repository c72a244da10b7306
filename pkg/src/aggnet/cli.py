"""``aggnet`` command line: synth, train, eval, infer, gradcheck, ablate.

Exit codes: 0 ok, 1 usage or config error, 2 data/IO error, 3 numerical
failure (non-finite loss or a failed gradient check).
"""
from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from . import netpbm
from . import tensor as T
from .config import RunConfig
from .losses import NoValidPixelsError, evaluate
from .model import SCHEMES, ConfigError, load_checkpoint
from .nn import FormatError
from .synth import generate_dataset, read_split, write_split
from .training import (
    NonFiniteLossError,
    evaluate_model,
    format_ablation_table,
    loads_train_state,
    run_ablation,
    train,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
GRADCHECK_TOL = 1e-4


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class NumericalError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_USAGE)


def _echo_config(cfg: RunConfig, extra=()):
    print("# resolved config")
    sys.stdout.write(cfg.dumps())
    for line in extra:
        print(f"# {line}")
    sys.stdout.flush()


def _load_config(args):
    cfg = RunConfig.load(getattr(args, "config", None))
    for item in getattr(args, "set", None) or ():
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        name, value = item.split("=", 1)
        cfg.set(name.strip(), value)
    return cfg.validate()


def _read_data(path, model_cfg):
    data = read_split(path)
    h, w = data.gt.shape[1:]
    if (h, w) != (model_cfg.height, model_cfg.width):
        raise DataError(f"{path}: images are {h}x{w} but the model expects "
                        f"{model_cfg.height}x{model_cfg.width}")
    return data


def _makedirs(path):
    os.makedirs(path, exist_ok=True)


# --------------------------------------------------------------------------
# commands


def cmd_synth(args):
    cfg = _load_config(args)
    if args.seed is not None:
        cfg.set("data_seed", args.seed)
    if args.count < 0:
        raise UsageError("--count must be >= 0")
    _echo_config(cfg, [f"split={args.split} count={args.count}"])
    _makedirs(args.out)
    fractions = write_split(args.out, args.split, args.count, cfg.scene_spec())
    mean = float(np.mean(fractions)) if fractions else 0.0
    print(f"wrote {args.count} samples to {os.path.join(args.out, args.split)} "
          f"mean_hole_fraction={mean:.4f}")
    return EXIT_OK


def cmd_train(args):
    cfg = _load_config(args)
    if args.epochs is not None:
        cfg.set("epochs", args.epochs)
    if args.seed is not None:
        cfg.set("train_seed", args.seed)
        cfg.set("init_seed", args.seed)
    _echo_config(cfg)
    model_cfg, tcfg = cfg.model_config(), cfg.train_config()
    data = _read_data(args.data, model_cfg)
    val = _read_data(args.val, model_cfg) if args.val else None
    _makedirs(args.out)
    with open(os.path.join(args.out, "config.txt"), "w") as fh:
        fh.write(cfg.dumps())
    model = state = None
    if args.resume:
        model = load_checkpoint(os.path.join(args.out, "last.ckpt"))
        with open(os.path.join(args.out, "state.bin"), "rb") as fh:
            state = loads_train_state(fh.read())
    result = train(model_cfg, data, tcfg, val=val, out_dir=args.out, model=model, state=state)
    for line in result.log_lines:
        print(line)
    print(f"checkpoints written to {args.out}")
    return EXIT_OK


def _read_predictions(pred_dir, count):
    preds = []
    for i in range(count):
        path = os.path.join(pred_dir, f"{i:05d}_pred.pgm")
        preds.append(netpbm.read_depth(path))
    return np.stack(preds)


def cmd_eval(args):
    if (args.ckpt is None) == (args.pred is None):
        raise UsageError("eval needs exactly one of --ckpt or --pred")
    if args.pred:
        data = read_split(args.data)
        print(f"# evaluating predictions in {args.pred}")
        pred = _read_predictions(args.pred, len(data))
        if pred.shape != data.gt.shape:
            raise DataError(f"prediction shape {pred.shape} does not match {data.gt.shape}")
        report = evaluate(pred, data.gt)
    else:
        model = load_checkpoint(args.ckpt)
        print(f"# model {model.cfg.to_json()}")
        data = _read_data(args.data, model.cfg)
        report, _ = evaluate_model(model, data, args.batch)
    print(report.to_line())
    return EXIT_OK


def cmd_infer(args):
    model = load_checkpoint(args.ckpt)
    print(f"# model {model.cfg.to_json()}")
    print(f"# keep_valid={not args.no_keep_valid}")
    rgb = netpbm.read_rgb(args.rgb)
    raw = netpbm.read_depth(args.raw)
    if raw.shape != rgb.shape[1:]:
        raise DataError(f"{args.raw} is {raw.shape} but {args.rgb} is {rgb.shape[1:]}")
    if raw.shape != (model.cfg.height, model.cfg.width):
        raise DataError(f"inputs are {raw.shape[0]}x{raw.shape[1]} but the model expects "
                        f"{model.cfg.height}x{model.cfg.width}")
    model.eval()
    pred = model.predict(raw[None], rgb[None])[0].astype(np.float64)
    if not np.all(np.isfinite(pred)):
        raise NumericalError("prediction contains non-finite values")
    if not args.no_keep_valid:
        pred = np.where(raw > 0, raw, pred)
    pred = np.clip(pred, 0.0, netpbm.MAX_DEPTH_M)
    parent = os.path.dirname(os.path.abspath(args.out))
    _makedirs(parent)
    netpbm.write_depth(args.out, pred, [f"source={os.path.basename(args.raw)}"])
    print(f"wrote {args.out} valid_in={float(np.mean(raw > 0)):.4f}")
    return EXIT_OK


def cmd_gradcheck(args):
    from .diagnostics import block_gradchecks

    cfg = _load_config(args)
    _echo_config(cfg)
    errors = block_gradchecks(cfg["k"], cfg["r"], cfg["slope"])
    failed = []
    for name, err in errors.items():
        ok = err < GRADCHECK_TOL
        print(f"{name:<10} max_rel_err={err:.3e} {'ok' if ok else 'FAIL'}")
        if not ok:
            failed.append(name)
    if failed:
        raise NumericalError(f"gradient check failed for {', '.join(failed)}")
    return EXIT_OK


def cmd_ablate(args):
    cfg = _load_config(args)
    schemes = [s.strip().upper() for s in args.schemes.split(",") if s.strip()]
    try:
        seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"--seeds must be comma-separated integers, got {args.seeds!r}") from None
    if not schemes or not seeds:
        raise UsageError("need at least one scheme and one seed")
    unknown = [s for s in schemes if s not in SCHEMES]
    if unknown:
        raise UsageError(f"unknown schemes {unknown}; expected letters from {''.join(SCHEMES)}")
    _echo_config(cfg, [f"schemes={','.join(schemes)} seeds={','.join(map(str, seeds))}"])
    model_cfg = cfg.model_config()
    if args.data:
        train_set = _read_data(args.data, model_cfg)
        test_set = _read_data(args.test, model_cfg) if args.test else None
    else:
        spec = cfg.scene_spec()
        train_set = generate_dataset(spec, "train", args.train_count)
        test_set = generate_dataset(spec, "test", args.test_count)
    if test_set is None:
        raise UsageError("--test is required together with --data")
    rows = run_ablation(schemes, train_set, test_set, seeds, model_cfg, cfg.train_config())
    table = format_ablation_table(rows)
    print(table)
    if args.out:
        _makedirs(args.out)
        with open(os.path.join(args.out, "ablation.txt"), "w") as fh:
            fh.write(table + "\n")
    return EXIT_OK


# --------------------------------------------------------------------------
# entry point


def build_parser():
    parser = _Parser(prog="aggnet", description="Depth completion with attention-guided gated convolutions.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def with_config(p):
        p.add_argument("--config", help="key = value run configuration file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override one config key (repeatable)")

    p = sub.add_parser("synth", help="generate a synthetic RGB-D split")
    with_config(p)
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--split", default="train")
    p.add_argument("--seed", type=int, help="overrides data_seed")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model on a split directory")
    with_config(p)
    p.add_argument("--data", required=True, help="split directory (contains manifest.txt)")
    p.add_argument("--val", help="optional validation split; default is the seed partition")
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int, help="overrides train_seed and init_seed")
    p.add_argument("--resume", action="store_true", help="continue from OUT/last.ckpt and OUT/state.bin")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="print metrics for a checkpoint or stored predictions")
    p.add_argument("--ckpt")
    p.add_argument("--pred", help="directory of NNNNN_pred.pgm files instead of a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--batch", type=int, default=8)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="complete one raw depth map")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--rgb", required=True)
    p.add_argument("--raw", required=True)
    p.add_argument("--out", required=True, help="output 16-bit PGM path")
    p.add_argument("--no-keep-valid", action="store_true",
                   help="write the raw network output instead of keeping measured pixels")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("gradcheck", help="finite-difference check of every block")
    with_config(p)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="train schemes over seeds and print the ablation table")
    with_config(p)
    p.add_argument("--schemes", default="A,B,C,D,E,F,G")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--data", help="training split; default synthesizes one from the config")
    p.add_argument("--test", help="test split (required with --data)")
    p.add_argument("--train-count", type=int, default=64)
    p.add_argument("--test-count", type=int, default=16)
    p.add_argument("--out", help="directory for ablation.txt")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s", stream=sys.stderr)
    try:
        T.threads_from_env()
    except ValueError:
        print("aggnet: error: AGGNET_THREADS must be a positive integer", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"aggnet: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericalError, NonFiniteLossError, FloatingPointError) as exc:
        print(f"aggnet: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, OSError, netpbm.NetpbmError, FormatError, NoValidPixelsError,
            T.ShapeError, ValueError) as exc:
        where = f" ({exc.filename})" if isinstance(exc, OSError) and exc.filename else ""
        print(f"aggnet: data error: {exc}{where}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
