"""``formulanet`` command line interface.

Subcommands: train, continue, predict, explain, balance. Exit codes:
0 success, 2 usage/config error, 3 data or model I/O error, 4 divergence.
"""

from __future__ import annotations

import argparse
import csv
import io
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .errors import DataError, FormulaNetError
from .interpret import accumulated_local_effects, partial_dependence, summarize
from .persist import load_model, save_model
from .svg import effect_curve_svg, loss_curve_svg
from .tabular import read_csv
from .training import TrainConfig, continue_training, fit, predict
from .uncertainty import format_table, rows_to_csv

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4


class UsageError(Exception):
    pass


def _hidden(text: str):
    text = text.strip()
    if text in ("", "none", "()"):
        return ()
    try:
        widths = tuple(int(t) for t in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated widths, got {text!r}")
    return widths


def _env_int(name, default):
    value = os.environ.get(name)
    if value is None or value == "":
        return default
    try:
        return int(value)
    except ValueError:
        raise UsageError(f"environment variable {name} must be an integer, got {value!r}")


def _add_training_flags(p, defaults: bool):
    """Training hyperparameters shared by train and continue.

    For ``continue`` every default is None so only explicitly given flags
    become overrides.
    """
    d = TrainConfig() if defaults else None

    def dflt(name):
        return getattr(d, name) if d is not None else None

    p.add_argument("--lr", type=float, default=dflt("lr"), help="learning rate (default 0.01)")
    p.add_argument("--batchsize", type=int, default=dflt("batchsize"),
                   help="samples per training step (default 32)")
    p.add_argument("--lambda", dest="lambda_", type=float, default=dflt("lambda_"),
                   help="elastic net strength (default 0)")
    p.add_argument("--alpha", type=float, default=dflt("alpha"),
                   help="L1 share of the elastic net (default 0.5)")
    p.add_argument("--early-stopping", type=int, default=dflt("early_stopping"),
                   metavar="N", help="stop after N epochs without validation improvement")
    p.add_argument("--optimizer", choices=("sgd", "adam"), default=dflt("optimizer"))
    p.add_argument("--lr-scheduler", choices=("none", "reduce_on_plateau"),
                   default=dflt("lr_scheduler"))
    p.add_argument("--patience", type=int, default=dflt("patience"),
                   help="scheduler patience in epochs (default 10)")
    p.add_argument("--factor", type=float, default=dflt("factor"),
                   help="scheduler lr multiplier (default 0.1)")
    p.add_argument("--no-shuffle", dest="shuffle", action="store_false",
                   default=True if defaults else None)
    p.add_argument("--validation", type=float, default=dflt("validation"),
                   help="fraction of rows held out for validation (default 0)")
    p.add_argument("--threads", type=int, default=None,
                   help="bootstrap worker threads (env FORMULANET_THREADS, default 1)")
    p.add_argument("--quiet", action="store_true", help="do not print epoch log lines")
    p.add_argument("--no-embed-data", dest="embed_data", action="store_false",
                   help="do not store the training table in the model file")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="formulanet", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"formulanet {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a network from a CSV file")
    t.add_argument("--data", required=True, help="training CSV")
    t.add_argument("--formula", required=True, help='model formula, e.g. "y ~ ."')
    t.add_argument("--out", required=True, help="output model file (.fnm)")
    t.add_argument("--loss", default="gaussian",
                   choices=("gaussian", "mse", "binomial", "poisson", "softmax"))
    t.add_argument("--hidden", type=_hidden, default=(50, 50), help="layer widths, e.g. 50,50")
    t.add_argument("--activation", default="selu", choices=("selu", "relu", "tanh", "sigmoid"))
    t.add_argument("--no-bias", dest="bias", action="store_false")
    t.add_argument("--dropout", type=float, default=0.0)
    t.add_argument("--epochs", type=int, default=100)
    t.add_argument("--bootstrap", type=int, default=None, metavar="B",
                   help="number of bootstrap replicates (default off)")
    t.add_argument("--seed", type=int, default=None, help="random seed (env FORMULANET_SEED)")
    t.add_argument("--no-standardize", dest="standardize", action="store_false")
    _add_training_flags(t, defaults=True)

    c = sub.add_parser("continue", help="continue training a saved model")
    c.add_argument("--model", required=True)
    c.add_argument("--epochs", type=int, required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--data", default=None, help="continue on a different CSV")
    # architecture flags are accepted only to reject them with exit code 2
    for flag in ("--hidden", "--activation", "--dropout", "--loss", "--bootstrap", "--seed"):
        c.add_argument(flag, dest="arch_" + flag[2:], default=None, help=argparse.SUPPRESS)
    for flag in ("--no-bias", "--no-standardize"):
        c.add_argument(flag, dest="arch_" + flag[2:].replace("-", "_"), action="store_true",
                       default=None, help=argparse.SUPPRESS)
    _add_training_flags(c, defaults=False)

    pr = sub.add_parser("predict", help="predict for new data")
    pr.add_argument("--model", required=True)
    pr.add_argument("--data", required=True)
    pr.add_argument("--scale", choices=("response", "link"), default="response")
    pr.add_argument("--out", required=True)

    e = sub.add_parser("explain", help="feature importance, effects and effect plots")
    e.add_argument("--model", required=True)
    e.add_argument("--what", required=True, choices=("summary", "importance", "ace", "pdp", "ale"))
    e.add_argument("--feature", default=None)
    e.add_argument("--bins", type=int, default=10)
    e.add_argument("--grid", type=int, default=20)
    e.add_argument("--n-perm", type=int, default=5)
    e.add_argument("--seed", type=int, default=None)
    e.add_argument("--out", default=None, help="output prefix for CSV/SVG files")

    b = sub.add_parser("balance", help="undersample the majority class of a binary response")
    b.add_argument("--data", required=True)
    b.add_argument("--response", required=True)
    b.add_argument("--seed", type=int, default=None)
    b.add_argument("--out", required=True)
    return parser


def _emit(line, quiet=False):
    if not quiet:
        print(line, flush=True)


def _seed(args):
    return args.seed if args.seed is not None else _env_int("FORMULANET_SEED", 0)


def _threads(args):
    n = args.threads if args.threads is not None else _env_int("FORMULANET_THREADS", 1)
    if n < 1:
        raise UsageError("--threads must be >= 1")
    return n


def _loss_svg(model, out):
    path = f"{out}.loss.svg"
    loss_curve_svg(model.history, path)
    return path


def cmd_train(args) -> int:
    config = TrainConfig(
        hidden=args.hidden, activation=args.activation, bias=args.bias,
        validation=args.validation, epochs=args.epochs, batchsize=args.batchsize,
        shuffle=args.shuffle, lr=args.lr, lambda_=args.lambda_, alpha=args.alpha,
        dropout=args.dropout, early_stopping=args.early_stopping, bootstrap=args.bootstrap,
        optimizer=args.optimizer, lr_scheduler=args.lr_scheduler, patience=args.patience,
        factor=args.factor, loss=args.loss, standardize=args.standardize, seed=_seed(args),
    )
    threads = _threads(args)
    table = read_csv(args.data)
    model = fit(config, table, args.formula, progress=lambda s: _emit(s, args.quiet),
                threads=threads)
    save_model(model, args.out, embed_data=args.embed_data)
    svg = _loss_svg(model, args.out)
    _emit(f"# stop={model.stop_reason} epochs={len(model.history)} model={args.out} plot={svg}",
          args.quiet)
    if model.stop_reason == "diverged":
        print("error: training diverged (non-finite loss); try a smaller --lr",
              file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


def cmd_continue(args) -> int:
    arch = sorted(k[5:] for k, v in vars(args).items() if k.startswith("arch_") and v is not None)
    if arch:
        raise UsageError("cannot change " + ", ".join("--" + a.replace("_", "-") for a in arch)
                         + " when continuing training")
    if args.epochs < 1:
        raise UsageError(f"--epochs must be >= 1, got {args.epochs}")
    overrides = {}
    for key in ("lr", "batchsize", "lambda_", "alpha", "early_stopping", "optimizer",
                "lr_scheduler", "patience", "factor", "shuffle", "validation"):
        value = getattr(args, key)
        if value is not None:
            overrides[key] = value
    model = load_model(args.model)
    table = read_csv(args.data) if args.data else None
    model = continue_training(model, args.epochs, overrides, table=table,
                              progress=lambda s: _emit(s, args.quiet), threads=_threads(args))
    save_model(model, args.out, embed_data=args.embed_data)
    svg = _loss_svg(model, args.out)
    _emit(f"# stop={model.stop_reason} epochs={len(model.history)} model={args.out} plot={svg}",
          args.quiet)
    if model.stop_reason == "diverged":
        print("error: training diverged (non-finite loss)", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


def _read_for_model(model, path):
    kinds = {f.name: f.kind for f in model.encoder.features}
    return read_csv(path, categorical=[n for n, k in kinds.items() if k == "categorical"],
                    numeric=[n for n, k in kinds.items() if k == "numeric"])


def _fmt(v) -> str:
    return repr(float(v))


def cmd_predict(args) -> int:
    model = load_model(args.model)
    table = _read_for_model(model, args.data)
    pred, se = predict(model, table, args.scale)
    if pred.ndim == 1:
        names = ["pred"] + (["se"] if se is not None else [])
        cols = [pred] + ([se] if se is not None else [])
    else:
        levels = model.class_levels
        names = [f"pred_{lv}" for lv in levels]
        cols = [pred[:, k] for k in range(pred.shape[1])]
        if se is not None:
            names += [f"se_{lv}" for lv in levels]
            cols += [se[:, k] for k in range(se.shape[1])]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(names)
    for i in range(len(pred)):
        w.writerow([_fmt(c[i]) for c in cols])
    Path(args.out).write_text(buf.getvalue(), encoding="utf-8")
    return EXIT_OK


def cmd_explain(args) -> int:
    if args.what in ("pdp", "ale") and not args.feature:
        raise UsageError(f"--what {args.what} requires --feature")
    model = load_model(args.model)
    seed = _seed(args)
    prefix = args.out or str(Path(args.model).with_suffix(""))
    if args.what == "summary":
        s = summarize(model, n_perm=args.n_perm, seed=seed)
        print(s.text, end="")
        if args.out:
            Path(f"{prefix}.importance.csv").write_text(rows_to_csv(s.importance))
            Path(f"{prefix}.ace.csv").write_text(rows_to_csv(s.ace))
        return EXIT_OK
    if args.what == "importance":
        s = summarize(model, n_perm=args.n_perm, seed=seed)
        print(format_table("Feature Importance", s.importance, "Importance"), end="")
        if args.out:
            Path(f"{prefix}.importance.csv").write_text(rows_to_csv(s.importance))
        return EXIT_OK
    if args.what == "ace":
        s = summarize(model, n_perm=1, seed=seed)
        print(format_table("Average Conditional Effects", s.ace, "ACE"), end="")
        if args.out:
            Path(f"{prefix}.ace.csv").write_text(rows_to_csv(s.ace))
        return EXIT_OK
    if args.what == "pdp":
        curve = partial_dependence(model, args.feature, grid_size=args.grid)
    else:
        curve = accumulated_local_effects(model, args.feature, n_bins=args.bins)
    base = f"{prefix}.{args.feature}.{args.what}"
    Path(base + ".csv").write_text(curve.to_csv())
    effect_curve_svg(curve, base + ".svg")
    print(f"# wrote {base}.csv and {base}.svg")
    return EXIT_OK


def cmd_balance(args) -> int:
    try:
        text = Path(args.data).read_text(encoding="utf-8")
    except OSError as e:
        raise DataError(f"cannot read {args.data}: {e.strerror}") from None
    rows = [r for r in csv.reader(io.StringIO(text)) if r]
    if not rows:
        raise DataError("CSV input is empty")
    header, body = rows[0], rows[1:]
    names = [h.strip() for h in header]
    if args.response not in names:
        raise DataError(f"unknown column {args.response!r}")
    j = names.index(args.response)
    values = [r[j].strip() for r in body]
    classes = sorted(set(values))
    if len(classes) != 2 or "" in classes:
        raise DataError(f"response {args.response!r} must be binary without missing values, "
                        f"found levels {classes}")
    rng = np.random.default_rng(_seed(args))
    groups = [np.array([i for i, v in enumerate(values) if v == c], dtype=np.int64)
              for c in classes]
    m = min(len(g) for g in groups)
    keep = np.concatenate([g if len(g) == m else np.sort(rng.choice(g, m, replace=False))
                           for g in groups])
    keep = keep[rng.permutation(len(keep))]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for i in keep:
        w.writerow(body[i])
    Path(args.out).write_text(buf.getvalue(), encoding="utf-8")
    print(f"# kept {m} rows per class ({', '.join(classes)}); wrote {args.out}")
    return EXIT_OK


COMMANDS = {"train": cmd_train, "continue": cmd_continue, "predict": cmd_predict,
            "explain": cmd_explain, "balance": cmd_balance}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with 2 on usage errors
    try:
        return COMMANDS[args.command](args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except FormulaNetError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code if e.exit_code in (EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED) else EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
