"""Command-line front end: ``ceg simulate | train | evaluate | generate | predict``.

Every command accepts ``--config FILE`` (a JSON object keyed by option
name, e.g. ``{"n_seqs": 10}``); flags given on the command line override
file values. The fully resolved options are written next to the main
output as ``<output>.config.json``.

Exit codes: 0 success, 2 usage error, 3 invalid or unreadable input
data, 4 numeric failure (divergence, non-finite values, bound violation).
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import classical as cl
from .core import Dataset, DataValidationError, load_dataset, save_dataset, split_dataset, substream
from .evaluate import EvalConfig, evaluate
from .generate import GenerationConfig, generate_dataset, predict_next
from .nets import CegModel, CvaeNets, load_model, save_model
from .train import TrainConfig, train_nonparametric, train_variational

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4
MODELS = ("self-exciting", "self-correcting", "etas")


class UsageError(Exception):
    pass


def _default_threads() -> int:
    raw = os.environ.get("CEG_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def _add_truth_flags(p, prefix=""):
    p.add_argument(f"--{prefix}mu", type=float, default=None)
    p.add_argument(f"--{prefix}beta", type=float, default=None)
    p.add_argument(f"--{prefix}alpha", type=float, default=None)
    p.add_argument(f"--{prefix}C", type=float, default=None)
    p.add_argument(f"--{prefix}sigma-x", type=float, default=None)
    p.add_argument(f"--{prefix}sigma-y", type=float, default=None)
    p.add_argument(f"--{prefix}a", type=float, nargs=2, default=None, metavar=("AX", "AY"))
    p.add_argument(f"--{prefix}domain", type=float, nargs=4, default=None, metavar=("X0", "X1", "Y0", "Y1"))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ceg", description="Conditional event generator toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed=True):
        p.add_argument("--config", default=None, help="JSON file of option values")
        p.add_argument("--threads", type=int, default=_default_threads())
        if seed:
            p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("simulate", help="simulate a classical process by thinning")
    common(p)
    p.add_argument("--model", default="self-exciting")
    _add_truth_flags(p)
    p.add_argument("--T", type=float, default=100.0)
    p.add_argument("--n-seqs", type=int, default=200)
    p.add_argument("--lambda-bar", type=float, default=None)
    p.add_argument("--out", required=False)

    p = sub.add_parser("train", help="train a generator")
    common(p)
    p.add_argument("--method", default="kde", choices=("kde", "cvae"))
    p.add_argument("--data")
    p.add_argument("--heldout", default=None, help="held-out JSONL; default: split --data")
    p.add_argument("--train-frac", type=float, default=0.8)
    p.add_argument("--heldout-out", default=None, help="write the internal held-out split here")
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--L", type=int, default=100)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--bandwidth", default="adaptive", choices=("adaptive", "knn"))
    p.add_argument("--sigma-obs", type=float, default=0.1)
    p.add_argument("--clip-norm", type=float, default=5.0)
    p.add_argument("--ema-decay", type=float, default=0.95, help="weight averaging decay; 0 keeps the last iterate")
    p.add_argument("--noise-dim", type=int, default=16)
    p.add_argument("--hidden-dim", type=int, default=64)
    p.add_argument("--time-head", default="softplus", choices=("softplus", "relu"))
    p.add_argument("--mark-bounds", type=float, nargs="+", default=None)
    p.add_argument("--out")
    p.add_argument("--log", default=None, help="training CSV log (default <out>.log.csv)")

    p = sub.add_parser("evaluate", help="compare a trained generator to a ground-truth process")
    common(p)
    p.add_argument("--model")
    p.add_argument("--data")
    p.add_argument("--truth", default="self-exciting")
    _add_truth_flags(p)
    p.add_argument("--L", type=int, default=1000)
    p.add_argument("--grid-points", type=int, default=20)
    p.add_argument("--plot-seqs", type=int, default=5)
    p.add_argument("--out")
    p.add_argument("--plot", default=None, help="plot-data CSV (default <out>.plot.csv)")

    p = sub.add_parser("generate", help="generate sequences from a trained generator")
    common(p)
    p.add_argument("--model")
    p.add_argument("--T", type=float, default=100.0)
    p.add_argument("--n-seqs", type=int, default=10)
    p.add_argument("--max-events", type=int, default=100_000)
    p.add_argument("--out")

    p = sub.add_parser("predict", help="predict the next event after each history")
    common(p)
    p.add_argument("--model")
    p.add_argument("--history")
    p.add_argument("--L", type=int, default=1000)
    p.add_argument("--out", default=None, help="JSON output (default stdout)")
    return parser


# --------------------------------------------------------------------------- config handling


def _resolve(parser: argparse.ArgumentParser, argv) -> argparse.Namespace:
    args = parser.parse_args(argv)
    if args.config is None:
        return args
    try:
        with open(args.config) as fh:
            values = json.load(fh)
    except OSError as exc:
        raise UsageError(f"--config: cannot read {args.config}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"--config: {args.config} is not valid JSON: {exc}") from exc
    if not isinstance(values, dict):
        raise UsageError("--config: file must hold a JSON object")
    sub = parser._subparsers._group_actions[0].choices[args.command]
    known = {a.dest for a in sub._actions}
    unknown = sorted(set(values) - known - {"command"})
    if unknown:
        raise UsageError(f"--config: unknown option(s) {', '.join(unknown)}")
    values.pop("command", None)
    values.pop("config", None)
    sub.set_defaults(**values)
    return parser.parse_args(argv)


def _write_config(args, out_path) -> None:
    resolved = {k: v for k, v in sorted(vars(args).items()) if k != "config"}
    with open(f"{out_path}.config.json", "w") as fh:
        json.dump(resolved, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _require(args, *names):
    for n in names:
        if getattr(args, n) in (None, ""):
            raise UsageError(f"--{n.replace('_', '-')} is required")


def _positive(args, *names):
    for n in names:
        v = getattr(args, n)
        if v is not None and not v > 0:
            raise UsageError(f"--{n.replace('_', '-')} must be positive, got {v}")


def _truth(args, kind: str):
    if kind not in MODELS:
        raise UsageError(f"unknown model {kind!r}; valid models: {', '.join(MODELS)}")
    _positive(args, "mu", "beta", "alpha", "C", "sigma_x", "sigma_y")

    def get(name, default):
        v = getattr(args, name)
        return default if v is None else v

    if kind == "self-exciting":
        return cl.SelfExciting(get("mu", 0.1), get("beta", 0.1))
    if kind == "self-correcting":
        return cl.SelfCorrecting(get("mu", 1.0), get("alpha", 1.0))
    dom = get("domain", [0.0, 10.0, 0.0, 10.0])
    if not (dom[1] > dom[0] and dom[3] > dom[2]):
        raise UsageError(f"--domain must satisfy X0 < X1 and Y0 < Y1, got {dom}")
    return cl.Etas(get("mu", 0.02), get("C", 0.5), get("beta", 1.0), get("sigma_x", 0.5), get("sigma_y", 0.5),
                   tuple(get("a", [0.0, 0.0])), ((dom[0], dom[1]), (dom[2], dom[3])))


def _load_model(path):
    if not Path(path).is_file():
        raise FileNotFoundError(f"model file not found: {path}")
    try:
        return load_model(path)
    except (ValueError, KeyError) as exc:
        raise DataValidationError(f"{path}: not a valid model file: {exc}") from exc


# --------------------------------------------------------------------------- commands


def cmd_simulate(args) -> None:
    _require(args, "out")
    _positive(args, "T", "n_seqs", "lambda_bar", "threads")
    model = _truth(args, args.model)
    ds = cl.simulate_dataset(model, args.n_seqs, args.T, args.seed, args.lambda_bar, args.threads)
    save_dataset(ds, args.out)
    _write_config(args, args.out)


def cmd_train(args) -> None:
    _require(args, "data", "out")
    _positive(args, "epochs", "lr", "batch_size", "L", "threads")
    cfg = TrainConfig(method=args.method, epochs=args.epochs, lr=args.lr, batch_size=args.batch_size, L=args.L,
                      k=args.k, seed=args.seed, clip_norm=args.clip_norm, bandwidth=args.bandwidth,
                      sigma_obs=args.sigma_obs, ema_decay=args.ema_decay or None)
    data = load_dataset(args.data)
    if args.heldout:
        train, held = data, load_dataset(args.heldout, data.mark_dim)
    else:
        train, held = split_dataset(data, args.train_frac, args.seed)
        if args.heldout_out:
            save_dataset(held, args.heldout_out)
    model = CegModel.init(train.mark_dim, args.noise_dim, args.hidden_dim, seed=args.seed,
                          time_head=args.time_head)
    if args.mark_bounds:
        if len(args.mark_bounds) != 2 * train.mark_dim:
            raise UsageError(f"--mark-bounds needs {2 * train.mark_dim} values (lo hi per mark dimension)")
        train = Dataset(train.sequences, train.mark_dim, np.reshape(args.mark_bounds, (-1, 2)))
    log = args.log or f"{args.out}.log.csv"
    if args.method == "kde":
        res = train_nonparametric(model, train, cfg, held, log)
    else:
        res = train_variational(model, CvaeNets.init(model, seed=args.seed), train, cfg, held, log)
    save_model(args.out, res.model, res.nets)
    _write_config(args, args.out)


def cmd_evaluate(args) -> None:
    _require(args, "model", "data", "out")
    _positive(args, "L", "grid_points", "threads")
    model, nets = _load_model(args.model)
    truth = _truth(args, args.truth)
    data = load_dataset(args.data, model.mark_dim if model.mark_dim else None)
    if data.n_events and data.mark_dim != model.mark_dim:
        raise DataValidationError(f"mark dimension mismatch: model {model.mark_dim}, data {data.mark_dim}")
    if truth.mark_dim != model.mark_dim:
        raise DataValidationError(f"mark dimension mismatch: model {model.mark_dim}, truth {truth.mark_dim}")
    cfg = EvalConfig(args.L, args.grid_points, args.seed, args.threads, plot_seqs=args.plot_seqs)
    report = evaluate(model, truth, data, cfg, nets, args.plot or f"{args.out}.plot.csv")
    report.save(args.out)
    _write_config(args, args.out)


def cmd_generate(args) -> None:
    _require(args, "model", "out")
    _positive(args, "T", "n_seqs", "max_events", "threads")
    model, nets = _load_model(args.model)
    cfg = GenerationConfig(args.T, args.max_events, args.seed)
    results = generate_dataset(model, cfg, args.n_seqs, nets, args.threads)
    save_dataset(Dataset([r.sequence for r in results], model.mark_dim), args.out)
    with open(f"{args.out}.truncation.json", "w") as fh:
        json.dump([{"seq_id": i, "truncated": r.truncated, "n_events": len(r.sequence)}
                   for i, r in enumerate(results)], fh, indent=1)
        fh.write("\n")
    _write_config(args, args.out)


def cmd_predict(args) -> None:
    _require(args, "model", "history")
    _positive(args, "L")
    model, nets = _load_model(args.model)
    hist = load_dataset(args.history, model.mark_dim if model.mark_dim else None)
    out = []
    for j, s in enumerate(hist):
        e = predict_next(model, s, args.L, substream(args.seed, j), nets)
        t_last = float(s.times[-1]) if len(s) else 0.0
        out.append({"dt_mean": e.time - t_last, "mark_mean": list(e.mark), "L": args.L})
    doc = out[0] if len(out) == 1 else out
    text = json.dumps(doc, indent=2) + "\n"
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
        _write_config(args, args.out)
    else:
        sys.stdout.write(text)


COMMANDS = {"simulate": cmd_simulate, "train": cmd_train, "evaluate": cmd_evaluate,
            "generate": cmd_generate, "predict": cmd_predict}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = _resolve(parser, argv)
        COMMANDS[args.command](args)
    except SystemExit as exc:  # argparse usage errors
        return int(exc.code or 0)
    except UsageError as exc:
        print(f"ceg: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataValidationError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"ceg: input error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (FloatingPointError, cl.UpperBoundViolation) as exc:
        print(f"ceg: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"ceg: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return 0


if __name__ == "__main__":
    sys.exit(main())
