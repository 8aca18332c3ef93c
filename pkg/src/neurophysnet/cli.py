"""Command-line entry point.

Exit codes: 0 success, 1 runtime failure, 2 usage error. Option values
come from flags, then ``--config`` file entries, then built-in defaults.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import checks
from .errors import NeuroPhysError
from .fhn import FhnParams, build_coupling_matrix, integrate_rk4, synthesize_trialset, write_trajectory_csv
from .network import load_checkpoint, save_checkpoint
from .runconfig import parse_bool, read_config, read_manifest, write_manifest
from .sigproc import TrialSet, load_eegb, save_eegb
from .trainer import (PipelineConfig, ProtocolConfig, TrainConfig, build_network, evaluate,
                      holdout_split, run_protocol, stratified_subsample, summarize, train,
                      write_report_csv)

log = logging.getLogger("neurophysnet")

# --------------------------------------------------------------- flag types


def _number(cast, check, what):
    def parse(text):
        try:
            value = cast(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"invalid {what}: {text!r}")
        if not check(value):
            raise argparse.ArgumentTypeError(f"{what} out of range: {text!r}")
        return value
    parse.__name__ = what
    return parse


positive_float = _number(float, lambda v: v > 0 and np.isfinite(v), "positive number")
nonneg_float = _number(float, lambda v: v >= 0 and np.isfinite(v), "non-negative number")
finite_float = _number(float, np.isfinite, "number")
positive_int = _number(int, lambda v: v > 0, "positive integer")
nonneg_int = _number(int, lambda v: v >= 0, "non-negative integer")
fraction = _number(float, lambda v: 0 < v <= 1, "fraction in (0, 1]")
seed_type = _number(int, lambda v: 0 <= v < 2 ** 64, "u64 seed")


def bool_flag(text):
    try:
        return parse_bool(text)
    except ValueError as e:
        raise argparse.ArgumentTypeError(str(e))


def float_list(text):
    try:
        values = tuple(float(v) for v in str(text).split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid number list: {text!r}")
    if not values or any(not 0 < v <= 1 for v in values):
        raise argparse.ArgumentTypeError(f"fractions must lie in (0, 1]: {text!r}")
    return values


def int_list(text):
    try:
        values = tuple(int(v) for v in str(text).split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid integer list: {text!r}")
    if not values:
        raise argparse.ArgumentTypeError("empty list")
    return values


# ------------------------------------------------------------------- parser

def _common(p: argparse.ArgumentParser, out_default: str | None = None) -> None:
    p.add_argument("--config", metavar="PATH", help="key = value file; flags override it")
    p.add_argument("--seed", type=seed_type, default=None,
                   help="random seed (default: $NEUROPHYS_SEED, else 0)")
    p.add_argument("--out", metavar="PATH", default=out_default, required=out_default is None,
                   help="output path")
    p.add_argument("-v", "--verbose", action="store_true")


def _pipeline_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--window", type=positive_int, default=None, help="window length in samples")
    p.add_argument("--stride", type=positive_int, default=None, help="window hop in samples")
    p.add_argument("--residual-dt", type=positive_float, default=1.0,
                   help="physics residual time step (model units per output sample)")


def _train_flags(p: argparse.ArgumentParser, epochs: int = 100) -> None:
    p.add_argument("--lambda", dest="lam", type=nonneg_float, default=0.1, help="physics loss weight")
    p.add_argument("--epochs", type=nonneg_int, default=epochs)
    p.add_argument("--batch", type=positive_int, default=64)
    p.add_argument("--lr", type=nonneg_float, default=1e-3)
    p.add_argument("--fraction", type=fraction, default=1.0, help="share of the training split used")
    p.add_argument("--vw-only", action="store_true", help="freeze the PINN trunk at initialization")
    p.add_argument("--coupling-in-loss", type=bool_flag, default=True, metavar="BOOL")
    p.add_argument("--optimizer", choices=("adam", "sgd"), default="adam")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="neurophysnet",
        description="Physics-informed EEG classification with FitzHugh-Nagumo dynamics.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="integrate a coupled FHN network to a trajectory CSV")
    _common(p)
    p.add_argument("--nodes", type=positive_int, default=1)
    p.add_argument("--t-end", type=positive_float, default=100.0)
    p.add_argument("--dt", type=positive_float, default=1e-2)
    p.add_argument("--coupling", type=nonneg_float, default=0.1, help="coupling strength")
    p.add_argument("--epsilon", type=positive_float, default=0.08)
    p.add_argument("--a", type=finite_float, default=0.7)
    p.add_argument("--b", type=finite_float, default=0.8)
    p.add_argument("--stimulus", type=finite_float, default=0.5)
    p.add_argument("--v0", type=finite_float, default=0.0)
    p.add_argument("--w0", type=finite_float, default=0.0)
    p.set_defaults(handler=cmd_simulate)

    p = sub.add_parser("synth", help="generate a synthetic labeled EEGB data set")
    _common(p)
    p.add_argument("--trials", type=nonneg_int, default=200)
    p.add_argument("--channels", type=positive_int, default=4)
    p.add_argument("--classes", type=_number(int, lambda v: 2 <= v <= 256, "class count"), default=2)
    p.add_argument("--noise", type=nonneg_float, default=1.0)
    p.add_argument("--sample-rate", type=positive_float, default=100.0)
    p.add_argument("--samples", type=positive_int, default=200)
    p.set_defaults(handler=cmd_synth)

    p = sub.add_parser("preprocess", help="window and band-decompose an EEGB file")
    _common(p)
    p.add_argument("--data", required=True, metavar="PATH")
    _pipeline_flags(p)
    p.set_defaults(handler=cmd_preprocess)

    p = sub.add_parser("train", help="train on an EEGB file; writes checkpoint and metrics")
    _common(p)
    p.add_argument("--data", required=True, metavar="PATH")
    p.add_argument("--eval-fraction", type=_number(float, lambda v: 0 <= v < 1, "fraction in [0, 1)"),
                   default=0.2, help="stratified share held out for acc_eval")
    _pipeline_flags(p)
    _train_flags(p)
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on an EEGB file")
    _common(p)
    p.add_argument("--data", required=True, metavar="PATH")
    p.add_argument("--checkpoint", required=True, metavar="PATH")
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("verify", help="run gradient, FHN and filter self-checks")
    p.add_argument("--only", action="append", default=None,
                   help=f"restrict to groups ({', '.join(checks.GROUPS)}); repeat or comma-separate")
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("--config", metavar="PATH")
    p.set_defaults(handler=cmd_verify)

    p = sub.add_parser("run-protocol", help="cross-validation / holdout / data-fraction / ablation runs")
    _common(p)
    p.add_argument("--data", required=True, metavar="PATH")
    p.add_argument("--eval-data", metavar="PATH", help="separate evaluation session for holdout")
    p.add_argument("--protocol", choices=("cv", "holdout"), default="cv")
    p.add_argument("--folds", type=_number(int, lambda v: v >= 2, "fold count"), default=5)
    p.add_argument("--eval-fraction", type=_number(float, lambda v: 0 < v < 1, "fraction in (0, 1)"),
                   default=0.2)
    p.add_argument("--fractions", type=float_list, default=None,
                   help="comma-separated training fractions (default: --fraction)")
    p.add_argument("--seeds", type=int_list, default=None, help="comma-separated seeds (default: --seed)")
    p.add_argument("--jobs", type=positive_int, default=1)
    _pipeline_flags(p)
    _train_flags(p)
    p.set_defaults(handler=cmd_run_protocol)

    p = sub.add_parser("rerun", help="repeat the command recorded in a manifest")
    p.add_argument("manifest", metavar="MANIFEST")
    p.set_defaults(handler=cmd_rerun)
    return parser


def _subparser(parser: argparse.ArgumentParser, name: str) -> argparse.ArgumentParser:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[name]
    raise KeyError(name)


def _apply_config_file(parser, sub: argparse.ArgumentParser, path: str) -> None:
    values = read_config(path)
    # keys may name either the destination (lam) or the flag (lambda, vw-only)
    actions = {a.dest: a for a in sub._actions}
    for action in sub._actions:
        for opt in action.option_strings:
            actions.setdefault(opt.lstrip("-").replace("-", "_"), action)
    defaults = {}
    for key, raw in values.items():
        action = actions.get(key)
        if action is None or key in ("config", "help"):
            sub.error(f"{path}: unknown key {key!r}")
        try:
            if isinstance(action, argparse._StoreTrueAction):
                value = parse_bool(raw)
            elif action.type is not None:
                value = action.type(raw)
            else:
                value = raw
        except (argparse.ArgumentTypeError, ValueError) as e:
            sub.error(f"{path}: bad value for {key}: {e}")
        if action.choices is not None and value not in action.choices:
            sub.error(f"{path}: {key} must be one of {sorted(action.choices)}")
        defaults[action.dest] = value
        action.required = False
    sub.set_defaults(**defaults)


def parse_args(argv: list[str]) -> argparse.Namespace:
    parser = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("command", nargs="?")
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if known.config and known.command:
        try:
            sub = _subparser(parser, known.command)
        except KeyError:
            sub = None
        if sub is not None:
            try:
                _apply_config_file(parser, sub, known.config)
            except OSError as e:
                sub.error(f"cannot read config: {e}")
            except NeuroPhysError as e:
                sub.error(str(e))
    args = parser.parse_args(argv)
    if getattr(args, "seed", None) is None and "seed" in vars(args):
        env = os.environ.get("NEUROPHYS_SEED")
        try:
            args.seed = seed_type(env) if env else 0
        except argparse.ArgumentTypeError as e:
            parser.error(f"NEUROPHYS_SEED: {e}")
    return args


def _resolved(args: argparse.Namespace) -> dict:
    return {k: v for k, v in vars(args).items() if k not in ("handler", "verbose")}


def _pipeline(args) -> PipelineConfig:
    return PipelineConfig(window_len=args.window, stride=args.stride, residual_dt=args.residual_dt)


def _train_config(args, seed=None) -> TrainConfig:
    return TrainConfig(lam=args.lam, lr=args.lr, batch_size=args.batch, epochs=args.epochs,
                       seed=args.seed if seed is None else seed, optimizer=args.optimizer,
                       data_fraction=args.fraction, vw_only=args.vw_only,
                       coupling_in_loss=args.coupling_in_loss)


def _load_input(path) -> tuple[TrialSet, np.ndarray | None, dict | None]:
    """Load raw or preprocessed EEGB; preprocessed files carry a layout in their manifest."""
    data = load_eegb(path)
    side = Path(str(path) + ".manifest.json")
    if side.exists():
        meta = read_manifest(side)
        layout = meta.get("layout")
        if layout:
            W, F, C, om = layout
            x = data.trials.astype(np.float64).reshape(len(data), W, F, C, om)
            return data, x, meta
    return data, None, None


def _features(args, path):
    data, x, meta = _load_input(path)
    if x is None:
        x = _pipeline(args).run(data) if len(data) else None
    return data, x


# ----------------------------------------------------------------- commands

def cmd_simulate(args, argv) -> int:
    start = time.perf_counter()
    params = FhnParams(epsilon=args.epsilon, a=args.a, b=args.b, stimulus=args.stimulus)
    coupling = build_coupling_matrix(args.nodes, args.coupling)
    rng = np.random.default_rng(args.seed)
    v0 = np.full(args.nodes, args.v0)
    w0 = np.full(args.nodes, args.w0)
    if args.nodes > 1:
        v0 = v0 + rng.normal(0.0, 0.1, args.nodes)  # break symmetry between nodes
    traj = integrate_rk4(v0, w0, params, coupling, args.t_end, args.dt)
    rows = write_trajectory_csv(args.out, traj)
    write_manifest(args.out, "simulate", argv, _resolved(args), args.seed, [], [args.out],
                   time.perf_counter() - start, {"rows": rows})
    v = traj.v
    print(f"wrote {rows} rows to {args.out}; v range [{v.min():.4f}, {v.max():.4f}]")
    return 0


def cmd_synth(args, argv) -> int:
    start = time.perf_counter()
    data = synthesize_trialset(args.trials, args.channels, args.classes, args.noise, seed=args.seed,
                               sample_rate_hz=args.sample_rate, n_samples=args.samples)
    save_eegb(data, args.out)
    write_manifest(args.out, "synth", argv, _resolved(args), args.seed, [], [args.out],
                   time.perf_counter() - start)
    print(f"wrote {len(data)} trials ({data.channel_count} x {data.n_samples}) to {args.out}")
    return 0


def cmd_preprocess(args, argv) -> int:
    start = time.perf_counter()
    data = load_eegb(args.data)
    x = _pipeline(args).run(data)
    B, W, F, C, om = x.shape
    flat = TrialSet(x.reshape(B, W * F * C, om).astype(np.float32), data.labels,
                    data.sample_rate_hz, data.n_classes)
    save_eegb(flat, args.out)
    write_manifest(args.out, "preprocess", argv, _resolved(args), args.seed, [args.data], [args.out],
                   time.perf_counter() - start, {"layout": [W, F, C, om]})
    print(f"wrote {B} x {W} windows x {F} bands x {C} channels x {om} samples to {args.out}")
    return 0


def cmd_train(args, argv) -> int:
    start = time.perf_counter()
    data, x = _features(args, args.data)
    if x is None:
        raise NeuroPhysError(f"{args.data}: no trials to train on")
    y = data.labels
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = _train_config(args)
    if args.eval_fraction > 0:
        tr, ev = holdout_split(y, args.eval_fraction, np.random.default_rng([args.seed, 3]))
    else:
        tr, ev = np.arange(len(y)), np.arange(0)
    if cfg.data_fraction < 1.0:
        tr = tr[stratified_subsample(y[tr], cfg.data_fraction, np.random.default_rng([args.seed, 2]))]
    net = build_network(x, data.n_classes, args.seed)
    metrics = train(net, x[tr], y[tr], cfg, args.residual_dt, x[ev] if ev.size else None,
                    y[ev] if ev.size else None)
    ckpt, csv_path = out / "checkpoint.npnw", out / "metrics.csv"
    save_checkpoint(net, ckpt, {"train": asdict(cfg), "residual_dt": args.residual_dt,
                                "window": args.window, "stride": args.stride})
    metrics.write_csv(csv_path)
    write_manifest(out, "train", argv, _resolved(args), args.seed, [args.data], [ckpt, csv_path],
                   time.perf_counter() - start, {"n_train": int(tr.size), "n_eval": int(ev.size)})
    last = metrics.records[-1] if metrics.records else None
    if last:
        print(f"epoch {last.epoch}: loss {last.loss_total:.4g} acc_train {last.acc_train:.3f} "
              f"acc_eval {last.acc_eval:.3f}")
    print(f"wrote {ckpt} and {csv_path}")
    return 0


def cmd_eval(args, argv) -> int:
    start = time.perf_counter()
    net, extra = load_checkpoint(args.checkpoint)
    data, x, _ = _load_input(args.data)
    if x is None:
        pipe = PipelineConfig(window_len=extra.get("window"), stride=extra.get("stride"),
                              residual_dt=extra.get("residual_dt", 1.0))
        x = pipe.run(data) if len(data) else np.zeros((0,))
    acc, confusion = evaluate(net, x, data.labels, data.n_classes)
    report = {"accuracy": acc, "n_trials": len(data), "confusion": confusion.tolist()}
    Path(args.out).write_text(json.dumps(report, indent=2) + "\n")
    write_manifest(args.out, "eval", argv, _resolved(args), args.seed, [args.data, args.checkpoint],
                   [args.out], time.perf_counter() - start)
    print(f"accuracy {acc:.4f} on {len(data)} trials")
    return 0


def cmd_verify(args, argv) -> int:
    only = None
    if args.only:
        only = [g.strip() for item in args.only for g in item.split(",") if g.strip()]
        unknown = set(only) - set(checks.GROUPS)
        if unknown:
            print(f"unknown check group(s): {', '.join(sorted(unknown))}", file=sys.stderr)
            return 2
    results = checks.run_checks(only)
    print(f"{'':6}{'group':<9} {'check':<34} {'measured':<12} threshold")
    for r in results:
        print(r.describe())
    failed = sum(not r.passed for r in results)
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return 0 if failed == 0 else 1


def cmd_run_protocol(args, argv) -> int:
    start = time.perf_counter()
    data = load_eegb(args.data)
    eval_data = load_eegb(args.eval_data) if args.eval_data else None
    proto = ProtocolConfig(protocol=args.protocol, folds=args.folds, eval_fraction=args.eval_fraction,
                           fractions=args.fractions or (args.fraction,),
                           seeds=args.seeds or (args.seed,), jobs=args.jobs)
    rows = run_protocol(data, _pipeline(args), _train_config(args), proto, eval_data)
    write_report_csv(rows, args.out)
    inputs = [args.data] + ([args.eval_data] if args.eval_data else [])
    write_manifest(args.out, "run-protocol", argv, _resolved(args), args.seed, inputs, [args.out],
                   time.perf_counter() - start)
    for (name, frac), acc in summarize(rows).items():
        print(f"{name} fraction {frac:g}: mean accuracy {acc:.4f}")
    return 0


def cmd_rerun(args, argv) -> int:
    record = read_manifest(args.manifest)
    return main(list(record["argv"]))


# --------------------------------------------------------------------- main

def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.handler(args, argv)
    except (NeuroPhysError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
