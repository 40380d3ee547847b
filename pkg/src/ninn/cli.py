"""``ninn`` command line: train, baseline, render, verify.

List-valued flags (``--n``, ``--depth``, ``--steps``, ``--seed``, ``--t-final``)
take comma-separated values. ``--config`` reads an INI file whose
``[experiment]`` section uses the same keys as the long flags (dashes or
underscores); anything given on the command line overrides the file.
"""

from __future__ import annotations

import argparse
import configparser
import logging
import sys
from pathlib import Path

from . import experiment as ex
from .io import render_heatmap
from .problems import PROBLEM_NAMES, ConfigurationError

# flag name -> (ExperimentConfig field, parser)
_LIST_INT = lambda s: tuple(int(v) for v in str(s).split(",") if v.strip())
_LIST_FLOAT = lambda s: tuple(float(v) for v in str(s).split(",") if v.strip())
_OPT_FLOAT = lambda s: None if str(s).lower() in ("", "none") else float(s)

_KEYS = {
    "problem": ("problem", str),
    "n": ("grid_sizes", _LIST_INT),
    "depth": ("depths", _LIST_INT),
    "steps": ("steps", _LIST_INT),
    "seed": ("seeds", _LIST_INT),
    "lr": ("lr", _OPT_FLOAT),
    "alpha": ("alpha", _OPT_FLOAT),
    "tau": ("tau", float),
    "t_final": ("report_times", _LIST_FLOAT),
    "first_step_iters": ("first_step_iters", int),
    "precision": ("precision", str),
    "activation": ("activation", str),
    "lattice": ("lattice", str),
    "input_scaling": ("input_scaling", str),
    "workers": ("workers", int),
    "out": ("out", str),
}


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI file with an [experiment] section")
    p.add_argument("--problem", choices=PROBLEM_NAMES)
    p.add_argument("--n", help="grid sizes, e.g. 32,64")
    p.add_argument("--depth", help="network depths")
    p.add_argument("--steps", help="optimizer step budgets")
    p.add_argument("--seed", help="seeds")
    p.add_argument("--lr")
    p.add_argument("--alpha", help="interior weight (default h^2/4)")
    p.add_argument("--tau", help="time step")
    p.add_argument("--t-final", dest="t_final", help="report times, multiples of tau")
    p.add_argument("--first-step-iters", dest="first_step_iters")
    p.add_argument("--precision", choices=("single", "double"))
    p.add_argument("--activation")
    p.add_argument("--lattice", choices=("nodes", "intervals"),
                   help="nodes: n grid points; intervals: n cells (n+1 points)")
    p.add_argument("--input-scaling", dest="input_scaling", choices=("raw", "maxabs"))
    p.add_argument("--workers")
    p.add_argument("--out", help="output directory")
    p.add_argument("--full", action="store_true", help="large sweep defaults (n up to 128, 8000 steps)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ninn", description="Finite-difference-trained U-Net PDE solver")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    _add_common(sub.add_parser("train", help="train networks over the configured matrix"))
    _add_common(sub.add_parser("baseline", help="finite-difference reference errors"))
    r = sub.add_parser("render", help="render an NNG1 grid dump as a PNG heatmap")
    r.add_argument("dump")
    r.add_argument("image")
    v = sub.add_parser("verify", help="source consistency and stencil/matrix agreement")
    v.add_argument("--trials", type=int, default=100)
    return parser


def config_from_args(args: argparse.Namespace) -> ex.ExperimentConfig:
    values = {}
    if args.full:
        values.update(grid_sizes=ex.FULL_SIZES, steps=ex.FULL_STEPS)
    if args.config:
        ini = configparser.ConfigParser()
        if not ini.read(args.config):
            raise ConfigurationError(f"cannot read config file {args.config}")
        if "experiment" not in ini:
            raise ConfigurationError(f"{args.config}: missing [experiment] section")
        for key, raw in ini["experiment"].items():
            key = key.replace("-", "_")
            if key == "full":
                if ini["experiment"].getboolean("full"):
                    values.update(grid_sizes=ex.FULL_SIZES, steps=ex.FULL_STEPS)
                continue
            if key not in _KEYS:
                raise ConfigurationError(f"{args.config}: unknown key {key!r}")
            name, conv = _KEYS[key]
            values[name] = conv(raw)
    for key, (name, conv) in _KEYS.items():
        raw = getattr(args, key, None)
        if raw is not None:
            values[name] = conv(raw)
    try:
        return ex.ExperimentConfig(**values)
    except ValueError as exc:
        raise ConfigurationError(str(exc)) from exc


def _print_report(report: ex.ErrorReport) -> None:
    print("problem n depth steps seed t norm_2h norm_inf")
    for r in report.rows:
        t = "-" if r["t"] is None else f"{r['t']:g}"
        print(f"{r['problem']} {r['n']} {r['depth'] if r['depth'] is not None else '-'} "
              f"{r['steps'] if r['steps'] is not None else '-'} {r['seed'] if r['seed'] is not None else '-'} "
              f"{t} {r['norm_2h']:.4e} {r['norm_inf']:.4e}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.command == "render":
            sidecar = render_heatmap(args.dump, args.image)
            print(f"wrote {args.image} ({sidecar})")
            return 0
        if args.command == "verify":
            ok = True
            for name, value, limit, passed in ex.verify(trials=args.trials):
                ok &= passed
                print(f"{'PASS' if passed else 'FAIL'} {name}: {value:.3e} (limit {limit:.1e})")
            return 0 if ok else 1
        config = config_from_args(args)
        report = ex.run(config) if args.command == "train" else ex.baseline(config)
        _print_report(report)
        print(f"report: {Path(config.out) / 'report.csv'}")
        return 0
    except (ConfigurationError, ValueError, ex.RunError) as exc:
        print(f"ninn: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
