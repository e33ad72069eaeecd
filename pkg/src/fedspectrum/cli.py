"""``fedspectrum`` command line: train, test, benchmark, account, summarize."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import experiment as ex
from .config import OUT_ENV, ExperimentConfig, build_config, flatten, parse_config
from .errors import ConfigError, InvalidParameterError

log = logging.getLogger("fedspectrum")


def _override(text: str):
    key, sep, value = text.partition("=")
    if not sep:
        raise argparse.ArgumentTypeError(f"expected KEY=VALUE, got {text!r}")
    return key.strip(), value.strip()


def _load(args) -> ExperimentConfig:
    """Config file (or the run's saved config), then ``--set``, ``--seed`` and ``--out``."""
    if args.config:
        text = Path(args.config).read_text(encoding="utf-8")
    elif getattr(args, "saved", False) and args.out and (Path(args.out) / "config.txt").exists():
        text = (Path(args.out) / "config.txt").read_text(encoding="utf-8")
    else:
        text = ""
    cfg = parse_config(_merge([text] + [f"{k} = {v}" for k, v in args.set or []]))
    changes = {}
    if args.seed:
        changes["seeds"] = tuple(args.seed)
    if args.out:
        changes["out"] = args.out
    return build_config({**flatten(cfg), **changes}) if changes else cfg


def _merge(chunks) -> str:
    # later assignments win, so --set can override keys of the file
    seen, lines = {}, []
    for chunk in chunks:
        for line in chunk.splitlines():
            key = line.split("#", 1)[0].partition("=")[0].strip()
            if key and "=" in line.split("#", 1)[0]:
                if key in seen:
                    lines[seen[key]] = ""
                seen[key] = len(lines)
            lines.append(line)
    return "\n".join(lines)


def _print_json(obj):
    json.dump(obj, sys.stdout, indent=2, sort_keys=True)
    sys.stdout.write("\n")


def cmd_train(args) -> int:
    return ex.run_experiment(_load(args), jobs=args.jobs)


def cmd_test(args) -> int:
    return ex.run_evaluation(_load(args), jobs=args.jobs)


def cmd_benchmark(args) -> int:
    _print_json(ex.benchmark_report(_load(args)))
    return 0


def cmd_account(args) -> int:
    _print_json(ex.account_report(_load(args), bits=args.bits, mode=args.mode))
    return 0


def cmd_summarize(args) -> int:
    files = list(args.files)
    if args.out and not files:
        files = sorted(Path(args.out).glob("metrics_seed*.csv"))
    if not files:
        raise InvalidParameterError("no metrics files given")
    summary = ex.summarize(files, args.window)
    sys.stdout.write(summary.to_json())
    if args.curves:
        Path(args.curves).write_text(summary.curves_csv(), encoding="ascii")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedspectrum", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    verbosity = argparse.ArgumentParser(add_help=False)
    verbosity.add_argument("-v", "--verbose", action="count", default=0)
    _add = sub.add_parser
    sub.add_parser = lambda *a, **k: _add(*a, parents=[verbosity], **k)

    def common(p, saved=False):
        p.add_argument("--config", metavar="PATH", help="key = value configuration file")
        p.add_argument("--seed", type=int, action="append", metavar="N",
                       help="run seed (repeatable); overrides 'seeds'")
        p.add_argument("--out", metavar="DIR",
                       help=f"output directory (default: ${OUT_ENV} or ./runs)")
        p.add_argument("--set", type=_override, action="append", metavar="KEY=VALUE",
                       help="override one configuration key (repeatable)")
        p.set_defaults(saved=saved)

    p = sub.add_parser("train", help="train every seed and write metrics and checkpoints")
    common(p)
    p.add_argument("--jobs", type=int, default=1, help="seeds run in parallel")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("test", help="evaluate saved checkpoints with frozen policies")
    common(p, saved=True)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_test)

    p = sub.add_parser("benchmark", help="exhaustive search + WMMSE on each seed's network")
    common(p)
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("account", help="information-exchange report, centralized vs federated")
    common(p)
    p.add_argument("--bits", type=int, default=11, help="bits per uploaded parameter")
    p.add_argument("--mode", choices=("table", "history"), default="table")
    p.set_defaults(func=cmd_account)

    p = sub.add_parser("summarize", help="moving averages and final-window statistics")
    p.add_argument("files", nargs="*", help="metrics files (default: DIR/metrics_seed*.csv)")
    p.add_argument("--out", metavar="DIR", help="run directory to summarize")
    p.add_argument("--window", type=int, default=5000, metavar="N")
    p.add_argument("--curves", metavar="PATH", help="also write plot-ready moving averages")
    p.set_defaults(func=cmd_summarize)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, InvalidParameterError, OSError) as exc:
        print(f"fedspectrum: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
