"""Command-line interface: ``synth``, ``run``, ``report`` and ``gradcheck``.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure,
3 gradient-check failure.
"""
from __future__ import annotations

import argparse
import sys

from ..errors import ConfigError
from .bench import write_benchmark
from .config import default_config, load_config
from .gradcheck import INSTANCES, cmd_gradcheck
from .report import cmd_report
from .runner import cmd_run

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_GRADCHECK = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on usage errors; this CLI reserves 2 for runtime failures
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="adaptlab", description="Adaptation-protocol experiments on embedding benchmarks.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("synth", help="generate the synthetic benchmark")
    p.add_argument("--config", help="JSON config (dataset.synth block); default spec when omitted")
    p.add_argument("--out", required=True, help="output benchmark directory")

    p = sub.add_parser("run", help="run every (protocol, seed) cell")
    p.add_argument("--config", required=True)
    p.add_argument("--bench", help="benchmark directory written by synth")
    p.add_argument("--out", help="results CSV (default: output.dir/output.csv from the config)")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--max-cells", type=int, default=None, help=argparse.SUPPRESS)

    p = sub.add_parser("report", help="render Markdown tables from a results CSV")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("gradcheck", help="finite-difference gradient battery")
    p.add_argument("--instances", type=int, default=INSTANCES)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--perturb", type=float, default=0.0, help=argparse.SUPPRESS)
    return parser


def _dispatch(args) -> int:
    if args.command == "synth":
        cfg = load_config(args.config) if args.config else default_config()
        spec = cfg.synth_spec
        if spec is None:
            raise ConfigError("synth needs a config whose dataset holds a 'synth' block")
        out = write_benchmark(spec, args.out)
        print(f"wrote benchmark to {out}")
        return EXIT_OK
    if args.command == "run":
        cfg = load_config(args.config)
        out = args.out or cfg.output_path("csv")
        rows = cmd_run(cfg, out, bench_dir=args.bench, workers=args.workers, max_cells=args.max_cells,
                       log=lambda msg: print(msg, file=sys.stderr))
        print(f"{len(rows)} rows in {out}")
        return EXIT_OK
    if args.command == "report":
        cmd_report(args.inp, args.out)
        print(f"wrote {args.out}")
        return EXIT_OK
    ok = cmd_gradcheck(args.instances, args.seed, args.perturb)
    return EXIT_OK if ok else EXIT_GRADCHECK


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    try:
        return _dispatch(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - every other failure maps to the runtime exit code
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
