"""Command line entry point.

Subcommands: `run` (one experiment), `ablation` (the discriminator on/off
grid), `gradcheck` (gradient fidelity suite). Exit codes: 0 success,
1 configuration error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import math
import sys
import time

from .config import ExperimentConfig, apply_overrides, load_config
from .errors import ConfigurationError, FormatError, NumericError


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad flags; bad invocations are config errors
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _add_run_flags(p):
    p.add_argument("--config", metavar="PATH", help="key=value config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--rounds", type=int)
    p.add_argument("--clients", type=int)
    p.add_argument("--samples-per-client", type=int, dest="samples_per_client")
    p.add_argument("--no-discriminator", action="store_true")
    p.add_argument("--no-consistency", action="store_true")
    p.add_argument("--shift-degrees", type=float, dest="shift_degrees")
    p.add_argument("--out", metavar="DIR", dest="out_dir")


def build_parser():
    parser = _Parser(prog="aftl", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (("run", "run one federated experiment"),
                            ("ablation", "run the discriminator ablation grid")):
        p = sub.add_parser(name, help=help_text)
        _add_run_flags(p)
    g = sub.add_parser("gradcheck", help="finite-difference gradient fidelity suite")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--probes", type=int, default=200)
    return parser


def _build_config(args):
    config = load_config(args.config) if args.config else ExperimentConfig()
    overrides = {
        "seed": args.seed, "rounds": args.rounds, "clients": args.clients,
        "samples_per_client": args.samples_per_client,
        "shift_degrees": args.shift_degrees, "out_dir": args.out_dir,
    }
    if args.no_discriminator:
        overrides["discriminator"] = False
    if args.no_consistency:
        overrides["consistency"] = False
    return apply_overrides(config, overrides).validate()


def _cmd_run(args):
    from .experiment import run_experiment

    result = run_experiment(_build_config(args))
    final = result.summary["final_accuracy"]
    shown = f"{final:.4f}" if final is not None else "n/a"
    print(f"completed {result.summary['rounds_completed']} rounds; "
          f"target accuracy {shown}; metrics at {result.metrics_path}")
    return 0


def _cmd_ablation(args):
    from .experiment import run_ablation

    cells, summary = run_ablation(_build_config(args))
    failures = [c for c in cells if c.error]
    for task, median in summary["task_medians"].items():
        print(f"{task}: median accuracy "
              f"{'n/a' if math.isnan(median) else f'{median:.4f}'}")
    print(f"spread without discriminator: {summary['spread_without_discriminator']:.4f}")
    print(f"spread with discriminator:    {summary['spread_with_discriminator']:.4f}")
    for cell in failures:
        print(f"FAILED {cell.task} seed {cell.seed}: {cell.error}", file=sys.stderr)
    return 0 if not failures else 3


def _cmd_gradcheck(args):
    from .gradcheck import run_suite

    started = time.perf_counter()
    results = run_suite(seed=args.seed, probes=args.probes)
    worst = 0.0
    for name, err in results:
        status = "ok" if err <= 1e-6 else "FAIL"
        print(f"{status:4s} {name:35s} max relative error {err:.3e}")
        worst = max(worst, err)
    print(f"worst {worst:.3e} over {args.probes} probes "
          f"in {time.perf_counter() - started:.1f}s")
    if worst > 1e-6:
        print("gradient check FAILED", file=sys.stderr)
        return 3
    return 0


def main(argv=None):
    args = build_parser().parse_args(argv)
    handler = {"run": _cmd_run, "ablation": _cmd_ablation,
               "gradcheck": _cmd_gradcheck}[args.command]
    try:
        return handler(args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 1
    except (FormatError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    raise SystemExit(main())
