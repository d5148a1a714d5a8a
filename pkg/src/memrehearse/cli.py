"""Command-line front-end: ``memrehearse {run,memscore,sweep,correlate,compare,probe}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .config import POLICY_ALIASES, config_schema, parse_config
from .errors import MemRehearseError
from .experiments import compare_policies, comparison_configs, run_experiment

# subcommand -> experiment kind (sweep picks its kind from --by)
SUBCOMMANDS = {
    "run": "incremental",
    "memscore": "memscore",
    "sweep": None,
    "correlate": "proxy_correlate",
    "compare": "incremental",
    "probe": "probe",
}
CLI_POLICIES = ("reservoir", "balanced", "bottomk", "midk", "topk", "mixed")


def _buffer_size(raw: str):
    if raw == "inf":
        return "inf"
    try:
        return int(raw)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer or 'inf', got {raw!r}") from None


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--seed", type=int, action="append", dest="seeds", help="run seed (repeatable)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--buffer", type=_buffer_size, help="buffer capacity, or 'inf'")
    p.add_argument("--policy", choices=CLI_POLICIES)
    p.add_argument("--tasks", type=int)
    p.add_argument("--u", type=int, help="number of subsets for the leave-k-out estimator")
    p.add_argument("--k-fraction", type=float, dest="k_fraction")
    p.add_argument(
        "--set", action="append", default=[], metavar="KEY=VALUE",
        help="override any config leaf by dotted path, e.g. trainer.epochs_per_task=20",
    )
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="memrehearse", description="Memorization-aware rehearsal experiments.")
    parser.add_argument("--schema", action="store_true", help="print the config JSON schema and exit")
    sub = parser.add_subparsers(dest="command")
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        _add_common(p)
        if name == "sweep":
            p.add_argument("--by", choices=("classes", "fractions"), default="classes")
    return parser


def overrides_from_args(args: argparse.Namespace) -> dict:
    """Flag values as dotted-path overrides (flags win over the config file)."""
    out = {}
    kind = SUBCOMMANDS[args.command] or f"sweep_{args.by}"
    out["kind"] = kind
    if args.seeds:
        out["seeds"] = args.seeds
    if args.out:
        out["output_dir"] = args.out
    if args.buffer is not None:
        out["buffer.capacity"] = args.buffer
    if args.policy:
        out["buffer.policy"] = POLICY_ALIASES[args.policy]
    if args.tasks is not None:
        out["stream.tasks"] = args.tasks
    if args.u is not None:
        out["estimator.u"] = args.u
    if args.k_fraction is not None:
        out["estimator.k_fraction"] = args.k_fraction
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise MemRehearseError(f"--set expects KEY=VALUE, got {item!r}")
        out[key.strip()] = value
    return out


def _pm(mean, std) -> str:
    return "n/a" if mean is None else f"{mean:.4f} ± {std:.4f}"


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.schema:
        print(json.dumps(config_schema(), indent=2))
        return 0
    if not args.command:
        parser.print_help()
        return 2
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = parse_config(args.config, overrides_from_args(args))
        if args.command == "compare":
            rows = compare_policies(comparison_configs(cfg), cfg.output_dir)
            for r in rows:
                print(f"{r['policy']:>10} {r['buffer']:>6}  Acc {_pm(r['acc_mean'], r['acc_std'])}"
                      f"  FM {_pm(r['fm_mean'], r['fm_std'])}")
            return 0
        code = run_experiment(cfg)
    except MemRehearseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if code:
        print(f"experiment failed; see {cfg.output_dir}/manifest.json", file=sys.stderr)
    else:
        print(f"results written to {cfg.output_dir}")
    return code


if __name__ == "__main__":
    sys.exit(main())
