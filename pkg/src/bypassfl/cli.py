"""Command-line entry point: ``run``, ``report``, ``grad-check``, ``param-count``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time

from .config import load_config
from .errors import BypassFLError
from .gradcheck import run_suite
from .runner import Experiment, read_metrics_csv, run_experiment, summarize


def _cmd_run(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    return run_experiment(cfg, args.out, resume=args.resume, checkpoint_every=args.checkpoint_every,
                          stop_after=args.stop_after)


def _cmd_report(args) -> int:
    rows = read_metrics_csv(args.csv)
    if not rows:
        print(f"{args.csv}: no rows", file=sys.stderr)
        return 1
    print(json.dumps(summarize(rows), indent=2))
    return 0


def _cmd_grad_check(args) -> int:
    start = time.perf_counter()
    results = run_suite(args.seeds, args.tolerance)
    by_name: dict[str, list] = {}
    for res in results:
        by_name.setdefault(res.name, []).append(res)
    ok = True
    for name, group in by_name.items():
        worst = max(r.worst for r in group)
        passed = all(r.passed for r in group)
        ok &= passed
        print(f"{'PASS' if passed else 'FAIL'}  {name:<20} seeds={len(group)}  max_rel_err={worst:.3e}")
        for r in group:
            if not r.passed:
                print(f"      seed {r.seed}: failing parameters {r.report.failures()}")
    print(f"{'PASS' if ok else 'FAIL'}  all checks, tolerance {args.tolerance:g}, "
          f"{time.perf_counter() - start:.1f}s")
    return 0 if ok else 1


def _cmd_param_count(args) -> int:
    cfg = load_config(args.config)
    rows = Experiment(cfg).param_counts()
    width = max(len(r["model"]) for r in rows)
    for r in rows:
        value = r["params"]
        print(f"{r['model']:<{width}}  {value:.4f}" if isinstance(value, float) else f"{r['model']:<{width}}  {value}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bypassfl", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run an experiment")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory (default: output_dir from the config)")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--checkpoint-every", type=int, default=0, metavar="N",
                   help="also write a checkpoint every N rounds")
    p.add_argument("--stop-after", type=int, metavar="R", help="stop once R rounds are complete")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("report", help="re-derive the summary table from a metrics CSV")
    p.add_argument("--csv", required=True)
    p.set_defaults(func=_cmd_report)

    p = sub.add_parser("grad-check", help="finite-difference gradient suite")
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(func=_cmd_grad_check)

    p = sub.add_parser("param-count", help="parameter counts of local models and the bypass")
    p.add_argument("--config", required=True)
    p.set_defaults(func=_cmd_param_count)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (OSError, BypassFLError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
