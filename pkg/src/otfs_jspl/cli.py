"""Command-line entry point ``estimate``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .harness import ExperimentSpec, export_support_map, run_ber, run_experiment


def _load_spec(args) -> ExperimentSpec:
    spec = ExperimentSpec.load(args.spec)
    if args.trials is not None:
        spec = replace(spec, n_trials=args.trials)
    return spec


def _summary(agg: dict, key: str) -> None:
    for c in agg["cells"]:
        print(
            f"{c['estimator']:>10s}  snr={c['snr_db']:6.1f}  speed={c['speed']:7.2f}  "
            f"overhead={c['overhead']:.3f}  {key}={c[key]:.4g}"
        )


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="estimate", description="DDA channel estimation experiments")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, help_ in (("run", "NMSE and support sweep"), ("ber", "BER with MMSE detection")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("spec", type=Path, help="experiment spec (JSON)")
        p.add_argument("--out", type=Path, required=True, help="output directory")
        p.add_argument("--trials", type=int, default=None, help="override n_trials")
        p.add_argument("--threads", type=int, default=1, help="trial-level worker threads")

    p = sub.add_parser("supportmap", help="true vs learned Doppler-angle maps for one trial")
    p.add_argument("trial", type=Path, help="trial description (JSON)")
    p.add_argument("--out", type=Path, default=None, help="write JSON here instead of stdout")

    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    try:
        if args.command == "run":
            res = run_experiment(_load_spec(args), args.out, threads=args.threads)
            _summary(res.aggregate, "median_nmse_db")
        elif args.command == "ber":
            res = run_ber(_load_spec(args), args.out, threads=args.threads)
            _summary(res.aggregate, "mean_ber")
        else:
            text = json.dumps(export_support_map(json.loads(args.trial.read_text())), indent=1)
            if args.out is None:
                print(text)
            else:
                args.out.write_text(text)
    except (ValueError, OSError, MemoryError, KeyError, json.JSONDecodeError) as exc:
        print(f"estimate: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
