"""Run a Gripen identification experiment end to end and print the final errors.

    python3 scripts/run_gripen.py scripts/configs/gripen_desk.yaml
    python3 scripts/run_gripen.py scripts/configs/gripen_desk.yaml --realizations 2 --iterations 10

Writes traces, ``summary.csv``, ``timing.csv``, manifests and ``metrics.csv``
to the config's output directory (or ``--out``).
"""
import argparse
import csv
import logging
import time
from pathlib import Path

from pwass import cli


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    p.add_argument("config")
    p.add_argument("--out")
    p.add_argument("--realizations", type=int)
    p.add_argument("--iterations", type=int)
    p.add_argument("--trajectories", type=int)
    p.add_argument("--workers", type=int)
    args = p.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")

    cfg = cli.load_experiment(args.config, num_realizations=args.realizations,
                              num_iterations=args.iterations,
                              num_trajectories=args.trajectories, workers=args.workers)
    t0 = time.perf_counter()
    code = cli.cmd_identify(cfg, args.out)
    out = Path(args.out) if args.out else cfg.resolve(cfg.out_dir or "pwass-out")
    metrics = cli.cmd_report(out / "summary.csv")
    print(f"identify finished in {time.perf_counter() - t0:.1f} s (exit code {code})")
    print(f"{'parameter':>10} {'true':>10} {'estimate':>10} {'rel_error':>10}")
    with open(metrics, newline="") as fh:
        for r in csv.DictReader(fh):
            print(f"{r['parameter']:>10} {float(r['true']):10.4f} {float(r['estimate']):10.4f} "
                  f"{float(r['rel_error']):10.3f}")
    return code


if __name__ == "__main__":
    raise SystemExit(main())
