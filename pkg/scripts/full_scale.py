"""Full-scale CDRL run: K=6, Nc=2, Np=5, M=10, 400000 slots, sum-rate reward.

Reports the final 5000-slot moving-average sum-rate as a fraction of the
exhaustive-search + WMMSE benchmark for each seed.  Expect several hours
per seed on one core; seeds run in parallel with --jobs.

    python scripts/full_scale.py --seed 0 --seed 1 --out runs/full --jobs 2
"""
import argparse
import json
import sys
from pathlib import Path

from fedspectrum.config import parse_config
from fedspectrum.experiment import run_experiment


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seed", type=int, action="append")
    p.add_argument("--out", default="runs/full_scale")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--agent", choices=("dqn", "ac"), default="dqn")
    args = p.parse_args(argv)
    seeds = ", ".join(str(s) for s in (args.seed or [0]))
    config = parse_config(f"regime = cdrl\nagent = {args.agent}\nseeds = {seeds}\n"
                          f"out = {args.out}\n")
    status = run_experiment(config, jobs=args.jobs)
    if status:
        return status
    summary = json.loads((Path(args.out) / "summary.json").read_text())
    for run in summary["runs"]:
        print(f"{run['file']}: {run['sum_rate']:.3f} bits/slot, "
              f"{100 * run['ratio']:.1f}% of benchmark")
    print(f"mean: {100 * summary['mean']['ratio']:.1f}% of benchmark")
    return 0


if __name__ == "__main__":
    sys.exit(main())
