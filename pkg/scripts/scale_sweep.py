"""Test retrieval as a function of the fraction of training data used."""

import argparse

from _tables import print_table
from xar.experiments import recipe, run_scale_sweep


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--fractions", type=float, nargs="+", default=[0.1, 0.25, 0.5, 0.75, 1.0])
    p.add_argument("--seeds", type=int, default=3)
    args = p.parse_args()
    sweep = run_scale_sweep(args.fractions, train_config=recipe(seeds=args.seeds))
    rows = [(f"{f:g} (n={res.reports['t2a'].extra['train_size']})", res) for f, res in sweep.items()]
    print_table(rows, "CE, training-set fraction sweep")


if __name__ == "__main__":
    main()
