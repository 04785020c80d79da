"""Train on a large source set, fine-tune on a small target set that shares the generator."""

import argparse

from _tables import print_table
from xar.experiments import recipe, run_pretrain_finetune


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--seeds", type=int, default=3)
    args = p.parse_args()
    rows = []
    for arch in ("moee", "ce"):
        for init, res in run_pretrain_finetune(arch, recipe(seeds=args.seeds)).items():
            rows.append((f"{arch.upper()} / {init}", res))
    print_table(rows, "Target test split (64 training pairs)")


if __name__ == "__main__":
    main()
