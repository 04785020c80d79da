"""Single experts versus their combination on the planted-correspondence set (3 seeds, test split)."""

import argparse

from _tables import print_table
from xar.experiments import recipe, run_expert_ablation


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--seeds", type=int, default=3)
    args = p.parse_args()
    tc = recipe(max_epochs=args.epochs, seeds=args.seeds)
    for arch in ("moee", "ce"):
        results = run_expert_ablation(train_config=tc, arch=arch)
        print_table(list(results.items()), f"{arch.upper()} expert ablation (chance R@1 = 0.8)")


if __name__ == "__main__":
    main()
