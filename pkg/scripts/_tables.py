"""Shared table printing for the experiment scripts."""

from xar.objectives import format_mean_std


def cell(report, key):
    return format_mean_std(report.mean[key], report.std[key] if report.std else None)


def print_table(rows, title):
    """rows: list of (label, ExperimentResult)."""
    cols = [("t2a", "R@1"), ("t2a", "R@5"), ("t2a", "R@10"), ("a2t", "R@1"), ("a2t", "R@5"), ("a2t", "R@10")]
    width = max(len(label) for label, _ in rows) + 2
    print(title)
    head = f"{'':<{width}}" + "".join(f"{d + ' ' + k:>12}" for d, k in cols) + f"{'t2a geom':>12}"
    print(head)
    print("-" * len(head))
    for label, result in rows:
        r = result.reports
        print(f"{label:<{width}}" + "".join(f"{cell(r[d], k):>12}" for d, k in cols) + f"{cell(r['t2a'], 'geom_mean'):>12}")
    print()
