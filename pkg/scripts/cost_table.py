"""Recompute every packaged reference row and print the relative deviations."""
import argparse

from swidernet.arch import ArchSpec
from swidernet.cost import compare_to_reference, packaged_reference, reference_report


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--depth-rounding", choices=("half_up", "half_even"), default="half_up")
    args = ap.parse_args()
    base = ArchSpec(1, 1, 1, use_se=False, use_sac=False, depth_rounding=args.depth_rounding)

    print(f"{'table':<20}{'spec':<30}{'input':>10}  {'flags':<12}{'params M':>9}{'ref':>9}{'|dev|':>7}"
          f"{'madds B':>10}{'ref':>10}{'|dev|':>7}")
    worst = 0.0
    for row in packaged_reference():
        report = reference_report(row, base)
        devs = {d.metric: d for d in compare_to_reference(report, [row])}
        cells = []
        for metric, ours in (("params_m", report.total_params / 1e6), ("madds_b", report.total_madds / 1e9)):
            d = devs.get(metric)
            if d is None:
                cells.append(f"{ours:>9.2f}{'-':>9}{'-':>7}" if metric == "params_m" else
                             f"{ours:>10.2f}{'-':>10}{'-':>7}")
                continue
            worst = max(worst, d.deviation)
            w = 9 if metric == "params_m" else 10
            cells.append(f"{d.ours:>{w}.2f}{d.reference:>{w}.2f}{d.deviation:>7.1%}")
        size = f"{row.input_h}x{row.input_w}"
        print(f"{row.source_table:<20}{report.spec.name:<30}{size:>10}  {row.flags or 'base':<12}" + "".join(cells))
    print(f"largest |deviation|: {worst:.2%}")


if __name__ == "__main__":
    main()
