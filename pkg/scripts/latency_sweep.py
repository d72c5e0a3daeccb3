"""Measure forward latency for a handful of fast-regime specs at a small input.

The numpy forward pass is far slower than an accelerator, so only the
ranking between specs carries over, not the absolute milliseconds.
"""
import argparse

from swidernet.arch import ArchSpec, build_plan, instantiate
from swidernet.cost import cost_report
from swidernet.search import measure_latency

SPECS = [(0.25, 0.25, 0.35), (0.25, 0.35, 0.75), (0.25, 0.5, 1), (0.5, 0.75, 1), (1, 1, 1)]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--size", type=int, default=65)
    ap.add_argument("--iters", type=int, default=3)
    ap.add_argument("--num-classes", type=int, default=19)
    args = ap.parse_args()

    print(f"{'spec':<30}{'madds M':>12}{'median ms':>12}")
    for w1, w2, l in SPECS:
        plan = build_plan(ArchSpec(w1, w2, l, sep_conv_head=True, num_classes=args.num_classes))
        madds = cost_report(plan, args.size, args.size).total_madds
        ms = measure_latency(instantiate(plan, 0), args.size, args.size, warmup=1, iters=args.iters)
        print(f"{plan.spec.name:<30}{madds / 1e6:>12.1f}{ms:>12.1f}")


if __name__ == "__main__":
    main()
