"""Cost the 45-candidate fast grid and extract frontiers from the runtime tables."""
import argparse
from pathlib import Path

from swidernet.search import (
    Oracles,
    cost_oracle,
    enumerate_space,
    evaluate_candidates,
    packaged_candidates,
    pareto_front,
    write_candidates_csv,
)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--input", type=int, default=641, help="square input side for the cost model")
    ap.add_argument("--out", type=Path, default=Path("fast_grid.csv"))
    args = ap.parse_args()

    cands = evaluate_candidates(enumerate_space("fast"), Oracles(cost=cost_oracle(args.input, args.input)))
    args.out.write_text(write_candidates_csv(cands))
    print(f"wrote {len(cands)} candidates to {args.out}")
    cheapest = min(cands, key=lambda c: c.metrics["madds"])
    priciest = max(cands, key=lambda c: c.metrics["madds"])
    print(f"madds span {cheapest.metrics['madds'] / 1e9:.1f}B ({cheapest.name}) "
          f"to {priciest.metrics['madds'] / 1e9:.1f}B ({priciest.name})")

    for table in ("runtime_coco.csv", "runtime_cityscapes.csv"):
        rows = packaged_candidates(table)
        front = pareto_front(rows, "latency_ms", "quality")
        print(f"\n{table}: {len(rows)} rows, frontier of {len(front)}")
        for c in front:
            print(f"  {c.name:<30}{c.metrics['latency_ms']:>8.2f} ms{c.metrics['quality']:>7.1f}")


if __name__ == "__main__":
    main()
