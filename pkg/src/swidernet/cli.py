"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data error.  Every run ends with a
one-line JSON summary on stdout.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import augment as aug
from . import panoptic as pan
from .arch import ArchSpec, build_plan, count_layers, instantiate, parse_plan, serialize_plan
from .checks import format_table, run_all
from .cost import compare_to_reference, cost_report, read_reference_csv
from .search import (
    Oracles,
    cost_oracle,
    enumerate_space,
    evaluate_candidates,
    latency_oracle,
    measure_latency,
    pareto_front,
    quality_oracle,
    read_candidates_csv,
    write_candidates_csv,
)


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def parse_size(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}") from None
    if h < 1 or w < 1:
        raise argparse.ArgumentTypeError(f"sizes must be positive, got {text!r}")
    return h, w


def _read(path: str, flag: str, binary: bool = False):
    p = Path(path)
    try:
        return p.read_bytes() if binary else p.read_text()
    except OSError as exc:
        raise DataError(f"{flag} {path}: {exc.strerror or exc}") from None


def _emit(text: str, out: str | None):
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _load_plan(path: str):
    try:
        return parse_plan(_read(path, "--plan"))
    except ValueError as exc:
        raise DataError(f"--plan {path}: {exc}") from None


# --------------------------------------------------------------------------
# verbs


def cmd_build(a) -> dict:
    try:
        spec = ArchSpec(a.w1, a.w2, a.l, use_se=not a.no_se, use_sac=not a.no_sac, use_multigrid=a.multigrid,
                        sep_conv_head=a.sep_conv, output_stride=a.output_stride, num_classes=a.num_classes,
                        depth_rounding=a.depth_rounding)
    except ValueError as exc:
        raise UsageError(f"build: {exc}") from None
    plan = build_plan(spec)
    _emit(serialize_plan(plan), a.output)
    return {"name": spec.name, "layers": count_layers(plan)}


def cmd_cost(a) -> dict:
    plan = _load_plan(a.plan)
    h, w = a.input
    report = cost_report(plan, h, w)
    _emit(report.to_csv(), a.output)
    summary = {"name": plan.spec.name, "layers": count_layers(plan), "params": report.total_params,
               "madds": report.total_madds}
    if a.ref:
        try:
            rows = read_reference_csv(_read(a.ref, "--ref"))
            devs = compare_to_reference(report, rows)
        except KeyError as exc:
            raise DataError(f"--ref {a.ref}: {exc.args[0]}") from None
        except ValueError as exc:
            raise DataError(f"--ref {a.ref}: {exc}") from None
        summary["deviations"] = {d.metric: round(d.deviation, 6) for d in devs}
    return summary


def cmd_search(a) -> dict:
    h, w = a.input
    oracles = Oracles(cost=cost_oracle(h, w))
    if a.quality:
        try:
            oracles.quality = quality_oracle(read_reference_csv(_read(a.quality, "--quality")))
        except ValueError as exc:
            raise DataError(f"--quality {a.quality}: {exc}") from None
    if a.measure_latency:
        oracles.latency = latency_oracle(*a.latency_input, warmup=a.warmup, iters=a.iters, seed=a.seed)
    cands = evaluate_candidates(enumerate_space(a.space), oracles, workers=a.workers)
    _emit(write_candidates_csv(cands), a.output)
    return {"space": a.space, "candidates": len(cands), "errors": sum(c.error is not None for c in cands)}


def cmd_pareto(a) -> dict:
    try:
        cands = read_candidates_csv(_read(a.candidates, "--candidates"))
        front = pareto_front([c for c in cands if c.error is None], a.x, a.y)
    except (ValueError, KeyError) as exc:
        raise DataError(f"--candidates {a.candidates}: {exc}") from None
    _emit(write_candidates_csv(front), a.output)
    return {"candidates": len(cands), "frontier": front.names}


def cmd_eval_pq(a) -> dict:
    try:
        meta = pan.read_meta(a.meta)
    except (OSError, ValueError) as exc:
        raise DataError(f"--meta {a.meta}: {exc}") from None
    pred_dir, gt_dir = Path(a.pred), Path(a.gt)
    for flag, d in (("--pred", pred_dir), ("--gt", gt_dir)):
        if not d.is_dir():
            raise DataError(f"{flag} {d}: not a directory")
    gt_files = sorted(gt_dir.glob("*.pan"))
    if not gt_files:
        raise DataError(f"--gt {gt_dir}: no .pan files")
    stats = pan.PQStats()
    for g in gt_files:
        p = pred_dir / g.name
        if not p.exists():
            raise DataError(f"--pred {pred_dir}: missing {g.name}")
        try:
            pred = pan.stuff_area_filter(pan.read_pan(p, meta), a.stuff_threshold)
            stats = stats + pan.pq_stats(pred, pan.read_pan(g, meta))
        except ValueError as exc:
            raise DataError(f"{g.name}: {exc}") from None
    result = stats.result(meta)
    print(result.to_text())
    if a.output:
        Path(a.output).write_text(result.to_csv())
    return {"images": len(gt_files), "pq": round(result.pq, 6), "pq_things": round(result.pq_things, 6),
            "pq_stuff": round(result.pq_stuff, 6)}


def cmd_gradcheck(a) -> dict:
    seeds = [a.seed] if a.seed is not None else list(range(5))
    results = run_all(seeds)
    print(format_table(results))
    failed = [f"{r.name}/{r.seed}" for r in results if not r.passed]
    if failed:
        raise DataError(f"gradient check failed: {', '.join(failed)}")
    return {"checks": len(results), "max_error": max(r.error for r in results)}


def cmd_latency(a) -> dict:
    plan = _load_plan(a.plan)
    net = instantiate(plan, a.seed)
    ms = measure_latency(net, *a.input, warmup=a.warmup, iters=a.iters, seed=a.seed)
    return {"name": plan.spec.name, "input": list(a.input), "median_ms": round(ms, 3)}


def cmd_augment(a) -> dict:
    try:
        img = aug.decode_ppm(_read(a.image, "--image", binary=True))
    except ValueError as exc:
        raise DataError(f"--image {a.image}: {exc}") from None
    policy = aug.scale_magnitudes(aug.DEFAULT_POLICY, a.factor)
    rng = np.random.default_rng(a.seed)
    idx = aug.sample_subpolicy(policy, rng)
    out = aug.apply_subpolicy(img, policy[idx - 1], rng)
    Path(a.output).write_bytes(aug.encode_ppm(out))
    return {"subpolicy": idx, "changed": bool((out != img).any())}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="swidernet", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    b = sub.add_parser("build", help="expand (w1, w2, l) into a plan file")
    b.add_argument("--w1", type=float, required=True)
    b.add_argument("--w2", type=float, required=True)
    b.add_argument("--l", type=float, required=True)
    b.add_argument("--no-se", action="store_true")
    b.add_argument("--no-sac", action="store_true")
    b.add_argument("--multigrid", action="store_true")
    b.add_argument("--sep-conv", action="store_true")
    b.add_argument("--output-stride", type=int, choices=(16, 32), default=16)
    b.add_argument("--num-classes", type=int, default=133)
    b.add_argument("--depth-rounding", choices=("half_up", "half_even"), default="half_up")
    b.add_argument("-o", "--output")
    b.set_defaults(fn=cmd_build)

    c = sub.add_parser("cost", help="per-layer params and multiply-adds")
    c.add_argument("--plan", required=True)
    c.add_argument("--input", type=parse_size, default=(641, 641))
    c.add_argument("--ref")
    c.add_argument("-o", "--output")
    c.set_defaults(fn=cmd_cost)

    s = sub.add_parser("search", help="evaluate a search space")
    s.add_argument("--space", choices=("fast", "strong"), required=True)
    s.add_argument("--input", type=parse_size, default=(641, 641))
    s.add_argument("--quality")
    s.add_argument("--measure-latency", action="store_true")
    s.add_argument("--latency-input", type=parse_size, default=(65, 65))
    s.add_argument("--warmup", type=int, default=1)
    s.add_argument("--iters", type=int, default=3)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("-o", "--output")
    s.set_defaults(fn=cmd_search)

    f = sub.add_parser("pareto", help="Pareto frontier of a candidates CSV")
    f.add_argument("--candidates", required=True)
    f.add_argument("--x", choices=("latency_ms", "madds", "params"), default="latency_ms")
    f.add_argument("--y", choices=("quality",), default="quality")
    f.add_argument("-o", "--output")
    f.set_defaults(fn=cmd_pareto)

    e = sub.add_parser("eval-pq", help="panoptic quality over paired PAN1 files")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--meta", required=True)
    e.add_argument("--stuff-threshold", type=int, default=0)
    e.add_argument("-o", "--output")
    e.set_defaults(fn=cmd_eval_pq)

    g = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    g.add_argument("--seed", type=int)
    g.set_defaults(fn=cmd_gradcheck)

    t = sub.add_parser("latency", help="median forward latency of a plan")
    t.add_argument("--plan", required=True)
    t.add_argument("--input", type=parse_size, default=(65, 65))
    t.add_argument("--warmup", type=int, default=1)
    t.add_argument("--iters", type=int, default=5)
    t.add_argument("--seed", type=int, default=0)
    t.set_defaults(fn=cmd_latency)

    a = sub.add_parser("augment", help="apply one sampled sub-policy to a PPM image")
    a.add_argument("--image", required=True)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--factor", type=float, default=1.0)
    a.add_argument("-o", "--output", required=True)
    a.set_defaults(fn=cmd_augment)
    return p


def run(argv: list[str] | None = None) -> int:
    verb = None
    try:
        args = build_parser().parse_args(argv)
        verb = args.verb
        summary = args.fn(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        print(json.dumps({"verb": verb, "status": "usage_error", "message": str(exc)}))
        return 1
    except (DataError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        print(json.dumps({"verb": verb, "status": "data_error", "message": str(exc)}))
        return 2
    print(json.dumps({"verb": verb, "status": "ok", **summary}))
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
