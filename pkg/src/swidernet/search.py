"""Grid enumeration, candidate evaluation and Pareto extraction."""
from __future__ import annotations

import csv
import io
import math
import statistics
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from importlib import resources
from itertools import product
from typing import Callable, Iterable, Sequence

import numpy as np

from .arch import ArchSpec, Network, build_plan, forward, instantiate
from .cost import ReferenceRow, cost_report

SPACES = {
    "fast": ((0.25, 0.5, 1), (0.25, 0.35, 0.5, 0.75, 1), (0.35, 0.75, 1)),
    "strong": ((1,), (1, 1.5, 2), (1, 2, 3, 4, 5, 5.5, 6)),
}
METRICS = ("params", "madds", "latency_ms", "quality")


def enumerate_space(kind: str) -> list[ArchSpec]:
    """Lexicographic (w1, w2, l) grid; fast specs use the separable-conv head."""
    if kind not in SPACES:
        raise ValueError(f"unknown search space {kind!r}; expected one of {sorted(SPACES)}")
    sep = kind == "fast"
    return [ArchSpec(w1, w2, l, sep_conv_head=sep) for w1, w2, l in product(*SPACES[kind])]


@dataclass
class Candidate:
    spec: ArchSpec | None
    name: str = ""
    metrics: dict[str, float] = field(default_factory=dict)
    error: str | None = None

    def __post_init__(self):
        if not self.name and self.spec is not None:
            self.name = self.spec.name
        for k, v in self.metrics.items():
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"metric {k}={v!r} must be finite and nonnegative")

    def sort_key(self):
        if self.spec is not None:
            return (0, self.spec.key, "")
        return (1, (), self.name)


Oracle = Callable[[ArchSpec], "dict[str, float] | float | None"]


@dataclass
class Oracles:
    cost: Oracle | None = None
    latency: Oracle | None = None
    quality: Oracle | None = None


def cost_oracle(input_h: int, input_w: int) -> Oracle:
    def run(spec: ArchSpec) -> dict[str, float]:
        r = cost_report(build_plan(spec), input_h, input_w)
        return {"params": r.total_params, "madds": r.total_madds}
    return run


def quality_oracle(rows: Iterable[ReferenceRow]) -> Oracle:
    """Look quality up by (w1, w2, l); specs without a row get no quality."""
    table = {(r.w1, r.w2, r.l): r.quality for r in rows if r.quality is not None}

    def run(spec: ArchSpec):
        return table.get(spec.key)
    return run


def latency_oracle(input_h: int, input_w: int, warmup: int = 1, iters: int = 3, seed: int = 0) -> Oracle:
    def run(spec: ArchSpec) -> float:
        return measure_latency(instantiate(build_plan(spec), seed), input_h, input_w, warmup, iters)
    return run


def _evaluate_one(spec: ArchSpec, oracles: Oracles) -> Candidate:
    metrics: dict[str, float] = {}
    try:
        if oracles.cost is not None:
            metrics.update(oracles.cost(spec))
        for key, fn in (("latency_ms", oracles.latency), ("quality", oracles.quality)):
            if fn is not None:
                v = fn(spec)
                if v is not None:
                    metrics[key] = float(v)
        return Candidate(spec, metrics=metrics)
    except Exception as exc:  # recorded per candidate
        return Candidate(spec, metrics={}, error=f"{type(exc).__name__}: {exc}")


def evaluate_candidates(specs: Sequence[ArchSpec], oracles: Oracles, workers: int = 1) -> list[Candidate]:
    """One candidate per spec in input order; oracle failures land in ``error``."""
    if workers <= 1:
        return [_evaluate_one(s, oracles) for s in specs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda s: _evaluate_one(s, oracles), specs))


@dataclass(frozen=True)
class ParetoSet:
    members: tuple[Candidate, ...]
    cost_key: str
    quality_key: str

    def __iter__(self):
        return iter(self.members)

    def __len__(self):
        return len(self.members)

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.members]


def dominates(a: Candidate, b: Candidate, cost_key: str, quality_key: str) -> bool:
    ca, qa = a.metrics[cost_key], a.metrics[quality_key]
    cb, qb = b.metrics[cost_key], b.metrics[quality_key]
    return ca <= cb and qa >= qb and (ca < cb or qa > qb)


def pareto_front(candidates: Sequence[Candidate], cost_key: str = "latency_ms",
                 quality_key: str = "quality") -> ParetoSet:
    """Nondominated candidates, ascending in cost and strictly increasing in quality.

    Exact ties on both objectives keep the candidate that sorts first
    (lexicographically smallest spec, then name).
    """
    for c in candidates:
        for key in (cost_key, quality_key):
            if key not in c.metrics:
                raise KeyError(f"candidate {c.name!r} lacks metric {key!r}")
    order = sorted(candidates, key=lambda c: (c.metrics[cost_key], -c.metrics[quality_key], c.sort_key()))
    front, best = [], -math.inf
    for c in order:
        if c.metrics[quality_key] > best:
            front.append(c)
            best = c.metrics[quality_key]
    return ParetoSet(tuple(front), cost_key, quality_key)


# --------------------------------------------------------------------------
# latency

_LATENCY_LOCK = threading.Lock()


def measure_latency(net: Network, input_h: int, input_w: int, warmup: int = 1, iters: int = 5,
                    seed: int = 0) -> float:
    """Median wall-clock milliseconds of ``forward``; one measurement at a time."""
    if iters < 1:
        raise ValueError("iters must be >= 1")
    if warmup < 0:
        raise ValueError("warmup must be >= 0")
    x = np.random.default_rng(seed).standard_normal((1, 3, input_h, input_w)).astype(np.float32)
    with _LATENCY_LOCK:
        for _ in range(warmup):
            forward(net, x)
        times = []
        for _ in range(iters):
            t0 = time.perf_counter()
            forward(net, x)
            times.append((time.perf_counter() - t0) * 1e3)
    return statistics.median(times)


# --------------------------------------------------------------------------
# CSV

CANDIDATE_COLUMNS = ("w1", "w2", "l", "params", "madds", "latency_ms", "quality", "name", "error")


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float) and v.is_integer() and abs(v) < 1e15:
        return str(int(v))
    return repr(v) if isinstance(v, float) else str(v)


def write_candidates_csv(candidates: Iterable[Candidate]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CANDIDATE_COLUMNS)
    for c in candidates:
        s = c.spec
        w.writerow([_fmt(s.w1) if s else "", _fmt(s.w2) if s else "", _fmt(s.l) if s else ""]
                   + [_fmt(c.metrics.get(k)) for k in METRICS] + [c.name, c.error or ""])
    return buf.getvalue()


def read_candidates_csv(text: str, base: ArchSpec | None = None) -> list[Candidate]:
    """Parse candidates; rows with blank w1/w2/l are named baselines without a spec."""
    reader = csv.DictReader(io.StringIO(text))
    cols = set(reader.fieldnames or ())
    missing = {"w1", "w2", "l"} - cols
    if missing:
        raise ValueError(f"candidates CSV lacks column(s) {sorted(missing)}")
    out = []
    for rec in reader:
        spec = None
        if all((rec.get(k) or "").strip() for k in ("w1", "w2", "l")):
            w1, w2, l = (float(rec[k]) for k in ("w1", "w2", "l"))
            spec = replace(base, w1=w1, w2=w2, l=l) if base else ArchSpec(w1, w2, l)
        metrics = {k: float(rec[k]) for k in METRICS if (rec.get(k) or "").strip()}
        name = (rec.get("name") or "").strip()
        if spec is None and not name:
            raise ValueError("a candidate row needs either w1/w2/l or a name")
        out.append(Candidate(spec, name, metrics, (rec.get("error") or "").strip() or None))
    return out


def packaged_candidates(name: str = "runtime_coco.csv") -> list[Candidate]:
    return read_candidates_csv(resources.files("swidernet.data").joinpath(name).read_text())
