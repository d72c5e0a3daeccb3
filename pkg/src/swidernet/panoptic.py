"""Center-regression grouping, semantic/instance fusion, stuff filtering, PQ and mIoU."""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Mapping

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

VOID = 65535
MAGIC = b"PAN1"


@dataclass(frozen=True)
class Category:
    class_id: int
    isthing: bool
    name: str = ""


Meta = Mapping[int, Category]


def make_meta(things: list[int], stuff: list[int], names: Mapping[int, str] | None = None) -> dict[int, Category]:
    names = names or {}
    meta = {c: Category(c, True, names.get(c, "")) for c in things}
    meta.update({c: Category(c, False, names.get(c, "")) for c in stuff})
    return dict(sorted(meta.items()))


def _thing_lut(meta: Meta) -> np.ndarray:
    """Lookup over all 16-bit ids: 1 thing, 0 stuff, -1 unknown (VOID maps to 0)."""
    lut = np.full(VOID + 1, -1, np.int8)
    lut[VOID] = 0
    for c, cat in meta.items():
        if not 0 <= c < VOID:
            raise ValueError(f"class id {c} out of range")
        lut[c] = 1 if cat.isthing else 0
    return lut


@dataclass
class PanopticMap:
    class_ids: np.ndarray
    instance_ids: np.ndarray
    meta: dict[int, Category] = field(default_factory=dict)

    def __post_init__(self):
        self.class_ids = np.asarray(self.class_ids)
        self.instance_ids = np.asarray(self.instance_ids)
        if self.class_ids.ndim != 2 or self.class_ids.shape != self.instance_ids.shape:
            raise ValueError(f"class/instance images must be equal 2-D shapes, got "
                             f"{self.class_ids.shape} and {self.instance_ids.shape}")
        for name in ("class_ids", "instance_ids"):
            a = getattr(self, name)
            if a.size and (a.min() < 0 or a.max() > VOID):
                raise ValueError(f"{name} must fit in 16 bits")
            setattr(self, name, a.astype(np.uint16))
        self.meta = dict(self.meta)
        self.validate()

    @property
    def height(self) -> int:
        return self.class_ids.shape[0]

    @property
    def width(self) -> int:
        return self.class_ids.shape[1]

    def validate(self):
        kind = _thing_lut(self.meta)[self.class_ids]
        if (kind < 0).any():
            bad = sorted(set(self.class_ids[kind < 0].tolist()))
            raise ValueError(f"unknown class id(s) {bad[:5]}")
        thing = kind == 1
        if (self.instance_ids[~thing] != 0).any():
            raise ValueError("stuff and VOID pixels must carry instance id 0")
        if (self.instance_ids[thing] == 0).any():
            raise ValueError("thing pixels must carry instance id >= 1")

    def segments(self) -> dict[tuple[int, int], int]:
        """(class_id, instance_id) -> area, VOID excluded."""
        key = self.class_ids.astype(np.uint32) << 16 | self.instance_ids
        keys, counts = np.unique(key[self.class_ids != VOID], return_counts=True)
        return {(int(k >> 16), int(k & 0xFFFF)): int(n) for k, n in zip(keys, counts)}

    def __eq__(self, other):
        if not isinstance(other, PanopticMap):
            return NotImplemented
        return (np.array_equal(self.class_ids, other.class_ids)
                and np.array_equal(self.instance_ids, other.instance_ids) and self.meta == other.meta)


# --------------------------------------------------------------------------
# grouping and fusion


@dataclass(frozen=True)
class GroupingParams:
    center_threshold: float = 0.1
    nms_window: int = 7
    top_k: int = 200

    def __post_init__(self):
        if self.nms_window < 1 or self.nms_window % 2 == 0:
            raise ValueError("nms_window must be a positive odd integer")
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")


def find_centers(heatmap: np.ndarray, params: GroupingParams = GroupingParams()) -> np.ndarray:
    """(k, 2) array of (y, x) centers ordered by descending score, then raster order."""
    hm = np.asarray(heatmap, np.float64)
    if hm.ndim != 2:
        raise ValueError(f"heatmap must be 2-D, got shape {hm.shape}")
    r = params.nms_window // 2
    padded = np.pad(hm, r, constant_values=-np.inf)
    wmax = sliding_window_view(padded, (params.nms_window,) * 2).max(axis=(2, 3))
    ys, xs = np.nonzero((hm == wmax) & (hm >= params.center_threshold))
    order = np.lexsort((ys * hm.shape[1] + xs, -hm[ys, xs]))[: params.top_k]
    return np.stack([ys[order], xs[order]], axis=1)


def group_instances(center_heatmap, offsets, thing_mask,
                    params: GroupingParams = GroupingParams()) -> np.ndarray:
    """Instance id image: thing pixels get 1 + index of their nearest center, others 0.

    A pixel p votes for the location ``p + offset(p)``; offsets are ``(dy, dx)``.
    Equidistant centers resolve to the lower index.  Without centers every
    pixel is 0.
    """
    hm = np.asarray(center_heatmap)
    off = np.asarray(offsets, np.float64)
    mask = np.asarray(thing_mask, bool)
    if hm.ndim == 3 and hm.shape[0] == 1:
        hm = hm[0]
    if hm.shape != mask.shape or off.shape != (2,) + mask.shape:
        raise ValueError(f"shape mismatch: heatmap {hm.shape}, offsets {off.shape}, mask {mask.shape}")
    out = np.zeros(mask.shape, np.int32)
    centers = find_centers(hm, params)
    if len(centers) == 0:
        return out
    ys, xs = np.nonzero(mask)
    vy = ys + off[0, ys, xs]
    vx = xs + off[1, ys, xs]
    d2 = (vy[:, None] - centers[None, :, 0]) ** 2 + (vx[:, None] - centers[None, :, 1]) ** 2
    out[ys, xs] = np.argmin(d2, axis=1) + 1
    return out


def fuse(semantic, instances, meta: Meta) -> PanopticMap:
    """Merge a semantic image with an instance id image.

    Each instance takes the majority semantic thing class over its thing
    pixels (ties go to the smaller id).  Thing-class pixels without an
    instance become VOID; stuff pixels keep their class.
    """
    sem = np.asarray(semantic).astype(np.int64)
    inst = np.asarray(instances).astype(np.int64)
    if sem.shape != inst.shape or sem.ndim != 2:
        raise ValueError(f"semantic {sem.shape} and instance {inst.shape} images must match")
    if sem.size and (sem.min() < 0 or sem.max() > VOID):
        raise ValueError("semantic ids out of 16-bit range")
    if inst.size and (inst.min() < 0 or inst.max() >= VOID):
        raise ValueError("instance ids out of range")
    kind = _thing_lut(meta)[sem]
    if (kind < 0).any():
        raise ValueError(f"unknown class id(s) {sorted(set(sem[kind < 0].tolist()))[:5]}")
    thing = kind == 1
    cls = np.where(thing, VOID, sem)
    ids = np.zeros_like(inst)
    members = thing & (inst > 0)
    for k in np.unique(inst[members]):
        px = members & (inst == k)
        votes = np.bincount(sem[px])
        cls[px] = int(np.argmax(votes))
        ids[px] = k
    return PanopticMap(cls, ids, dict(meta))


def stuff_area_filter(pmap: PanopticMap, threshold: int) -> PanopticMap:
    """VOID every stuff segment whose area is strictly below ``threshold``."""
    if threshold < 0:
        raise ValueError("threshold must be >= 0")
    cls = pmap.class_ids.copy()
    for (c, _), area in pmap.segments().items():
        if not pmap.meta[c].isthing and area < threshold:
            cls[cls == c] = VOID
    return PanopticMap(cls, pmap.instance_ids.copy(), pmap.meta)


def semantic_prediction(logits) -> np.ndarray:
    """Argmax over classes of a (C, H, W) or (1, C, H, W) map; ties pick the lower id."""
    a = np.asarray(logits)
    if a.ndim == 4:
        a = a[0]
    return np.argmax(a, axis=0)


def panoptic_from_outputs(outputs, meta: Meta, params: GroupingParams = GroupingParams(),
                          stuff_threshold: int = 0) -> PanopticMap:
    sem = semantic_prediction(outputs.semantic_logits)
    thing = _thing_lut(meta)[sem] == 1
    inst = group_instances(outputs.center_heatmap[0, 0], outputs.offsets[0], thing, params)
    return stuff_area_filter(fuse(sem, inst, meta), stuff_threshold)


# --------------------------------------------------------------------------
# metrics


@dataclass
class ClassTally:
    iou_sum: Fraction = Fraction(0)
    tp: int = 0
    fp: int = 0
    fn: int = 0

    def __add__(self, other: ClassTally) -> ClassTally:
        return ClassTally(self.iou_sum + other.iou_sum, self.tp + other.tp, self.fp + other.fp, self.fn + other.fn)

    @property
    def pq(self) -> float:
        d = self.tp + Fraction(self.fp + self.fn, 2)
        return float(self.iou_sum / d) if d else 0.0

    @property
    def sq(self) -> float:
        return float(self.iou_sum / self.tp) if self.tp else 0.0

    @property
    def rq(self) -> float:
        d = self.tp + Fraction(self.fp + self.fn, 2)
        return float(self.tp / d) if d else 0.0


@dataclass
class PQStats:
    """Per-class tallies plus the set of classes seen in ground truth; merge with ``+``."""

    classes: dict[int, ClassTally] = field(default_factory=dict)
    gt_classes: set[int] = field(default_factory=set)

    def __add__(self, other: PQStats) -> PQStats:
        merged = dict(self.classes)
        for c, t in other.classes.items():
            merged[c] = merged[c] + t if c in merged else t
        return PQStats(merged, self.gt_classes | other.gt_classes)

    def result(self, meta: Meta) -> PQResult:
        per_class = {c: self.classes.get(c, ClassTally()) for c in sorted(self.gt_classes)}

        def mean(isthing):
            vals = [Fraction(t.iou_sum) / (t.tp + Fraction(t.fp + t.fn, 2))
                    for c, t in per_class.items() if isthing is None or meta[c].isthing == isthing]
            return float(sum(vals) / len(vals)) if vals else 0.0

        return PQResult(per_class, mean(None), mean(True), mean(False))


@dataclass
class PQResult:
    per_class: dict[int, ClassTally]
    pq: float
    pq_things: float
    pq_stuff: float

    @property
    def sq(self) -> float:
        vals = [t.sq for t in self.per_class.values()]
        return math.fsum(vals) / len(vals) if vals else 0.0

    @property
    def rq(self) -> float:
        vals = [t.rq for t in self.per_class.values()]
        return math.fsum(vals) / len(vals) if vals else 0.0

    def to_text(self) -> str:
        lines = [f"PQ {self.pq:.3f}  PQ_th {self.pq_things:.3f}  PQ_st {self.pq_stuff:.3f}  "
                 f"SQ {self.sq:.3f}  RQ {self.rq:.3f}  classes {len(self.per_class)}"]
        return "\n".join(lines)

    def to_csv(self) -> str:
        rows = ["class_id,pq,sq,rq,tp,fp,fn"]
        for c, t in self.per_class.items():
            rows.append(f"{c},{t.pq:.6f},{t.sq:.6f},{t.rq:.6f},{t.tp},{t.fp},{t.fn}")
        rows.append(f"all,{self.pq:.6f},{self.sq:.6f},{self.rq:.6f},,,")
        return "\n".join(rows) + "\n"


def _check_pair(pred: PanopticMap, gt: PanopticMap):
    if pred.class_ids.shape != gt.class_ids.shape:
        raise ValueError(f"size mismatch: pred {pred.class_ids.shape} vs gt {gt.class_ids.shape}")
    if pred.meta != gt.meta:
        raise ValueError("pred and gt carry different category metadata")


def pq_stats(pred: PanopticMap, gt: PanopticMap) -> PQStats:
    _check_pair(pred, gt)
    gt_segs = gt.segments()
    pred_segs = pred.segments()
    gkey = gt.class_ids.astype(np.uint32) << 16 | gt.instance_ids
    pkey = pred.class_ids.astype(np.uint32) << 16 | pred.instance_ids
    pairs, counts = np.unique(gkey.astype(np.uint64) << 32 | pkey, return_counts=True)
    inter: dict[tuple, int] = {}
    on_void: dict[tuple[int, int], int] = {}
    for k, n in zip(pairs.tolist(), counts.tolist()):
        g, p = k >> 32, k & 0xFFFFFFFF
        gs, ps = (g >> 16, g & 0xFFFF), (p >> 16, p & 0xFFFF)
        if ps[0] == VOID:
            continue
        if gs[0] == VOID:
            on_void[ps] = on_void.get(ps, 0) + n
        elif gs[0] == ps[0]:
            inter[gs, ps] = n

    stats = PQStats(gt_classes={c for c, _ in gt_segs})
    tallies = stats.classes
    matched_g, matched_p = set(), set()
    for (gs, ps), n in inter.items():
        union = gt_segs[gs] + pred_segs[ps] - n - on_void.get(ps, 0)
        iou = Fraction(n, union)
        if iou > Fraction(1, 2):
            t = tallies.setdefault(gs[0], ClassTally())
            t.tp += 1
            t.iou_sum += iou
            matched_g.add(gs)
            matched_p.add(ps)
    for gs in gt_segs:
        if gs not in matched_g:
            tallies.setdefault(gs[0], ClassTally()).fn += 1
    for ps, area in pred_segs.items():
        if ps in matched_p or 2 * on_void.get(ps, 0) > area:
            continue
        tallies.setdefault(ps[0], ClassTally()).fp += 1
    return stats


def pq(pred: PanopticMap, gt: PanopticMap) -> PQResult:
    """Panoptic quality; aggregates average over classes present in ``gt``."""
    return pq_stats(pred, gt).result(gt.meta)


def miou(pred, gt, num_classes: int) -> tuple[np.ndarray, float]:
    """Per-class IoU (NaN for classes absent from gt) and their mean; gt VOID ignored."""
    p = np.asarray(pred).astype(np.int64).ravel()
    g = np.asarray(gt).astype(np.int64).ravel()
    if p.shape != g.shape:
        raise ValueError("pred and gt must have the same size")
    keep = g != VOID
    p, g = p[keep], g[keep]
    ious = np.full(num_classes, np.nan)
    for c in range(num_classes):
        gc = g == c
        if not gc.any():
            continue
        pc = p == c
        ious[c] = np.count_nonzero(gc & pc) / np.count_nonzero(gc | pc)
    present = ious[~np.isnan(ious)]
    return ious, float(present.mean()) if present.size else 0.0


# --------------------------------------------------------------------------
# files


def encode_pan(pmap: PanopticMap) -> bytes:
    inter = np.stack([pmap.class_ids, pmap.instance_ids], axis=-1).astype("<u2")
    return MAGIC + struct.pack("<II", pmap.height, pmap.width) + inter.tobytes()


def decode_pan(data: bytes, meta: Meta) -> PanopticMap:
    if data[:4] != MAGIC:
        raise ValueError("not a PAN1 file (bad magic)")
    if len(data) < 12:
        raise ValueError("PAN1 header truncated")
    h, w = struct.unpack("<II", data[4:12])
    body = data[12:]
    if len(body) != 4 * h * w:
        raise ValueError(f"PAN1 body has {len(body)} bytes, expected {4 * h * w}")
    arr = np.frombuffer(body, "<u2").reshape(h, w, 2)
    return PanopticMap(arr[..., 0].copy(), arr[..., 1].copy(), dict(meta))


def write_pan(path, pmap: PanopticMap):
    Path(path).write_bytes(encode_pan(pmap))


def read_pan(path, meta: Meta) -> PanopticMap:
    return decode_pan(Path(path).read_bytes(), meta)


def write_meta(path, meta: Meta):
    recs = [{"class_id": c.class_id, "isthing": c.isthing, "name": c.name} for c in meta.values()]
    Path(path).write_text(json.dumps(recs, indent=2) + "\n")


def read_meta(path) -> dict[int, Category]:
    recs = json.loads(Path(path).read_text())
    if not isinstance(recs, list):
        raise ValueError("meta must be a JSON list of categories")
    meta = {}
    for r in recs:
        unknown = set(r) - {"class_id", "isthing", "name"}
        if unknown or "class_id" not in r or "isthing" not in r:
            raise ValueError(f"bad category record {r!r}")
        meta[int(r["class_id"])] = Category(int(r["class_id"]), bool(r["isthing"]), str(r.get("name", "")))
    return dict(sorted(meta.items()))
