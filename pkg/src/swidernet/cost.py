"""Parameter and multiply-add accounting.

Everything here is closed-form arithmetic over an :class:`ArchPlan`; it never
builds tensors, so it doubles as an independent check on :func:`instantiate`.
One multiply-add is counted once.  BN costs ``2C`` params and ``2CHW``
madds; activations, pooling and resizing are free.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

from .arch import MIN_INPUT, ArchPlan, ArchSpec, HeadPlan, build_plan
from .tensor import DegenerateShapeError, conv_output_size


@dataclass(frozen=True)
class CostRow:
    path: str
    params: int
    madds: int


@dataclass
class CostReport:
    spec: ArchSpec
    input_h: int
    input_w: int
    rows: list[CostRow] = field(default_factory=list)

    @property
    def total_params(self) -> int:
        return sum(r.params for r in self.rows)

    @property
    def total_madds(self) -> int:
        return sum(r.madds for r in self.rows)

    def prefixed(self, prefix: str) -> tuple[int, int]:
        rows = [r for r in self.rows if r.path.startswith(prefix)]
        return sum(r.params for r in rows), sum(r.madds for r in rows)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "params", "madds"])
        for r in self.rows:
            w.writerow([r.path, r.params, r.madds])
        w.writerow(["total", self.total_params, self.total_madds])
        return buf.getvalue()


def conv_cost(cin: int, cout: int, k: int, h: int, w: int, stride: int = 1, rate: int = 1,
              bias: bool = False, sep: bool = False):
    """``([(suffix, params, madds), ...], (h_out, w_out))`` for one (possibly separable) conv."""
    pad = rate * (k - 1) // 2
    ho = conv_output_size(h, k, stride, rate, pad)
    wo = conv_output_size(w, k, stride, rate, pad)
    if ho < 1 or wo < 1:
        raise DegenerateShapeError(f"{h}x{w} collapses under a {k}x{k}/s{stride} conv")
    b = cout if bias else 0
    if sep and k > 1:
        parts = [("/depthwise", cin * k * k, cin * k * k * ho * wo),
                 ("/pointwise", cout * cin + b, cout * cin * ho * wo)]
    else:
        parts = [("", cout * cin * k * k + b, cout * cin * k * k * ho * wo)]
    return parts, (ho, wo)


class _Tally:
    def __init__(self):
        self.rows: list[CostRow] = []

    def add(self, path: str, params: int, madds: int):
        self.rows.append(CostRow(path, int(params), int(madds)))

    def conv(self, path, cin, cout, k, h, w, stride=1, rate=1, bias=False, sep=False):
        """Returns the output size."""
        parts, (ho, wo) = conv_cost(cin, cout, k, h, w, stride, rate, bias, sep)
        for suffix, params, madds in parts:
            self.add(path + suffix, params, madds)
        return ho, wo

    def bn(self, path, c, h, w):
        self.add(path, 2 * c, 2 * c * h * w)

    def fc(self, path, c, bias):
        self.add(path, c * c + (c if bias else 0), c * c)


def cost_report(plan: ArchPlan, input_h: int, input_w: int) -> CostReport:
    if input_h < MIN_INPUT or input_w < MIN_INPUT:
        raise DegenerateShapeError(f"input {input_h}x{input_w} too small (min {MIN_INPUT})")
    t = _Tally()
    h, w = input_h, input_w
    sizes = {}
    for s in plan.stages:
        for i, b in enumerate(s.blocks):
            p = f"backbone/{s.name}/unit{i}"
            cins = (b.in_channels,) + b.widths[:-1]
            h0, w0 = h, w
            for k, (cin, cout, ks, st) in enumerate(zip(cins, b.widths, b.kernel_sizes, b.conv_strides)):
                rate = b.rate if ks == 3 else 1
                if b.kind != "conv":
                    t.bn(f"{p}/bn{k}", cin, h, w)
                h, w = t.conv(f"{p}/conv{k}", cin, cout, ks, h, w, st, rate)
                if b.kind == "conv":
                    t.bn(f"{p}/bn{k}", cout, h, w)
                if b.use_sac and k == b.sac_index:
                    # second pass of the shared kernel at the larger rate
                    t.add(f"{p}/sac/large", 0, cout * cin * ks * ks * h * w)
                    t.add(f"{p}/sac/switch", cin + 1, cin * h * w)
                    t.fc(f"{p}/sac/pre_context", cin, bias=True)
                    t.fc(f"{p}/sac/post_context", cout, bias=True)
            if b.has_projection:
                t.conv(f"{p}/proj", b.in_channels, b.out_channels, 1, h0, w0, b.stride)
            if b.use_se:
                t.fc(f"{p}/se", b.out_channels, bias=False)
        sizes[s.name] = (h, w)
    t.bn("backbone/post_norm", plan.head.in_channels, h, w)
    _head_cost(t, plan.head, sizes, (h, w))
    return CostReport(plan.spec, input_h, input_w, t.rows)


def _head_cost(t: _Tally, hp: HeadPlan, sizes, feat):
    fh, fw = feat
    sep = hp.sep_conv
    A = hp.aspp_channels
    q = sizes[hp.skip_stages[1]]
    for branch in ("semantic", "instance"):
        a = f"head/{branch}/aspp"
        t.conv(f"{a}/branch0", hp.in_channels, A, 1, fh, fw)
        t.bn(f"{a}/branch0/bn", A, fh, fw)
        for k, r in enumerate(hp.aspp_rates):
            t.conv(f"{a}/atrous{k}", hp.in_channels, A, 3, fh, fw, rate=r, sep=sep)
            t.bn(f"{a}/atrous{k}/bn", A, fh, fw)
        t.conv(f"{a}/pool", hp.in_channels, A, 1, 1, 1)
        t.bn(f"{a}/pool/bn", A, 1, 1)
        t.conv(f"{a}/project", A * (len(hp.aspp_rates) + 2), A, 1, fh, fw)
        t.bn(f"{a}/project/bn", A, fh, fw)

        ch, projs = (hp.semantic_channels, hp.semantic_projections) if branch == "semantic" \
            else (hp.instance_channels, hp.instance_projections)
        d = f"head/{branch}/decoder"
        prev = A
        for tag, stage, skip_c, proj in zip(("8", "4"), hp.skip_stages, hp.skip_channels, projs):
            sh, sw = sizes[stage]
            t.conv(f"{d}/proj{tag}", skip_c, proj, 1, sh, sw)
            t.bn(f"{d}/proj{tag}/bn", proj, sh, sw)
            t.conv(f"{d}/fuse{tag}", prev + proj, ch, hp.decoder_kernel, sh, sw, sep=sep)
            t.bn(f"{d}/fuse{tag}/bn", ch, sh, sw)
            prev = ch

    k = hp.decoder_kernel
    t.conv("head/semantic/head/conv", hp.semantic_channels, hp.semantic_head_channels, k, *q, sep=sep)
    t.bn("head/semantic/head/conv/bn", hp.semantic_head_channels, *q)
    t.conv("head/semantic/head/logits", hp.semantic_head_channels, hp.num_classes, 1, *q, bias=True)
    for name, out in (("center", 1), ("offset", 2)):
        t.conv(f"head/instance/{name}/conv", hp.instance_channels, hp.instance_head_channels, k, *q, sep=sep)
        t.bn(f"head/instance/{name}/conv/bn", hp.instance_head_channels, *q)
        t.conv(f"head/instance/{name}/out", hp.instance_head_channels, out, 1, *q, bias=True)


def se_param_delta(plan: ArchPlan) -> int:
    """Parameters added by SE: one bias-free C x C matrix per decorated block."""
    return sum(b.out_channels ** 2 for _, _, b in plan.residual_blocks if b.use_se)


# --------------------------------------------------------------------------
# reference tables

_FLAG_TOKENS = {"se": "use_se", "sac": "use_sac", "mg": "use_multigrid", "sep": "sep_conv_head"}


@dataclass(frozen=True)
class ReferenceRow:
    w1: float
    w2: float
    l: float
    params_m: float | None
    madds_b: float | None
    input_h: int
    input_w: int
    source_table: str
    flags: str = ""
    num_classes: int | None = None
    quality: float | None = None

    def spec(self, base: ArchSpec | None = None) -> ArchSpec:
        """ArchSpec for this row.  ``flags`` lists enabled options joined by '+';
        'base' means everything off; empty keeps the defaults of ``base``."""
        kw = {}
        if self.flags:
            toks = set() if self.flags == "base" else set(self.flags.split("+"))
            bad = toks - set(_FLAG_TOKENS)
            if bad:
                raise ValueError(f"unknown flag(s) {sorted(bad)}")
            kw = {attr: tok in toks for tok, attr in _FLAG_TOKENS.items()}
        if self.num_classes is not None:
            kw["num_classes"] = self.num_classes
        spec = base or ArchSpec(self.w1, self.w2, self.l)
        return replace(spec, w1=self.w1, w2=self.w2, l=self.l, **kw)


def _opt(v: str | None, cast):
    return None if v is None or v.strip() in ("", "-") else cast(v)


def read_reference_csv(source) -> list[ReferenceRow]:
    """Rows from a path, a text blob, or a file object."""
    if isinstance(source, Path) or (isinstance(source, str) and "\n" not in source):
        text = Path(source).read_text()
    elif isinstance(source, str):
        text = source
    else:
        text = source.read()
    reader = csv.DictReader(io.StringIO(text))
    required = {"w1", "w2", "l", "params_m", "madds_b", "input_h", "input_w", "source_table"}
    missing = required - set(reader.fieldnames or ())
    if missing:
        raise ValueError(f"reference CSV lacks column(s) {sorted(missing)}")
    rows = []
    for rec in reader:
        rows.append(ReferenceRow(
            float(rec["w1"]), float(rec["w2"]), float(rec["l"]),
            _opt(rec["params_m"], float), _opt(rec["madds_b"], float),
            int(rec["input_h"]), int(rec["input_w"]), rec["source_table"],
            flags=(rec.get("flags") or "").strip(),
            num_classes=_opt(rec.get("num_classes"), int),
            quality=_opt(rec.get("quality"), float),
        ))
    return rows


def packaged_reference(name: str = "reference_costs.csv") -> list[ReferenceRow]:
    return read_reference_csv(resources.files("swidernet.data").joinpath(name).read_text())


@dataclass(frozen=True)
class Deviation:
    metric: str
    ours: float
    reference: float
    deviation: float


def _matches(row: ReferenceRow, report: CostReport) -> bool:
    s = report.spec
    if (row.w1, row.w2, row.l, row.input_h, row.input_w) != (s.w1, s.w2, s.l, report.input_h, report.input_w):
        return False
    if row.flags:
        ref = row.spec()
        if any(getattr(ref, attr) != getattr(s, attr) for attr in _FLAG_TOKENS.values()):
            return False
    return row.num_classes is None or row.num_classes == s.num_classes


def compare_to_reference(report: CostReport, rows: list[ReferenceRow]) -> list[Deviation]:
    """Relative deviations |ours - ref| / ref for params (M) and madds (B)."""
    hits = [r for r in rows if _matches(r, report)]
    if not hits:
        s = report.spec
        raise KeyError(f"no reference row for {s.name} at {report.input_h}x{report.input_w}")
    ref = hits[0]
    out = []
    for metric, ours, ref_value in (("params_m", report.total_params / 1e6, ref.params_m),
                                ("madds_b", report.total_madds / 1e9, ref.madds_b)):
        if ref_value is not None:
            out.append(Deviation(metric, ours, ref_value, abs(ours - ref_value) / ref_value))
    return sorted(out, key=lambda d: d.deviation)


def reference_report(row: ReferenceRow, base: ArchSpec | None = None) -> CostReport:
    return cost_report(build_plan(row.spec(base)), row.input_h, row.input_w)
