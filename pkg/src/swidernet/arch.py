"""SWideRNet-(w1, w2, l) plans, parameter stores and Panoptic-DeepLab forward pass.

Backbone skeleton at w1 = w2 = l = 1 (output stride 16)::

    conv1  stem: 3 x [3x3 conv-BN-ReLU] @ 64, first conv stride 2
    conv2  2 x basic @ 128                      (w1; not depth-scaled)
    conv3  3 x basic @ 256,  stride 2           (w2, l)
    conv4  6 x basic @ 512,  stride 2           (w2, l)
    conv5  3 x basic @ 1024, stride 2           (w2, l)
    conv6  3 x bottleneck 512/1024/2048, rate 2 (w2, l)

which tallies 3 + 4 + (6 + 12 + 6 + 9) = 7 + 33 layers.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from fractions import Fraction

import numpy as np

from .blocks import (
    BlockParams,
    BlockPlan,
    BNParams,
    ContextParams,
    SacParams,
    SeParams,
    residual_block,
)
from .tensor import (
    ConvKernel,
    DegenerateShapeError,
    ShapeMismatchError,
    Tensor,
    as_tensor,
    bilinear_resize,
    concat,
    conv2d,
    conv_output_size,
    global_avg_pool,
    mul,
    relu,
    sigmoid,
)

PLAN_VERSION = 1
MULTIGRID = (1, 2, 4)
STEM_WIDTHS = (64, 64, 64)
MIN_INPUT = 33


@dataclass(frozen=True)
class _StageTemplate:
    name: str
    kind: str
    widths: tuple[int, ...]
    count: int
    stride: int
    width_factor: str
    depth_scaled: bool


SKELETON = (
    _StageTemplate("conv2", "basic", (128, 128), 2, 1, "w1", False),
    _StageTemplate("conv3", "basic", (256, 256), 3, 2, "w2", True),
    _StageTemplate("conv4", "basic", (512, 512), 6, 2, "w2", True),
    _StageTemplate("conv5", "basic", (1024, 1024), 3, 2, "w2", True),
    _StageTemplate("conv6", "bottleneck", (512, 1024, 2048), 3, 1, "w2", True),
)


def round8(x) -> int:
    """Nearest multiple of 8, ties up, at least 8."""
    q = Fraction(str(x)) / 8
    return max(8, 8 * math.floor(q + Fraction(1, 2)))


def round_half_up(x) -> int:
    return math.floor(Fraction(str(x)) + Fraction(1, 2))


def round_half_even(x) -> int:
    return round(Fraction(str(x)))


DEPTH_ROUNDING = {"half_up": round_half_up, "half_even": round_half_even}


@dataclass(frozen=True)
class ArchSpec:
    w1: float
    w2: float
    l: float
    use_se: bool = True
    use_sac: bool = True
    use_multigrid: bool = False
    sep_conv_head: bool = False
    output_stride: int = 16
    num_classes: int = 133
    survival_rate: float = 0.8
    depth_rounding: str = "half_up"

    def __post_init__(self):
        for name in ("w1", "w2", "l"):
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and math.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be a positive number, got {v!r}")
        if self.output_stride not in (16, 32):
            raise ValueError(f"output_stride must be 16 or 32, got {self.output_stride}")
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if not 0 < self.survival_rate <= 1:
            raise ValueError("survival_rate must lie in (0, 1]")
        if self.depth_rounding not in DEPTH_ROUNDING:
            raise ValueError(f"depth_rounding must be one of {sorted(DEPTH_ROUNDING)}")

    @property
    def key(self) -> tuple[float, float, float]:
        return (self.w1, self.w2, self.l)

    @property
    def name(self) -> str:
        return "SWideRNet-({:g}, {:g}, {:g})".format(*self.key)


@dataclass(frozen=True)
class StagePlan:
    name: str
    kind: str
    blocks: tuple[BlockPlan, ...]
    unit_rate: int = 1
    multigrid: tuple[int, ...] = ()

    @property
    def out_channels(self) -> int:
        return self.blocks[-1].out_channels

    @property
    def stride(self) -> int:
        return self.blocks[0].stride


@dataclass(frozen=True)
class HeadPlan:
    """Dual-ASPP, dual-decoder Panoptic-DeepLab head."""

    in_channels: int
    num_classes: int
    sep_conv: bool = False
    aspp_channels: int = 256
    aspp_rates: tuple[int, ...] = (6, 12, 18)
    skip_stages: tuple[str, str] = ("conv4", "conv3")
    skip_channels: tuple[int, int] = (512, 256)
    decoder_kernel: int = 5
    semantic_channels: int = 256
    semantic_projections: tuple[int, int] = (64, 32)
    semantic_head_channels: int = 256
    instance_channels: int = 128
    instance_projections: tuple[int, int] = (32, 16)
    instance_head_channels: int = 32


@dataclass(frozen=True)
class ArchPlan:
    spec: ArchSpec
    stages: tuple[StagePlan, ...]
    head: HeadPlan

    def stage(self, name: str) -> StagePlan:
        for s in self.stages:
            if s.name == name:
                return s
        raise KeyError(name)

    @property
    def residual_blocks(self):
        for s in self.stages:
            for i, b in enumerate(s.blocks):
                if b.kind != "conv":
                    yield s.name, i, b


def build_plan(spec: ArchSpec) -> ArchPlan:
    w = {"w1": spec.w1, "w2": spec.w2}
    rnd = DEPTH_ROUNDING[spec.depth_rounding]
    stages = []
    cin = 3
    stem = []
    for i, base in enumerate(STEM_WIDTHS):
        c = round8(base * spec.w1)
        stem.append(BlockPlan("conv", cin, (c,), stride=2 if i == 0 else 1))
        cin = c
    stages.append(StagePlan("conv1", "stem", tuple(stem)))

    for t in SKELETON:
        widths = tuple(round8(base * w[t.width_factor]) for base in t.widths)
        count = max(1, rnd(t.count * spec.l)) if t.depth_scaled else t.count
        stride, unit_rate, mg = t.stride, 1, ()
        if t.name == "conv6":
            if spec.output_stride == 16:
                stride, unit_rate = 1, 2
            else:
                stride, unit_rate = 2, 1
            if spec.use_multigrid:
                mg = tuple(MULTIGRID[i % len(MULTIGRID)] for i in range(count))
        blocks = []
        for i in range(count):
            blocks.append(BlockPlan(
                t.kind, cin, widths,
                stride=stride if i == 0 else 1,
                rate=unit_rate * (mg[i] if mg else 1),
                use_se=spec.use_se,
                use_sac=spec.use_sac and t.name == "conv6",
                survival_rate=spec.survival_rate,
            ))
            cin = widths[-1]
        stages.append(StagePlan(t.name, t.kind, tuple(blocks), unit_rate, mg))

    by_name = {s.name: s for s in stages}
    head = HeadPlan(
        in_channels=cin,
        num_classes=spec.num_classes,
        sep_conv=spec.sep_conv_head,
        aspp_rates=(6, 12, 18) if spec.output_stride == 16 else (3, 6, 9),
        skip_channels=(by_name["conv4"].out_channels, by_name["conv3"].out_channels),
    )
    return ArchPlan(spec, tuple(stages), head)


def count_layers(plan: ArchPlan) -> int:
    """Backbone conv layers: stem convs plus 2 per basic and 3 per bottleneck."""
    return sum(b.layer_count for s in plan.stages for b in s.blocks)


def stage_sizes(plan: ArchPlan, h: int, w: int) -> dict[str, tuple[int, int]]:
    sizes = {}
    for s in plan.stages:
        for b in s.blocks:
            for k, st in zip(b.kernel_sizes, b.conv_strides):
                pad = (k - 1) // 2 * (b.rate if k == 3 else 1)
                rate = b.rate if k == 3 else 1
                h = conv_output_size(h, k, st, rate, pad)
                w = conv_output_size(w, k, st, rate, pad)
        sizes[s.name] = (h, w)
    return sizes


# --------------------------------------------------------------------------
# serialization

_SECTIONS = ("version", "spec", "stages", "head")


class PlanFormatError(ValueError):
    pass


def plan_to_dict(plan: ArchPlan) -> dict:
    spec = plan.spec
    return {
        "version": PLAN_VERSION,
        "spec": {
            "w1": spec.w1, "w2": spec.w2, "l": spec.l,
            "flags": {"use_se": spec.use_se, "use_sac": spec.use_sac,
                      "use_multigrid": spec.use_multigrid, "sep_conv_head": spec.sep_conv_head},
            "output_stride": spec.output_stride,
            "num_classes": spec.num_classes,
            "survival_rate": spec.survival_rate,
            "depth_rounding": spec.depth_rounding,
        },
        "stages": [
            {"name": s.name, "kind": s.kind, "unit_rate": s.unit_rate, "multigrid": list(s.multigrid),
             "blocks": [{**asdict(b), "widths": list(b.widths)} for b in s.blocks]}
            for s in plan.stages
        ],
        "head": {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(plan.head).items()},
    }


def serialize_plan(plan: ArchPlan) -> str:
    return json.dumps(plan_to_dict(plan), indent=2) + "\n"


def _take(obj: dict, allowed: set[str], where: str) -> dict:
    if not isinstance(obj, dict):
        raise PlanFormatError(f"{where} must be an object")
    unknown = set(obj) - allowed
    if unknown:
        raise PlanFormatError(f"unknown field(s) in {where}: {sorted(unknown)}")
    missing = allowed - set(obj)
    if missing:
        raise PlanFormatError(f"missing field(s) in {where}: {sorted(missing)}")
    return obj


def parse_plan(text: str) -> ArchPlan:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        absent = [s for s in _SECTIONS if f'"{s}"' not in text]
        if absent:
            raise PlanFormatError(f"malformed plan: missing section {absent[0]!r}") from exc
        raise PlanFormatError(f"malformed plan: {exc}") from exc
    if not isinstance(doc, dict):
        raise PlanFormatError("plan must be a JSON object")
    for s in _SECTIONS:
        if s not in doc:
            raise PlanFormatError(f"missing section {s!r}")
    _take(doc, set(_SECTIONS), "plan")
    if doc["version"] != PLAN_VERSION:
        raise PlanFormatError(f"plan version {doc['version']!r} unsupported (expected {PLAN_VERSION})")
    try:
        sd = _take(doc["spec"], {"w1", "w2", "l", "flags", "output_stride", "num_classes", "survival_rate",
                                    "depth_rounding"}, "spec")
        flags = _take(sd["flags"], {"use_se", "use_sac", "use_multigrid", "sep_conv_head"}, "spec.flags")
        spec = ArchSpec(sd["w1"], sd["w2"], sd["l"], **flags, output_stride=sd["output_stride"],
                        num_classes=sd["num_classes"], survival_rate=sd["survival_rate"],
                        depth_rounding=sd["depth_rounding"])
        block_fields = {f.name for f in fields(BlockPlan)}
        stages = []
        for k, st in enumerate(doc["stages"]):
            st = _take(st, {"name", "kind", "unit_rate", "multigrid", "blocks"}, f"stages[{k}]")
            blocks = tuple(
                BlockPlan(**{**_take(b, block_fields, f"stages[{k}].blocks[{i}]"), "widths": tuple(b["widths"])})
                for i, b in enumerate(st["blocks"]))
            stages.append(StagePlan(st["name"], st["kind"], blocks, st["unit_rate"], tuple(st["multigrid"])))
        hd = _take(doc["head"], {f.name for f in fields(HeadPlan)}, "head")
        head = HeadPlan(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in hd.items()})
    except (TypeError, KeyError) as exc:
        raise PlanFormatError(f"malformed plan: {exc}") from exc
    return ArchPlan(spec, tuple(stages), head)


# --------------------------------------------------------------------------
# parameters


@dataclass
class Network:
    plan: ArchPlan
    seed: int
    params: dict[str, np.ndarray] = field(default_factory=dict)
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    def num_parameters(self) -> int:
        return int(sum(a.size for a in self.params.values()))


class _Init:
    def __init__(self, net: Network, rng: np.random.Generator):
        self.net, self.rng = net, rng

    def normal(self, path: str, shape, fan_out: int):
        std = np.float32(math.sqrt(2.0 / fan_out))
        self.net.params[path] = self.rng.standard_normal(shape, dtype=np.float32) * std

    def zeros(self, path: str, shape):
        self.net.params[path] = np.zeros(shape, np.float32)

    def conv(self, path: str, cin: int, cout: int, k: int, bias: bool = False, sep: bool = False):
        if sep and k > 1:
            self.normal(f"{path}/depthwise/weight", (cin, 1, k, k), k * k)
            self.normal(f"{path}/pointwise/weight", (cout, cin, 1, 1), cout)
        else:
            self.normal(f"{path}/weight", (cout, cin, k, k), cout * k * k)
        if bias:
            self.zeros(f"{path}/bias", (cout,))

    def bn(self, path: str, c: int):
        self.net.params[f"{path}/gamma"] = np.ones(c, np.float32)
        self.net.params[f"{path}/beta"] = np.zeros(c, np.float32)
        self.net.buffers[f"{path}/mean"] = np.zeros(c, np.float32)
        self.net.buffers[f"{path}/var"] = np.ones(c, np.float32)

    def fc(self, path: str, c: int, bias: bool):
        self.normal(f"{path}/weight", (c, c), c)
        if bias:
            self.zeros(f"{path}/bias", (c,))


def block_prefix(stage: str, index: int) -> str:
    return f"backbone/{stage}/unit{index}"


def instantiate(plan: ArchPlan, seed: int = 0) -> Network:
    """Deterministic He (fan-out) initialization; BN starts as identity."""
    net = Network(plan, seed)
    init = _Init(net, np.random.default_rng(seed))
    for s in plan.stages:
        for i, b in enumerate(s.blocks):
            p = block_prefix(s.name, i)
            cins = (b.in_channels,) + b.widths[:-1]
            for k, (cin, cout, ks) in enumerate(zip(cins, b.widths, b.kernel_sizes)):
                init.conv(f"{p}/conv{k}", cin, cout, ks)
                init.bn(f"{p}/bn{k}", cout if b.kind == "conv" else cin)
            if b.has_projection:
                init.conv(f"{p}/proj", b.in_channels, b.out_channels, 1)
            if b.use_se:
                init.fc(f"{p}/se", b.out_channels, bias=False)
            if b.use_sac:
                cin, cout = cins[b.sac_index], b.widths[b.sac_index]
                init.conv(f"{p}/sac/switch", cin, 1, 1, bias=True)
                init.fc(f"{p}/sac/pre_context", cin, bias=True)
                init.fc(f"{p}/sac/post_context", cout, bias=True)
    init.bn("backbone/post_norm", plan.head.in_channels)

    h = plan.head
    sep = h.sep_conv
    for branch in ("semantic", "instance"):
        a = f"head/{branch}/aspp"
        init.conv(f"{a}/branch0", h.in_channels, h.aspp_channels, 1)
        init.bn(f"{a}/branch0/bn", h.aspp_channels)
        for k, _ in enumerate(h.aspp_rates):
            init.conv(f"{a}/atrous{k}", h.in_channels, h.aspp_channels, 3, sep=sep)
            init.bn(f"{a}/atrous{k}/bn", h.aspp_channels)
        init.conv(f"{a}/pool", h.in_channels, h.aspp_channels, 1)
        init.bn(f"{a}/pool/bn", h.aspp_channels)
        init.conv(f"{a}/project", h.aspp_channels * (len(h.aspp_rates) + 2), h.aspp_channels, 1)
        init.bn(f"{a}/project/bn", h.aspp_channels)
        ch, projs = _decoder_dims(h, branch)
        d = f"head/{branch}/decoder"
        prev = h.aspp_channels
        for (tag, skip_c), proj in zip((("8", h.skip_channels[0]), ("4", h.skip_channels[1])), projs):
            init.conv(f"{d}/proj{tag}", skip_c, proj, 1)
            init.bn(f"{d}/proj{tag}/bn", proj)
            init.conv(f"{d}/fuse{tag}", prev + proj, ch, h.decoder_kernel, sep=sep)
            init.bn(f"{d}/fuse{tag}/bn", ch)
            prev = ch
    k = h.decoder_kernel
    init.conv("head/semantic/head/conv", h.semantic_channels, h.semantic_head_channels, k, sep=sep)
    init.bn("head/semantic/head/conv/bn", h.semantic_head_channels)
    init.conv("head/semantic/head/logits", h.semantic_head_channels, h.num_classes, 1, bias=True)
    for name, out in (("center", 1), ("offset", 2)):
        init.conv(f"head/instance/{name}/conv", h.instance_channels, h.instance_head_channels, k, sep=sep)
        init.bn(f"head/instance/{name}/conv/bn", h.instance_head_channels)
        init.conv(f"head/instance/{name}/out", h.instance_head_channels, out, 1, bias=True)
    return net


def _decoder_dims(h: HeadPlan, branch: str) -> tuple[int, tuple[int, int]]:
    if branch == "semantic":
        return h.semantic_channels, h.semantic_projections
    return h.instance_channels, h.instance_projections


def _bn(net: Network, path: str) -> BNParams:
    return BNParams(net.params[f"{path}/gamma"], net.params[f"{path}/beta"],
                    net.buffers[f"{path}/mean"], net.buffers[f"{path}/var"])


def block_params(net: Network, stage: str, index: int) -> BlockParams:
    b = net.plan.stage(stage).blocks[index]
    p = block_prefix(stage, index)
    P = net.params
    convs, norms = [], []
    for k, (ks, st) in enumerate(zip(b.kernel_sizes, b.conv_strides)):
        convs.append(ConvKernel(P[f"{p}/conv{k}/weight"], stride=st, rate=b.rate if ks == 3 else 1))
        norms.append(_bn(net, f"{p}/bn{k}"))
    params = BlockParams(norms, convs)
    if b.has_projection:
        params.projection = ConvKernel(P[f"{p}/proj/weight"], stride=b.stride)
    if b.use_se:
        params.se = SeParams(P[f"{p}/se/weight"])
    if b.use_sac:
        params.sac = SacParams(
            conv=convs[b.sac_index],
            switch=ConvKernel(P[f"{p}/sac/switch/weight"], bias=P[f"{p}/sac/switch/bias"]),
            pre_context=ContextParams(P[f"{p}/sac/pre_context/weight"], P[f"{p}/sac/pre_context/bias"]),
            post_context=ContextParams(P[f"{p}/sac/post_context/weight"], P[f"{p}/sac/post_context/bias"]),
        )
    return params


# --------------------------------------------------------------------------
# forward


@dataclass
class NetworkOutputs:
    semantic_logits: np.ndarray
    center_heatmap: np.ndarray
    offsets: np.ndarray


def _conv(net: Network, path: str, x: Tensor, rate: int = 1) -> Tensor:
    P = net.params
    bias = P.get(f"{path}/bias")
    if f"{path}/depthwise/weight" in P:
        dw = P[f"{path}/depthwise/weight"]
        x = conv2d(x, ConvKernel(dw, rate=rate, groups=dw.shape[0]))
        return conv2d(x, ConvKernel(P[f"{path}/pointwise/weight"], bias=bias))
    return conv2d(x, ConvKernel(P[f"{path}/weight"], bias=bias, rate=rate))


def _conv_bn_relu(net: Network, path: str, x: Tensor, rate: int = 1) -> Tensor:
    return relu(_bn(net, f"{path}/bn")(_conv(net, path, x, rate)))


def _aspp(net: Network, prefix: str, x: Tensor) -> Tensor:
    h = net.plan.head
    size = x.shape[2:]
    parts = [_conv_bn_relu(net, f"{prefix}/branch0", x)]
    for k, r in enumerate(h.aspp_rates):
        parts.append(_conv_bn_relu(net, f"{prefix}/atrous{k}", x, rate=r))
    pooled = _conv_bn_relu(net, f"{prefix}/pool", global_avg_pool(x))
    parts.append(bilinear_resize(pooled, *size))
    return _conv_bn_relu(net, f"{prefix}/project", concat(parts))


def _decoder(net: Network, branch: str, x: Tensor, feats: dict[str, Tensor]) -> Tensor:
    h = net.plan.head
    d = f"head/{branch}/decoder"
    for tag, stage in zip(("8", "4"), h.skip_stages):
        skip = feats[stage]
        x = bilinear_resize(x, *skip.shape[2:])
        s = _conv_bn_relu(net, f"{d}/proj{tag}", skip)
        x = _conv_bn_relu(net, f"{d}/fuse{tag}", concat([x, s]))
    return x


def forward(net: Network, x, mode: str = "inference", rng: np.random.Generator | None = None) -> NetworkOutputs:
    """Backbone, dual ASPP/decoders, heads at 1/4 then upsampled to the input."""
    x = as_tensor(np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float32))
    if x.data.ndim != 4 or x.shape[1] != 3:
        raise ShapeMismatchError(f"expected (n, 3, h, w) input, got {x.shape}")
    H, W = x.shape[2:]
    if H < MIN_INPUT or W < MIN_INPUT:
        raise DegenerateShapeError(f"input {H}x{W} too small for the stride plan (min {MIN_INPUT})")
    feats = {}
    h = x
    for s in net.plan.stages:
        for i, b in enumerate(s.blocks):
            h = residual_block(h, b, block_params(net, s.name, i), mode, rng)
        feats[s.name] = h
    h = relu(_bn(net, "backbone/post_norm")(h))

    sem = _decoder(net, "semantic", _aspp(net, "head/semantic/aspp", h), feats)
    sem = _conv_bn_relu(net, "head/semantic/head/conv", sem)
    logits = _conv(net, "head/semantic/head/logits", sem)

    ins = _decoder(net, "instance", _aspp(net, "head/instance/aspp", h), feats)
    center = _conv(net, "head/instance/center/out", _conv_bn_relu(net, "head/instance/center/conv", ins))
    offset = _conv(net, "head/instance/offset/out", _conv_bn_relu(net, "head/instance/offset/conv", ins))

    qh, qw = logits.shape[2:]
    scale = np.array([H / qh, W / qw], dtype=np.float32).reshape(1, 2, 1, 1)
    return NetworkOutputs(
        semantic_logits=bilinear_resize(logits, H, W).data,
        center_heatmap=sigmoid(bilinear_resize(center, H, W)).data,
        offsets=mul(bilinear_resize(offset, H, W), scale).data,
    )


def with_width(spec: ArchSpec, w1: float, w2: float) -> ArchSpec:
    return replace(spec, w1=w1, w2=w2)
