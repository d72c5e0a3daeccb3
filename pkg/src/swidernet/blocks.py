"""Squeeze-and-excitation, switchable atrous convolution, residual blocks, drop path."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import (
    ConvKernel,
    ShapeMismatchError,
    Tensor,
    as_tensor,
    avg_pool2d,
    batch_norm_inference,
    conv2d,
    fully_connected,
    global_avg_pool,
    hard_sigmoid,
    mul,
    relu,
    sigmoid,
)

BLOCK_KINDS = ("conv", "basic", "bottleneck")

# SAC evaluates one shared 3x3 kernel at these multiples of the block's rate.
SAC_RATES = (1, 3)
SWITCH_POOL = 5


@dataclass
class SeParams:
    weight: Tensor | np.ndarray
    bias: Tensor | np.ndarray | None = None


@dataclass
class ContextParams:
    weight: Tensor | np.ndarray
    bias: Tensor | np.ndarray | None = None


@dataclass
class SacParams:
    """One shared 3x3 kernel, a 1-channel switch, and two context modules."""

    conv: ConvKernel
    switch: ConvKernel
    pre_context: ContextParams
    post_context: ContextParams
    pool_window: int = SWITCH_POOL

    def __post_init__(self):
        if self.switch.out_channels != 1:
            raise ShapeMismatchError("switch must produce exactly one channel")


@dataclass
class BNParams:
    gamma: Tensor | np.ndarray
    beta: Tensor | np.ndarray
    mean: np.ndarray
    var: np.ndarray
    eps: float = 1e-5

    @classmethod
    def identity(cls, channels: int, dtype=np.float32) -> BNParams:
        return cls(np.ones(channels, dtype), np.zeros(channels, dtype),
                   np.zeros(channels, dtype), np.ones(channels, dtype))

    def __call__(self, x) -> Tensor:
        return batch_norm_inference(x, self.mean, self.var, self.gamma, self.beta, self.eps)


@dataclass(frozen=True)
class BlockPlan:
    """Static description of one unit.

    ``widths`` lists the output channels of each conv in the residual
    branch: one entry for a stem ``conv``, ``(mid, out)`` for ``basic``
    (two 3x3 convs), ``(reduce, mid, out)`` for ``bottleneck``
    (1x1, 3x3, 1x1).
    """

    kind: str
    in_channels: int
    widths: tuple[int, ...]
    stride: int = 1
    rate: int = 1
    use_se: bool = False
    use_sac: bool = False
    survival_rate: float = 1.0

    def __post_init__(self):
        expected = {"conv": 1, "basic": 2, "bottleneck": 3}
        if self.kind not in expected:
            raise ValueError(f"unknown block kind {self.kind!r}")
        if len(self.widths) != expected[self.kind]:
            raise ValueError(f"{self.kind} block needs {expected[self.kind]} widths, got {self.widths}")
        if self.stride not in (1, 2):
            raise ValueError(f"stride must be 1 or 2, got {self.stride}")
        if not 0 < self.survival_rate <= 1:
            raise ValueError(f"survival rate must lie in (0, 1], got {self.survival_rate}")
        if self.kind == "conv" and (self.use_se or self.use_sac):
            raise ValueError("SE/SAC only decorate residual blocks")

    @property
    def out_channels(self) -> int:
        return self.widths[-1]

    @property
    def has_projection(self) -> bool:
        return self.kind != "conv" and (self.in_channels != self.out_channels or self.stride != 1)

    @property
    def kernel_sizes(self) -> tuple[int, ...]:
        return {"conv": (3,), "basic": (3, 3), "bottleneck": (1, 3, 1)}[self.kind]

    @property
    def conv_strides(self) -> tuple[int, ...]:
        # basic: first conv downsamples; bottleneck: the 3x3 does
        if self.kind == "bottleneck":
            return (1, self.stride, 1)
        return (self.stride,) + (1,) * (len(self.widths) - 1)

    @property
    def sac_index(self) -> int:
        """Which branch conv SAC replaces: the last 3x3 of the branch."""
        return 1

    @property
    def layer_count(self) -> int:
        return len(self.widths)


@dataclass
class BlockParams:
    norms: list[BNParams]
    convs: list[ConvKernel]
    projection: ConvKernel | None = None
    se: SeParams | None = None
    sac: SacParams | None = None


def se_module(x, p: SeParams) -> Tensor:
    """Rescale channels by ``hard_sigmoid(W @ gap(x))``."""
    x = as_tensor(x)
    c = x.shape[1]
    if np.shape(p.weight.data if isinstance(p.weight, Tensor) else p.weight) != (c, c):
        raise ShapeMismatchError(f"SE weight must be {c}x{c}")
    s = hard_sigmoid(fully_connected(global_avg_pool(x), p.weight, p.bias))
    return mul(x, s)


def global_context(x, fc: ContextParams) -> Tensor:
    """Residual context: ``x + broadcast(FC(gap(x)))``."""
    x = as_tensor(x)
    c = x.shape[1]
    if np.shape(fc.weight.data if isinstance(fc.weight, Tensor) else fc.weight) != (c, c):
        raise ShapeMismatchError(f"context weight must be {c}x{c}")
    return x + fully_connected(global_avg_pool(x), fc.weight, fc.bias)


def switch_map(x, p: SacParams) -> Tensor:
    """Per-position switch in [0, 1], shape (n, 1, h', w')."""
    pooled = avg_pool2d(x, p.pool_window, stride=p.conv.stride, padding=p.pool_window // 2)
    return sigmoid(conv2d(pooled, p.switch))


def sac(x, p: SacParams) -> Tensor:
    """Switchable atrous convolution with the kernel shared across both rates.

    The kernel's own ``rate`` is the base rate; the two branches run at
    ``base * 1`` and ``base * 3``.
    """
    x = as_tensor(x)
    if x.shape[1] != p.conv.in_channels:
        raise ShapeMismatchError(f"SAC expects {p.conv.in_channels} channels, got {x.shape[1]}")
    xc = global_context(x, p.pre_context)
    s = switch_map(xc, p)
    small = conv2d(xc, p.conv.with_rate(p.conv.rate * SAC_RATES[0]))
    large = conv2d(xc, p.conv.with_rate(p.conv.rate * SAC_RATES[1]))
    mixed = mul(1.0 - s, small) + mul(s, large)
    return global_context(mixed, p.post_context)


def drop_path(branch, survival_rate: float, mode: str = "inference",
              rng: np.random.Generator | None = None) -> Tensor:
    """Stochastic depth on a residual branch, scaled at train time."""
    if not 0 < survival_rate <= 1:
        raise ValueError(f"survival rate must lie in (0, 1], got {survival_rate}")
    if mode not in ("train", "inference"):
        raise ValueError(f"mode must be 'train' or 'inference', got {mode!r}")
    branch = as_tensor(branch)
    if mode == "inference" or survival_rate == 1.0:
        return branch
    if rng is None:
        raise ValueError("train-mode drop path needs an explicit rng")
    keep = rng.random(branch.shape[0]) < survival_rate
    scale = (keep / survival_rate).astype(branch.dtype).reshape((-1,) + (1,) * (branch.data.ndim - 1))
    return mul(branch, scale)


def residual_block(x, plan: BlockPlan, params: BlockParams, mode: str = "inference",
                   rng: np.random.Generator | None = None) -> Tensor:
    """Pre-activation residual unit (or a plain conv-BN-ReLU for ``conv``).

    branch = [BN -> ReLU -> conv] per conv; SE on the branch output; drop
    path on the branch; then the (projected) shortcut is added.
    """
    x = as_tensor(x)
    if x.shape[1] != plan.in_channels:
        raise ShapeMismatchError(f"block expects {plan.in_channels} channels, got {x.shape[1]}")
    if plan.kind == "conv":
        return relu(params.norms[0](conv2d(x, params.convs[0])))

    pre = relu(params.norms[0](x))
    shortcut = conv2d(pre, params.projection) if plan.has_projection else x
    h = pre
    for idx, kernel in enumerate(params.convs):
        if idx > 0:
            h = relu(params.norms[idx](h))
        if plan.use_sac and idx == plan.sac_index:
            h = sac(h, params.sac)
        else:
            h = conv2d(h, kernel)
    if plan.use_se:
        h = se_module(h, params.se)
    h = drop_path(h, plan.survival_rate, mode, rng)
    return shortcut + h


def zero_block_params(plan: BlockPlan, dtype=np.float32) -> BlockParams:
    """All-zero weights with identity BN; handy for reductions in tests."""
    return random_block_params(plan, None, dtype)


def random_block_params(plan: BlockPlan, rng: np.random.Generator | None,
                        dtype=np.float32, scale: float = 1.0) -> BlockParams:
    """Parameters for a single block; ``rng=None`` gives zeros."""

    def draw(shape, fan):
        if rng is None:
            return np.zeros(shape, dtype)
        return (rng.standard_normal(shape) * scale * np.sqrt(2.0 / fan)).astype(dtype)

    cins = (plan.in_channels,) + plan.widths[:-1]
    norms, convs = [], []
    for cin, cout, k, s in zip(cins, plan.widths, plan.kernel_sizes, plan.conv_strides):
        rate = plan.rate if k == 3 else 1
        convs.append(ConvKernel(draw((cout, cin, k, k), cout * k * k), stride=s, rate=rate))
        norms.append(BNParams.identity(cout if plan.kind == "conv" else cin, dtype))
    params = BlockParams(norms, convs)
    if plan.has_projection:
        params.projection = ConvKernel(draw((plan.out_channels, plan.in_channels, 1, 1), plan.out_channels),
                                       stride=plan.stride)
    if plan.use_se:
        params.se = SeParams(draw((plan.out_channels,) * 2, plan.out_channels))
    if plan.use_sac:
        shared = convs[plan.sac_index]
        cin, cout = shared.in_channels, shared.out_channels
        params.sac = SacParams(
            conv=shared,
            switch=ConvKernel(draw((1, cin, 1, 1), 1), bias=np.zeros(1, dtype)),
            pre_context=ContextParams(draw((cin, cin), cin), np.zeros(cin, dtype)),
            post_context=ContextParams(draw((cout, cout), cout), np.zeros(cout, dtype)),
        )
    return params
