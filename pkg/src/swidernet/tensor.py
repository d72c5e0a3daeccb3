"""Dense NCHW tensor primitives with a minimal reverse-mode tape.

Forward inference runs in float32. Every op also records a backward closure
when any input requires a gradient, which is what :func:`grad_check` uses to
compare against central finite differences in float64. This is a
verification facility, not a training engine.
"""
from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np

ACTIVATIONS = ("relu", "relu6", "sigmoid", "hard_sigmoid")
KINKS = {"relu": (0.0,), "relu6": (0.0, 6.0), "sigmoid": (), "hard_sigmoid": (-3.0, 3.0)}

_kink_log: list[float] | None = None


@contextmanager
def kink_probe() -> Iterator[list[float]]:
    """Collect, per activation call, the smallest distance of an input to a kink."""
    global _kink_log
    prev, _kink_log = _kink_log, []
    try:
        yield _kink_log
    finally:
        _kink_log = prev


class ShapeMismatchError(ValueError):
    """Operand shapes violate an op's contract (e.g. channel mismatch)."""


class DegenerateShapeError(ValueError):
    """An op would produce an output with a zero or negative extent."""


class Tensor:
    """Immutable n-d array plus optional autograd bookkeeping.

    Activations are rank 4 (batch, channels, height, width); parameters may
    be any rank.
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg

    def sum(self) -> Tensor:
        shape = self.shape
        return _result(np.asarray(self.data.sum()), (self,),
                       lambda g: (np.broadcast_to(g, shape).copy(),))

    def __add__(self, other) -> Tensor:
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other) -> Tensor:
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other) -> Tensor:
        return add(self, mul(as_tensor(other, self.dtype), -1.0))

    def __rsub__(self, other) -> Tensor:
        return add(as_tensor(other, self.dtype), mul(self, -1.0))

    def __neg__(self) -> Tensor:
        return mul(self, -1.0)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is not None and np.ndim(x) == 0:
        return Tensor(np.asarray(x, dtype=dtype))
    return Tensor(x, dtype=dtype)


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        index = [slice(None)] * g.ndim
        grads = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            index[axis] = slice(lo, hi)
            grads.append(g[tuple(index)])
        return grads

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


# --------------------------------------------------------------------------
# convolution


@dataclass(frozen=True, eq=False)
class ConvKernel:
    """Weights (out, in/groups, kh, kw) plus stride, atrous rate and padding.

    ``padding=None`` selects same-like padding ``rate * (k - 1) // 2``, which
    preserves size at stride 1 and gives ``ceil(in / 2)`` at stride 2.
    """

    weight: Tensor | np.ndarray
    bias: Tensor | np.ndarray | None = None
    stride: int = 1
    rate: int = 1
    groups: int = 1
    padding: tuple[int, int] | None = None

    def __post_init__(self):
        w = np.shape(self.weight.data if isinstance(self.weight, Tensor) else self.weight)
        if len(w) != 4:
            raise ShapeMismatchError(f"conv weight must be 4-D, got shape {w}")
        if w[2] % 2 == 0 or w[3] % 2 == 0:
            raise ValueError(f"kernel extents must be odd, got {w[2]}x{w[3]}")
        if self.rate < 1:
            raise ValueError(f"atrous rate must be >= 1, got {self.rate}")
        if self.stride not in (1, 2):
            raise ValueError(f"stride must be 1 or 2, got {self.stride}")
        if self.groups < 1 or w[0] % self.groups:
            raise ShapeMismatchError(f"out channels {w[0]} not divisible by groups {self.groups}")

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return tuple(np.shape(self.weight.data if isinstance(self.weight, Tensor) else self.weight))

    @property
    def out_channels(self) -> int:
        return self.shape[0]

    @property
    def in_channels(self) -> int:
        return self.shape[1] * self.groups

    @property
    def pads(self) -> tuple[int, int]:
        if self.padding is not None:
            return self.padding
        _, _, kh, kw = self.shape
        return self.rate * (kh - 1) // 2, self.rate * (kw - 1) // 2

    def with_rate(self, rate: int) -> ConvKernel:
        return ConvKernel(self.weight, self.bias, self.stride, rate, self.groups, None)


def conv_output_size(size: int, k: int, stride: int, rate: int, pad: int) -> int:
    return (size + 2 * pad - rate * (k - 1) - 1) // stride + 1


def conv2d(x, kernel: ConvKernel) -> Tensor:
    """Grouped atrous 2-D cross-correlation, one tensordot per kernel tap."""
    x = as_tensor(x)
    w = as_tensor(kernel.weight, x.dtype)
    n, c, h, wd = x.shape
    o, cg, kh, kw = w.shape
    g, s, r = kernel.groups, kernel.stride, kernel.rate
    if c != cg * g:
        raise ShapeMismatchError(f"input has {c} channels, kernel expects {cg * g}")
    ph, pw = kernel.pads
    oh = conv_output_size(h, kh, s, r, ph)
    ow = conv_output_size(wd, kw, s, r, pw)
    if oh < 1 or ow < 1:
        raise DegenerateShapeError(f"conv output would be {oh}x{ow} for input {h}x{wd}")
    og = o // g
    dtype = np.result_type(x.dtype, w.dtype)
    xp = np.pad(x.data.astype(dtype, copy=False), ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    xg = xp.reshape(n, g, cg, xp.shape[2], xp.shape[3])
    wg = w.data.astype(dtype, copy=False).reshape(g, og, cg, kh, kw)

    def taps():
        for i in range(kh):
            for j in range(kw):
                ys, xs = i * r, j * r
                yield i, j, (slice(None), slice(None), slice(None),
                             slice(ys, ys + s * (oh - 1) + 1, s), slice(xs, xs + s * (ow - 1) + 1, s))

    out = np.zeros((n, g, og, oh, ow), dtype=dtype)
    for i, j, sl in taps():
        patch = xg[sl]
        if g == 1:
            out[:, 0] += np.tensordot(wg[0, :, :, i, j], patch[:, 0], axes=([1], [1])).transpose(1, 0, 2, 3)
        else:
            out += np.einsum("goc,ngchw->ngohw", wg[:, :, :, i, j], patch)
    out = out.reshape(n, o, oh, ow)
    parents = [x, w]
    b = None
    if kernel.bias is not None:
        b = as_tensor(kernel.bias, dtype)
        out += b.data.reshape(1, o, 1, 1)
        parents.append(b)

    def backward(grad):
        gg = grad.reshape(n, g, og, oh, ow)
        dxg = np.zeros_like(xg) if x.requires_grad else None
        dw = np.zeros_like(wg) if w.requires_grad else None
        for i, j, sl in taps():
            patch = xg[sl]
            if dw is not None:
                if g == 1:
                    dw[0, :, :, i, j] = np.tensordot(gg[:, 0], patch[:, 0], axes=([0, 2, 3], [0, 2, 3]))
                else:
                    dw[:, :, :, i, j] = np.einsum("ngohw,ngchw->goc", gg, patch)
            if dxg is not None:
                if g == 1:
                    dxg[sl][:, 0] += np.tensordot(wg[0, :, :, i, j], gg[:, 0], axes=([0], [1])).transpose(1, 0, 2, 3)
                else:
                    dxg[sl] += np.einsum("goc,ngohw->ngchw", wg[:, :, :, i, j], gg)
        dx = None
        if dxg is not None:
            dxp = dxg.reshape(xp.shape)
            dx = dxp[:, :, ph:ph + h, pw:pw + wd]
        grads = [dx, None if dw is None else dw.reshape(w.shape)]
        if b is not None:
            grads.append(grad.sum(axis=(0, 2, 3)).reshape(b.shape))
        return grads

    return _result(out, tuple(parents), backward)


# --------------------------------------------------------------------------
# pooling / linear / elementwise


def avg_pool2d(x, window: int, stride: int = 1, padding: int = 0) -> Tensor:
    """Mean over each window; zero padding is excluded from the divisor."""
    if window < 1 or stride < 1:
        raise ValueError("window and stride must be >= 1")
    x = as_tensor(x)
    n, c, h, w = x.shape
    oh = conv_output_size(h, window, stride, 1, padding)
    ow = conv_output_size(w, window, stride, 1, padding)
    if oh < 1 or ow < 1:
        raise DegenerateShapeError(f"pool output would be {oh}x{ow}")
    pad = ((0, 0), (0, 0), (padding, padding), (padding, padding))
    xp = np.pad(x.data, pad)
    ones = np.pad(np.ones((1, 1, h, w), dtype=x.dtype), pad)
    total = np.zeros((n, c, oh, ow), dtype=x.dtype)
    count = np.zeros((1, 1, oh, ow), dtype=x.dtype)
    slices = []
    for i in range(window):
        for j in range(window):
            sl = (slice(None), slice(None), slice(i, i + stride * (oh - 1) + 1, stride),
                  slice(j, j + stride * (ow - 1) + 1, stride))
            slices.append(sl)
            total += xp[sl]
            count += ones[sl]
    out = total / count

    def backward(grad):
        gp = np.zeros_like(xp)
        share = grad / count
        for sl in slices:
            gp[sl] += share
        return (gp[:, :, padding:padding + h, padding:padding + w],)

    return _result(out, (x,), backward)


def global_avg_pool(x) -> Tensor:
    x = as_tensor(x)
    n, c, h, w = x.shape
    if h < 1 or w < 1:
        raise DegenerateShapeError("global pooling over an empty map")
    return _result(x.data.mean(axis=(2, 3), keepdims=True), (x,),
                   lambda g: (np.broadcast_to(g / (h * w), x.shape).copy(),))


def fully_connected(z, weight, bias=None) -> Tensor:
    """Per-batch matrix-vector product on a (n, c, 1, 1) feature."""
    z = as_tensor(z)
    W = as_tensor(weight, z.dtype)
    n, c, h, w = z.shape
    if (h, w) != (1, 1):
        raise ShapeMismatchError(f"fully_connected expects a 1x1 map, got {h}x{w}")
    if W.data.ndim != 2 or W.shape[1] != c:
        raise ShapeMismatchError(f"weight {W.shape} incompatible with {c} input channels")
    zd = z.data[:, :, 0, 0]
    out = zd @ W.data.T
    parents = [z, W]
    b = None
    if bias is not None:
        b = as_tensor(bias, z.dtype)
        if b.shape != (W.shape[0],):
            raise ShapeMismatchError(f"bias {b.shape} does not match {W.shape[0]} outputs")
        out = out + b.data
        parents.append(b)

    def backward(grad):
        g2 = grad[:, :, 0, 0]
        grads = [(g2 @ W.data)[:, :, None, None], g2.T @ zd]
        if b is not None:
            grads.append(g2.sum(axis=0))
        return grads

    return _result(out[:, :, None, None], tuple(parents), backward)


def _sigmoid(v: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * v))


def activation(kind: str, x) -> Tensor:
    x = as_tensor(x)
    d = x.data
    if _kink_log is not None and kind in KINKS and d.size:
        _kink_log.extend(float(np.abs(d - k).min()) for k in KINKS[kind])
    if kind == "relu":
        out = np.maximum(d, 0)
        local = (d > 0).astype(d.dtype)
    elif kind == "relu6":
        out = np.clip(d, 0, 6)
        local = ((d > 0) & (d < 6)).astype(d.dtype)
    elif kind == "sigmoid":
        out = _sigmoid(d)
        local = out * (1 - out)
    elif kind == "hard_sigmoid":
        out = np.clip(d + 3, 0, 6) / 6
        local = ((d > -3) & (d < 3)).astype(d.dtype) / 6
    else:
        raise ValueError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")
    return _result(out.astype(d.dtype, copy=False), (x,), lambda g: (g * local,))


def relu(x) -> Tensor:
    return activation("relu", x)


def sigmoid(x) -> Tensor:
    return activation("sigmoid", x)


def hard_sigmoid(x) -> Tensor:
    return activation("hard_sigmoid", x)


def batch_norm_inference(x, mean, var, gamma, beta, eps: float = 1e-5) -> Tensor:
    """``gamma * (x - mean) / sqrt(var + eps) + beta`` with frozen statistics."""
    x = as_tensor(x)
    var_d = np.asarray(var.data if isinstance(var, Tensor) else var, dtype=x.dtype)
    if np.any(var_d < 0):
        raise ValueError("batch-norm variance must be nonnegative")
    mean_d = np.asarray(mean.data if isinstance(mean, Tensor) else mean, dtype=x.dtype)
    gamma_t = as_tensor(gamma, x.dtype)
    beta_t = as_tensor(beta, x.dtype)
    c = x.shape[1]
    for name, v in (("mean", mean_d), ("var", var_d), ("gamma", gamma_t.data), ("beta", beta_t.data)):
        if v.shape != (c,):
            raise ShapeMismatchError(f"batch-norm {name} has shape {v.shape}, expected ({c},)")
    inv = (1.0 / np.sqrt(var_d + eps)).astype(x.dtype)
    xhat = (x.data - mean_d.reshape(1, c, 1, 1)) * inv.reshape(1, c, 1, 1)
    out = gamma_t.data.reshape(1, c, 1, 1) * xhat + beta_t.data.reshape(1, c, 1, 1)
    return _result(out, (x, gamma_t, beta_t), lambda g: (
        g * (gamma_t.data * inv).reshape(1, c, 1, 1),
        (g * xhat).sum(axis=(0, 2, 3)),
        g.sum(axis=(0, 2, 3)),
    ))


def _resize_matrix(out_size: int, in_size: int, dtype) -> np.ndarray:
    # half-pixel centers (align_corners=False)
    scale = in_size / out_size
    src = (np.arange(out_size) + 0.5) * scale - 0.5
    src = np.clip(src, 0, in_size - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, in_size - 1)
    frac = src - lo
    m = np.zeros((out_size, in_size), dtype=np.float64)
    rows = np.arange(out_size)
    np.add.at(m, (rows, lo), 1 - frac)
    np.add.at(m, (rows, hi), frac)
    return m.astype(dtype)


def bilinear_resize(x, out_h: int, out_w: int) -> Tensor:
    if out_h < 1 or out_w < 1:
        raise DegenerateShapeError(f"resize target {out_h}x{out_w}")
    x = as_tensor(x)
    n, c, h, w = x.shape
    if (h, w) == (out_h, out_w):
        return x
    ry = _resize_matrix(out_h, h, x.dtype)
    rx = _resize_matrix(out_w, w, x.dtype)
    out = np.einsum("ph,nchw,qw->ncpq", ry, x.data, rx, optimize=True)
    return _result(out, (x,), lambda g: (np.einsum("ph,ncpq,qw->nchw", ry, g, rx, optimize=True),))


# --------------------------------------------------------------------------
# gradient checking


def grad_check(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], eps: float = 1e-4) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    The scalar objective is the sum of ``fn``'s outputs. Everything runs in
    float64. Per input, the error is ``max|analytic - numeric|`` divided by
    the larger of the two gradients' max-norms, so near-zero entries do not
    amplify truncation noise.
    """
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    out = fn(*leaves)
    if not np.all(np.isfinite(out.data)):
        raise FloatingPointError("non-finite output during gradient check")
    out.sum().backward()
    worst = 0.0
    for k, leaf in enumerate(leaves):
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(arrays[k])
        numeric = np.zeros_like(arrays[k])
        flat = arrays[k].reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            vals = []
            for delta in (eps, -eps):
                flat[idx] = orig + delta
                probe = [Tensor(a) for a in arrays]
                v = float(fn(*probe).data.sum())
                if not np.isfinite(v):
                    raise FloatingPointError("non-finite value during gradient check")
                vals.append(v)
            flat[idx] = orig
            numeric.reshape(-1)[idx] = (vals[0] - vals[1]) / (2 * eps)
        scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-12)
        worst = max(worst, float(np.abs(analytic - numeric).max(initial=0.0) / scale))
    return worst
