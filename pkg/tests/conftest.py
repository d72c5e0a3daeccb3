from dataclasses import replace

import numpy as np
import pytest
from hypothesis import settings

from swidernet.arch import ArchPlan
from swidernet.panoptic import make_meta

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


def naive_conv2d(x, w, b=None, stride=1, rate=1, groups=1, pad=None):
    """Quadruple loop cross-correlation with explicit zero padding."""
    n, c, h, wd = x.shape
    o, cg, kh, kw = w.shape
    ph = rate * (kh - 1) // 2 if pad is None else pad
    pw = rate * (kw - 1) // 2 if pad is None else pad
    xp = np.zeros((n, c, h + 2 * ph, wd + 2 * pw), dtype=np.float64)
    xp[:, :, ph:ph + h, pw:pw + wd] = x
    oh = (h + 2 * ph - rate * (kh - 1) - 1) // stride + 1
    ow = (wd + 2 * pw - rate * (kw - 1) - 1) // stride + 1
    out = np.zeros((n, o, oh, ow))
    og = o // groups
    for oc in range(o):
        g = oc // og
        for i in range(oh):
            for j in range(ow):
                acc = np.zeros(n)
                for ci in range(cg):
                    for u in range(kh):
                        for v in range(kw):
                            acc += w[oc, ci, u, v] * xp[:, g * cg + ci, i * stride + u * rate, j * stride + v * rate]
                out[:, oc, i, j] = acc + (0 if b is None else b[oc])
    return out


def dilate_kernel(w, rate):
    """Zero-inserted kernel equivalent to running ``w`` at ``rate``."""
    o, c, kh, kw = w.shape
    out = np.zeros((o, c, rate * (kh - 1) + 1, rate * (kw - 1) + 1), w.dtype)
    out[:, :, ::rate, ::rate] = w
    return out


def tiny_head(plan: ArchPlan) -> ArchPlan:
    """Shrink the head widths so forward passes over large grids stay cheap."""
    head = replace(plan.head, aspp_channels=8, semantic_channels=8, semantic_projections=(8, 8),
                   semantic_head_channels=8, instance_channels=8, instance_projections=(8, 8),
                   instance_head_channels=8)
    return replace(plan, head=head)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def meta5():
    """Classes 0-2 are things, 3-4 stuff."""
    return make_meta(things=[0, 1, 2], stuff=[3, 4])
