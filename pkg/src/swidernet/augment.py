"""AutoAugment-style color policy for uint8 RGB images."""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

OPS = ("Sharpness", "Brightness", "Equalize", "Contrast", "Color", "Solarize")
SOLARIZE_MAX = 10.0


@dataclass(frozen=True)
class Op:
    kind: str
    prob: float
    magnitude: float

    def __post_init__(self):
        if self.kind not in OPS:
            raise ValueError(f"unknown op {self.kind!r}")
        if not 0 <= self.prob <= 1:
            raise ValueError(f"probability {self.prob} outside [0, 1]")
        if self.magnitude < 0:
            raise ValueError(f"magnitude {self.magnitude} must be >= 0")


SubPolicy = tuple[Op, Op]


@dataclass(frozen=True)
class AugPolicy:
    subpolicies: tuple[SubPolicy, ...]

    def __len__(self):
        return len(self.subpolicies)

    def __getitem__(self, i) -> SubPolicy:
        return self.subpolicies[i]


DEFAULT_POLICY = AugPolicy((
    (Op("Sharpness", 0.4, 1.4), Op("Brightness", 0.2, 2.0)),
    (Op("Equalize", 0.0, 1.8), Op("Contrast", 0.2, 2.0)),
    (Op("Sharpness", 0.2, 1.8), Op("Color", 0.2, 1.8)),
    (Op("Solarize", 0.2, 1.4), Op("Equalize", 0.6, 1.8)),
    (Op("Sharpness", 0.2, 0.2), Op("Equalize", 0.2, 1.4)),
))


def _check_image(img) -> np.ndarray:
    a = np.asarray(img)
    if a.ndim != 3 or a.shape[2] != 3:
        raise ValueError(f"expected an (h, w, 3) image, got {a.shape}")
    if a.dtype != np.uint8:
        if a.size and (a.min() < 0 or a.max() > 255):
            raise ValueError("pixel values must lie in [0, 255]")
        a = a.astype(np.uint8)
    return a


def _grayscale(img: np.ndarray) -> np.ndarray:
    """ITU-R 601 luma, rounded like an 8-bit L conversion."""
    r, g, b = (img[..., i].astype(np.int64) for i in range(3))
    return (r * 299 + g * 587 + b * 114 + 500) // 1000


def _blend(degenerate: np.ndarray, img: np.ndarray, factor: float) -> np.ndarray:
    if factor == 1.0:
        return img.copy()
    d = degenerate.astype(np.float64)
    out = d + factor * (img.astype(np.float64) - d)
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def _smooth(img: np.ndarray) -> np.ndarray:
    """3x3 smoothing (center weight 5, total 13); one-pixel border left untouched."""
    out = img.copy()
    h, w = img.shape[:2]
    if h < 3 or w < 3:
        return out
    x = img.astype(np.int64)
    acc = 4 * x[1:-1, 1:-1]
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            acc = acc + x[1 + dy:h - 1 + dy, 1 + dx:w - 1 + dx]
    out[1:-1, 1:-1] = np.clip((acc + 6) // 13, 0, 255)
    return out


def _equalize_channel(ch: np.ndarray) -> np.ndarray:
    hist = np.bincount(ch.ravel(), minlength=256)
    nz = hist[hist > 0]
    step = (int(hist.sum()) - int(nz[-1])) // 255 if nz.size else 0
    if step == 0:
        return ch.copy()
    lut = (np.concatenate([[0], np.cumsum(hist)[:-1]]) + step // 2) // step
    return np.clip(lut, 0, 255).astype(np.uint8)[ch]


def solarize_threshold(magnitude: float) -> int:
    """``round(256 * (1 - m/10))`` clamped to [0, 255]."""
    return min(255, max(0, math.floor(256 * (1 - magnitude / 10) + 0.5)))


def apply_op(img, kind: str, magnitude: float) -> np.ndarray:
    img = _check_image(img)
    if magnitude < 0:
        raise ValueError("magnitude must be >= 0")
    if kind == "Brightness":
        return _blend(np.zeros_like(img), img, magnitude)
    if kind == "Color":
        return _blend(np.repeat(_grayscale(img)[..., None], 3, axis=2), img, magnitude)
    if kind == "Contrast":
        mean = math.floor(_grayscale(img).mean() + 0.5) if img.size else 0
        return _blend(np.full_like(img, mean), img, magnitude)
    if kind == "Sharpness":
        return _blend(_smooth(img), img, magnitude)
    if kind == "Equalize":
        return np.stack([_equalize_channel(img[..., c]) for c in range(3)], axis=-1)
    if kind == "Solarize":
        t = solarize_threshold(magnitude)
        return np.where(img >= t, 255 - img, img).astype(np.uint8)
    raise ValueError(f"unknown op {kind!r}")


def sample_subpolicy(policy: AugPolicy, rng: np.random.Generator) -> int:
    """Uniform 1-based sub-policy index."""
    return int(rng.integers(len(policy))) + 1


def apply_subpolicy(img, sub: SubPolicy, rng: np.random.Generator) -> np.ndarray:
    """Each op fires with its own probability; both draws are always consumed."""
    out = _check_image(img).copy()
    for op in sub:
        if rng.random() < op.prob:
            out = apply_op(out, op.kind, op.magnitude)
    return out


def augment(img, policy: AugPolicy, rng: np.random.Generator) -> np.ndarray:
    return apply_subpolicy(img, policy[sample_subpolicy(policy, rng) - 1], rng)


def scale_magnitudes(policy: AugPolicy, factor: float) -> AugPolicy:
    if not factor > 0:
        raise ValueError("factor must be > 0")

    def scaled(op: Op) -> Op:
        m = op.magnitude * factor
        if op.kind == "Solarize":
            m = min(m, SOLARIZE_MAX)
        return replace(op, magnitude=m)

    return AugPolicy(tuple(tuple(scaled(op) for op in sub) for sub in policy.subpolicies))


def format_policy(policy: AugPolicy) -> str:
    header = f"{'':<13}{'Op 1':<12}{'Prob':>6}{'Mag':>6}  {'Op 2':<12}{'Prob':>6}{'Mag':>6}"
    lines = [header]
    for i, (a, b) in enumerate(policy.subpolicies, 1):
        lines.append(f"{'Sub-policy ' + str(i):<13}{a.kind:<12}{a.prob:>6g}{a.magnitude:>6g}  "
                     f"{b.kind:<12}{b.prob:>6g}{b.magnitude:>6g}")
    return "\n".join(lines)


# --------------------------------------------------------------------------
# binary PPM

_PPM_HEADER = re.compile(rb"\AP6\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s")


def decode_ppm(data: bytes) -> np.ndarray:
    m = _PPM_HEADER.match(data)
    if not m:
        raise ValueError("not a binary PPM (P6) image")
    w, h, maxval = (int(g) for g in m.groups())
    if maxval != 255:
        raise ValueError(f"only maxval 255 is supported, got {maxval}")
    body = data[m.end():]
    if len(body) < 3 * w * h:
        raise ValueError(f"PPM body truncated: {len(body)} of {3 * w * h} bytes")
    return np.frombuffer(body[: 3 * w * h], np.uint8).reshape(h, w, 3).copy()


def encode_ppm(img) -> bytes:
    img = _check_image(img)
    h, w = img.shape[:2]
    return f"P6\n{w} {h}\n255\n".encode() + img.tobytes()


def read_ppm(path) -> np.ndarray:
    return decode_ppm(Path(path).read_bytes())


def write_ppm(path, img):
    Path(path).write_bytes(encode_ppm(img))
