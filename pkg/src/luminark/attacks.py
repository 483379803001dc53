"""Image transformations used to probe watermark robustness.

Each attack takes and returns an RGB float image in [0, 1]. Internally the
image is quantized to 8 bits and handed to OpenCV / Pillow in the same way as
the reference attack code, so parameters below are the reference ones.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from enum import Enum

import cv2
import numpy as np
from PIL import Image, ImageEnhance, ImageFilter

from .core import derive_seed, from_uint8, to_uint8


class AttackKind(str, Enum):
    SCALING = "scaling"
    CROPPING = "cropping"
    JPEG = "jpeg"
    MEDIAN_FILTER = "median_filter"
    GAUSSIAN_BLUR = "gaussian_blur"
    COLOR_JITTER = "color_jitter"
    COLOR_QUANTIZATION = "color_quantization"
    GAUSSIAN_NOISE = "gaussian_noise"
    UNSHARP_MASK = "unsharp_mask"
    HORIZONTAL_FLIP = "horizontal_flip"


BATTERY = (
    AttackKind.SCALING,
    AttackKind.CROPPING,
    AttackKind.JPEG,
    AttackKind.MEDIAN_FILTER,
    AttackKind.GAUSSIAN_BLUR,
    AttackKind.COLOR_JITTER,
    AttackKind.COLOR_QUANTIZATION,
    AttackKind.GAUSSIAN_NOISE,
    AttackKind.UNSHARP_MASK,
)

STOCHASTIC = {AttackKind.COLOR_JITTER, AttackKind.GAUSSIAN_NOISE, AttackKind.COLOR_QUANTIZATION}

DEFAULT_PARAMS: dict[AttackKind, dict] = {
    AttackKind.SCALING: {"size": 96},
    AttackKind.CROPPING: {"border": 2},
    AttackKind.JPEG: {"quality": 50},
    AttackKind.MEDIAN_FILTER: {"ksize": 11},
    AttackKind.GAUSSIAN_BLUR: {"ksize": 9, "sigma": 15.0},
    AttackKind.COLOR_JITTER: {"factor": 0.1},
    AttackKind.COLOR_QUANTIZATION: {"colors": 64, "max_iter": 20, "eps": 1.0, "attempts": 10},
    AttackKind.GAUSSIAN_NOISE: {"std": 25.0},
    AttackKind.UNSHARP_MASK: {"radius": 5, "percent": 300},
    AttackKind.HORIZONTAL_FLIP: {},
}


@dataclass(frozen=True)
class AttackSpec:
    kind: AttackKind
    params: dict = field(default_factory=dict)
    seed: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", AttackKind(self.kind))
        merged = {**DEFAULT_PARAMS[self.kind], **self.params}
        object.__setattr__(self, "params", merged)


def _rgb_to_bgr(u8: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(u8[:, :, ::-1])


def _scaling(u8, size):
    h, w = u8.shape[:2]
    small = cv2.resize(u8, (size, size), interpolation=cv2.INTER_LINEAR)
    return cv2.resize(small, (w, h), interpolation=cv2.INTER_LINEAR)


def _cropping(u8, border):
    h, w = u8.shape[:2]
    cropped = np.ascontiguousarray(u8[border:-border, border:-border])
    return cv2.resize(cropped, (w, h), interpolation=cv2.INTER_LINEAR)


def _jpeg(u8, quality):
    buf = io.BytesIO()
    Image.fromarray(u8, mode="RGB").save(buf, format="JPEG", quality=quality)
    buf.seek(0)
    with Image.open(buf) as im:
        return np.asarray(im.convert("RGB")).copy()


def _color_jitter(u8, factor, rng):
    bgr = _rgb_to_bgr(u8)
    hsv = cv2.cvtColor(bgr, cv2.COLOR_BGR2HSV).astype(np.float32)
    hsv[:, :, 0] *= 1 + rng.uniform(-factor, factor)
    hsv[:, :, 1] *= 1 + rng.uniform(-factor, factor)
    hsv[:, :, 2] *= 1 + rng.uniform(-factor, factor)
    # hue clipped at 179 rather than wrapped, as in the reference code
    np.clip(hsv[:, :, 0], 0, 179, out=hsv[:, :, 0])
    np.clip(hsv[:, :, 1:], 0, 255, out=hsv[:, :, 1:])
    jittered = cv2.cvtColor(hsv.astype(np.uint8), cv2.COLOR_HSV2BGR)
    pil = Image.fromarray(np.ascontiguousarray(jittered[:, :, ::-1]), mode="RGB")
    out = ImageEnhance.Contrast(pil).enhance(1 + rng.uniform(-factor, factor))
    return np.asarray(out).copy()


def _color_quantization(u8, colors, max_iter, eps, attempts, seed):
    lab = cv2.cvtColor(_rgb_to_bgr(u8), cv2.COLOR_BGR2LAB)
    data = np.float32(lab.reshape(-1, 3))
    criteria = (cv2.TERM_CRITERIA_EPS + cv2.TERM_CRITERIA_MAX_ITER, max_iter, eps)
    cv2.setRNGSeed(seed & 0x7FFFFFFF)
    _, labels, centers = cv2.kmeans(data, colors, None, criteria, attempts, cv2.KMEANS_RANDOM_CENTERS)
    quant = np.uint8(centers)[labels.ravel()].reshape(lab.shape)
    return cv2.cvtColor(quant, cv2.COLOR_LAB2BGR)[:, :, ::-1]


def _gaussian_noise(u8, std, rng):
    noisy = u8.astype(np.float64) + rng.normal(0.0, std, u8.shape)
    return np.clip(np.floor(noisy + 0.5), 0, 255).astype(np.uint8)


def _unsharp(u8, radius, percent):
    pil = Image.fromarray(u8, mode="RGB")
    return np.asarray(pil.filter(ImageFilter.UnsharpMask(radius=radius, percent=percent))).copy()


def apply_attack(image: np.ndarray, spec: AttackSpec) -> np.ndarray:
    """Apply one attack; output has the input's shape with values in [0, 1]."""
    if image.ndim != 3 or image.size == 0:
        raise ValueError(f"expected a nonempty HxWx3 image, got {image.shape}")
    u8 = np.ascontiguousarray(to_uint8(image))
    p = spec.params
    kind = spec.kind
    seed = spec.seed if spec.seed is not None else 0
    rng = np.random.default_rng(seed)
    if kind is AttackKind.SCALING:
        out = _scaling(u8, p["size"])
    elif kind is AttackKind.CROPPING:
        out = _cropping(u8, p["border"])
    elif kind is AttackKind.JPEG:
        out = _jpeg(u8, p["quality"])
    elif kind is AttackKind.MEDIAN_FILTER:
        out = cv2.medianBlur(u8, p["ksize"])
    elif kind is AttackKind.GAUSSIAN_BLUR:
        out = cv2.GaussianBlur(u8, (p["ksize"], p["ksize"]), p["sigma"])
    elif kind is AttackKind.COLOR_JITTER:
        out = _color_jitter(u8, p["factor"], rng)
    elif kind is AttackKind.COLOR_QUANTIZATION:
        out = _color_quantization(u8, p["colors"], p["max_iter"], p["eps"], p["attempts"], seed)
    elif kind is AttackKind.GAUSSIAN_NOISE:
        out = _gaussian_noise(u8, p["std"], rng)
    elif kind is AttackKind.UNSHARP_MASK:
        out = _unsharp(u8, p["radius"], p["percent"])
    elif kind is AttackKind.HORIZONTAL_FLIP:
        out = u8[:, ::-1]
    else:  # pragma: no cover
        raise ValueError(f"unknown attack {kind}")
    return from_uint8(np.ascontiguousarray(out))


def attack_battery(image: np.ndarray, seed: int, kinds=BATTERY) -> dict[str, np.ndarray]:
    """Apply several attacks; each kind draws from its own child seed of ``seed``."""
    order = list(AttackKind)
    out = {}
    for kind in kinds:
        kind = AttackKind(kind)
        out[kind.value] = apply_attack(image, AttackSpec(kind, seed=derive_seed(seed, order.index(kind))))
    return out
