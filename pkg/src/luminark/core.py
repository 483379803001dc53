"""Watermark keys, patch grids and luminance statistics.

Images are plain ``float64`` arrays of shape ``(H, W, 3)`` in RGB order with
values in ``[0, 1]``. Patches are indexed row-major from 0 (top-left) to
``N - 1`` (bottom-right).
"""

from __future__ import annotations

import json
import math
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

KEY_FORMAT_VERSION = 1

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1


class LayoutError(ValueError):
    """Image dimensions do not fit the patch grid."""


class KeyFormatError(ValueError):
    """A watermark key violates its invariants."""


# ---------------------------------------------------------------------------
# SplitMix64


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


def splitmix64(seed: int, n: int, offset: int = 0) -> np.ndarray:
    """Outputs ``offset .. offset+n-1`` of the SplitMix64 stream started at ``seed``.

    SplitMix64 is counter based, so the i-th output is ``mix(seed + (i+1)*gamma)``
    and a whole block can be produced without a Python loop.
    """
    seed = int(seed) & _MASK64
    counters = np.arange(offset + 1, offset + n + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        state = np.uint64(seed) + counters * _GOLDEN
        return _mix(state)


def derive_seed(seed: int, index: int) -> int:
    """Child seed number ``index`` of ``seed`` (one stream output)."""
    return int(splitmix64(seed, 1, offset=index)[0])


class SplitMix64:
    """Stateful wrapper drawing consecutive blocks of the stream."""

    def __init__(self, seed: int):
        if not 0 <= int(seed) <= _MASK64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = int(seed)
        self.position = 0

    def next_u64(self, n: int) -> np.ndarray:
        out = splitmix64(self.seed, n, offset=self.position)
        self.position += n
        return out

    def uniform(self, n: int) -> np.ndarray:
        """Doubles in ``[0, 1)`` from the top 53 bits of each output."""
        return (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def normal(self, n: int) -> np.ndarray:
        """Standard normal draws by Box-Muller, two per pair of outputs."""
        pairs = (n + 1) // 2
        u = self.uniform(2 * pairs)
        radius = np.sqrt(-2.0 * np.log(1.0 - u[0::2]))
        angle = 2.0 * np.pi * u[1::2]
        z = np.empty(2 * pairs)
        z[0::2] = radius * np.cos(angle)
        z[1::2] = radius * np.sin(angle)
        return z[:n]

    def exponential(self, n: int) -> np.ndarray:
        return -np.log1p(-self.uniform(n))


# ---------------------------------------------------------------------------
# Domain types


@dataclass(frozen=True)
class PatchLayout:
    height: int
    width: int
    patch_size: int

    def __post_init__(self):
        if self.patch_size <= 0 or self.height <= 0 or self.width <= 0:
            raise LayoutError(f"non-positive layout dimensions: {self}")
        if self.height % self.patch_size or self.width % self.patch_size:
            raise LayoutError(
                f"{self.height}x{self.width} is not divisible by patch size {self.patch_size}"
            )

    @property
    def rows(self) -> int:
        return self.height // self.patch_size

    @property
    def cols(self) -> int:
        return self.width // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.rows * self.cols

    def patch_slices(self, index: int) -> tuple[slice, slice]:
        if not 0 <= index < self.num_patches:
            raise IndexError(f"patch index {index} out of range")
        k = self.patch_size
        r, c = divmod(index, self.cols)
        return slice(r * k, (r + 1) * k), slice(c * k, (c + 1) * k)

    def check(self, image: np.ndarray) -> None:
        if image.ndim != 3 or image.shape[2] != 3:
            raise LayoutError(f"expected an HxWx3 image, got shape {image.shape}")
        if image.shape[:2] != (self.height, self.width):
            raise LayoutError(
                f"image is {image.shape[0]}x{image.shape[1]}, layout expects "
                f"{self.height}x{self.width}"
            )

    def mirror_permutation(self) -> np.ndarray:
        """Patch index map induced by a horizontal flip."""
        grid = np.arange(self.num_patches).reshape(self.rows, self.cols)
        return grid[:, ::-1].ravel()


@dataclass(frozen=True)
class ChannelWeights:
    r: float
    g: float
    b: float

    def __post_init__(self):
        ws = (self.r, self.g, self.b)
        if any(not math.isfinite(w) or w < 0 for w in ws) or sum(ws) == 0:
            raise ValueError(f"channel weights must be nonnegative and not all zero: {ws}")

    def as_array(self) -> np.ndarray:
        return np.array([self.r, self.g, self.b], dtype=np.float64)

    @property
    def total(self) -> float:
        return math.fsum((self.r, self.g, self.b))

    @property
    def sq_norm(self) -> float:
        return self.r * self.r + self.g * self.g + self.b * self.b

    @classmethod
    def variant(cls, name: str, seed: int | None = None) -> "ChannelWeights":
        """Ablation presets: luminance, R, G, B, average, random."""
        name = name.lower()
        if name == "random":
            if seed is None:
                raise ValueError("the random weight variant needs a seed")
            e = SplitMix64(seed).exponential(3)
            e = e / e.sum()
            return cls(float(e[0]), float(e[1]), float(e[2]))
        try:
            return _PRESETS[name]
        except KeyError:
            raise ValueError(f"unknown channel-weight variant {name!r}") from None


LUMINANCE = ChannelWeights(0.299, 0.587, 0.114)

_PRESETS = {
    "luminance": LUMINANCE,
    "r": ChannelWeights(1.0, 0.0, 0.0),
    "g": ChannelWeights(0.0, 1.0, 0.0),
    "b": ChannelWeights(0.0, 0.0, 1.0),
    "average": ChannelWeights(1 / 3, 1 / 3, 1 / 3),
}

WEIGHT_VARIANTS = ("luminance", "r", "g", "b", "average", "random")


@dataclass(frozen=True, eq=False)
class WatermarkKey:
    """Secret pattern ``c`` in {-1, +1} and per-patch thresholds ``tau``."""

    layout: PatchLayout
    c: np.ndarray
    tau: np.ndarray
    weights: ChannelWeights = LUMINANCE
    seed: int = 0

    def __post_init__(self):
        c = np.asarray(self.c, dtype=np.int8).copy()
        tau = np.asarray(self.tau, dtype=np.float64).copy()
        n = self.layout.num_patches
        if c.shape != (n,) or tau.shape != (n,):
            raise KeyFormatError(f"key vectors must have length {n}")
        if not np.all((c == 1) | (c == -1)):
            raise KeyFormatError("pattern entries must be -1 or +1")
        if not np.all((tau > 0) & (tau < 1)):
            raise KeyFormatError("thresholds must lie strictly inside (0, 1)")
        if not 0 <= int(self.seed) <= _MASK64:
            raise KeyFormatError("seed must be a 64-bit unsigned integer")
        c.setflags(write=False)
        tau.setflags(write=False)
        object.__setattr__(self, "c", c)
        object.__setattr__(self, "tau", tau)
        object.__setattr__(self, "seed", int(self.seed))

    @property
    def num_patches(self) -> int:
        return self.layout.num_patches

    def __eq__(self, other):
        if not isinstance(other, WatermarkKey):
            return NotImplemented
        return (
            self.layout == other.layout
            and self.weights == other.weights
            and self.seed == other.seed
            and np.array_equal(self.c, other.c)
            and np.array_equal(self.tau, other.tau)
        )

    def __hash__(self):
        return hash((self.layout, self.weights, self.seed, self.c.tobytes(), self.tau.tobytes()))

    def to_dict(self) -> dict:
        # '#.17g' keeps 17 significant digits (trailing zeros included), exact round trip
        return {
            "version": KEY_FORMAT_VERSION,
            "seed": self.seed,
            "height": self.layout.height,
            "width": self.layout.width,
            "patch_size": self.layout.patch_size,
            "weights": [self.weights.r, self.weights.g, self.weights.b],
            "c": [int(v) for v in self.c],
            "tau": [format(float(t), "#.17g") for t in self.tau],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "WatermarkKey":
        if data.get("version") != KEY_FORMAT_VERSION:
            raise KeyFormatError(f"unsupported key version {data.get('version')!r}")
        try:
            layout = PatchLayout(int(data["height"]), int(data["width"]), int(data["patch_size"]))
            weights = ChannelWeights(*(float(w) for w in data["weights"]))
            tau = [float(t) for t in data["tau"]]
            c = [int(v) for v in data["c"]]
            seed = int(data["seed"])
        except (KeyError, TypeError, ValueError) as exc:
            raise KeyFormatError(f"malformed key file: {exc}") from exc
        return cls(layout=layout, c=np.array(c), tau=np.array(tau), weights=weights, seed=seed)

    def save(self, path: str | os.PathLike) -> None:
        # key files are secret: owner read/write only
        atomic_write_text(path, json.dumps(self.to_dict(), indent=2) + "\n", mode=0o600)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "WatermarkKey":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def generate_key(
    seed: int,
    layout: PatchLayout,
    weights: ChannelWeights = LUMINANCE,
    tau_low: float = 0.4,
    tau_high: float = 0.6,
) -> WatermarkKey:
    """Draw a key from SplitMix64: one output per pattern bit, then one per threshold.

    A bit is +1 when the top bit of its output is set. Thresholds are
    ``tau_low + (tau_high - tau_low) * u`` with ``u`` from the top 53 bits.
    """
    if not 0.0 < tau_low < tau_high < 1.0:
        raise ValueError(f"need 0 < tau_low < tau_high < 1, got [{tau_low}, {tau_high}]")
    n = layout.num_patches
    rng = SplitMix64(seed)
    c = np.where((rng.next_u64(n) >> np.uint64(63)) == 1, 1, -1).astype(np.int8)
    tau = tau_low + (tau_high - tau_low) * rng.uniform(n)
    return WatermarkKey(layout=layout, c=c, tau=tau, weights=weights, seed=seed)


def generate_key_arrays(
    seeds: np.ndarray, n: int, tau_low: float = 0.4, tau_high: float = 0.6
) -> tuple[np.ndarray, np.ndarray]:
    """Patterns and thresholds for many seeds at once, identical to :func:`generate_key`.

    Returns ``c`` of shape ``(len(seeds), n)`` and ``tau`` of the same shape.
    """
    if not 0.0 < tau_low < tau_high < 1.0:
        raise ValueError(f"need 0 < tau_low < tau_high < 1, got [{tau_low}, {tau_high}]")
    seeds = np.asarray(seeds, dtype=np.uint64).reshape(-1, 1)
    counters = np.arange(1, 2 * n + 1, dtype=np.uint64).reshape(1, -1)
    with np.errstate(over="ignore"):
        out = _mix(seeds + counters * _GOLDEN)
    c = np.where((out[:, :n] >> np.uint64(63)) == 1, 1, -1).astype(np.int8)
    u = (out[:, n:] >> np.uint64(11)).astype(np.float64) * 2.0**-53
    return c, tau_low + (tau_high - tau_low) * u


# ---------------------------------------------------------------------------
# Patch statistics


def partition(image: np.ndarray, layout: PatchLayout) -> list[np.ndarray]:
    """Row-major list of patch views (no copies)."""
    layout.check(image)
    return [image[layout.patch_slices(i)] for i in range(layout.num_patches)]


def reassemble(patches: Sequence[np.ndarray], layout: PatchLayout) -> np.ndarray:
    out = np.empty((layout.height, layout.width, 3), dtype=np.asarray(patches[0]).dtype)
    for i, p in enumerate(patches):
        out[layout.patch_slices(i)] = p
    return out


def luminance(patch: np.ndarray, weights: ChannelWeights = LUMINANCE) -> float:
    if patch.size == 0:
        raise ValueError("empty patch")
    means = patch.reshape(-1, 3).mean(axis=0)
    return float(means @ weights.as_array())


def patch_means(image: np.ndarray, layout: PatchLayout) -> np.ndarray:
    """Per-patch channel means, shape ``(N, 3)``."""
    layout.check(image)
    k = layout.patch_size
    blocks = image.reshape(layout.rows, k, layout.cols, k, 3)
    return blocks.mean(axis=(1, 3)).reshape(-1, 3)


def patch_luminance(
    image: np.ndarray, layout: PatchLayout, weights: ChannelWeights = LUMINANCE
) -> np.ndarray:
    return patch_means(image, layout) @ weights.as_array()


def signs(values: np.ndarray) -> np.ndarray:
    """sgn with sgn(0) = +1."""
    return np.where(values >= 0, 1, -1).astype(np.int8)


def binary_pattern(image: np.ndarray, key: WatermarkKey) -> np.ndarray:
    lum = patch_luminance(image, key.layout, key.weights)
    return signs(lum - key.tau)


def match_count(image: np.ndarray, key: WatermarkKey) -> int:
    return int(np.count_nonzero(binary_pattern(image, key) == key.c))


def match_rate(image: np.ndarray, key: WatermarkKey) -> float:
    return match_count(image, key) / key.num_patches


# ---------------------------------------------------------------------------
# Image I/O


def check_image(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3 or image.shape[0] == 0 or image.shape[1] == 0:
        raise ValueError(f"expected a nonempty HxWx3 image, got shape {image.shape}")
    return image


def to_uint8(image: np.ndarray) -> np.ndarray:
    """round(value * 255) clamped to [0, 255]; halves round up."""
    return np.clip(np.floor(np.asarray(image) * 255.0 + 0.5), 0, 255).astype(np.uint8)


def from_uint8(image: np.ndarray) -> np.ndarray:
    return np.asarray(image, dtype=np.float64) / 255.0


def quantize(image: np.ndarray) -> np.ndarray:
    return from_uint8(to_uint8(image))


def load_image(path: str | os.PathLike) -> np.ndarray:
    with Image.open(path) as im:
        return from_uint8(np.asarray(im.convert("RGB")))


def _umask_mode() -> int:
    mask = os.umask(0)
    os.umask(mask)
    return 0o666 & ~mask


def save_png(path: str | os.PathLike, image: np.ndarray) -> None:
    data = to_uint8(image)
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=".tmp-", suffix=".png")
    os.close(fd)
    try:
        Image.fromarray(data, mode="RGB").save(tmp, format="PNG")
        os.chmod(tmp, _umask_mode())
        os.replace(tmp, path)
    except BaseException:
        os.unlink(tmp)
        raise


def atomic_write_text(path: str | os.PathLike, text: str, mode: int | None = None) -> None:
    """Write via a temp file and rename; ``mode`` defaults to what the umask allows."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=".tmp-")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.chmod(tmp, _umask_mode() if mode is None else mode)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def resize_to_grid(image: np.ndarray, patch_size: int) -> np.ndarray:
    """Bilinear resize to the nearest dimensions divisible by ``patch_size``."""
    import cv2

    h, w = image.shape[:2]
    nh = max(patch_size, int(round(h / patch_size)) * patch_size)
    nw = max(patch_size, int(round(w / patch_size)) * patch_size)
    if (nh, nw) == (h, w):
        return image
    u8 = to_uint8(image)
    return from_uint8(cv2.resize(u8, (nw, nh), interpolation=cv2.INTER_LINEAR))
