"""Image-space watermark injection: penalty descent and hard projection."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import WatermarkKey, binary_pattern, patch_luminance, to_uint8
from .penalty import expand_patches, penalty


_TIE_GUARD = 1e-9
# rounding allowance on the margin test, so a step computed to land exactly on
# tau + margin counts as landed
_MARGIN_SLACK = 1e-12


def luminance_step(eta: float, key: WatermarkKey) -> float:
    """Luminance change of a violated patch after one unclamped descent step."""
    return eta * key.weights.sq_norm / key.layout.patch_size ** 2


def step_for_luminance(delta: float, key: WatermarkKey) -> float:
    """Step size whose single descent step moves a violated patch by ``delta``."""
    return delta * key.layout.patch_size ** 2 / key.weights.sq_norm


@dataclass(frozen=True)
class InjectionConfig:
    step_size: float | None = None  # None: move violated patches by 0.005 per step
    max_iterations: int = 500
    margin: float = 0.0
    target_match_rate: float = 1.0
    clamp: bool = True

    def __post_init__(self):
        if self.step_size is not None and self.step_size <= 0:
            raise ValueError("step_size must be positive")
        if self.margin < 0:
            raise ValueError("margin must be nonnegative")
        if not 0 < self.target_match_rate <= 1:
            raise ValueError("target_match_rate must lie in (0, 1]")
        if self.max_iterations < 0:
            raise ValueError("max_iterations must be nonnegative")


@dataclass
class InjectionResult:
    image: np.ndarray
    iterations_used: int
    final_match_rate: float
    psnr_db: float
    success: bool
    penalty_value: float = 0.0
    clamp_bound: list[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "iterations_used": self.iterations_used,
            "final_match_rate": self.final_match_rate,
            "psnr_db": "inf" if math.isinf(self.psnr_db) else self.psnr_db,
            "success": self.success,
            "penalty_value": self.penalty_value,
            "clamp_bound": self.clamp_bound,
        }


def psnr(reference: np.ndarray, candidate: np.ndarray) -> float:
    """PSNR in dB on 8-bit quantized values; ``inf`` for identical images."""
    if reference.shape != candidate.shape:
        raise ValueError(f"shape mismatch {reference.shape} vs {candidate.shape}")
    a = to_uint8(reference).astype(np.float64)
    b = to_uint8(candidate).astype(np.float64)
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(255.0**2 / mse)


def satisfied_fraction(image: np.ndarray, key: WatermarkKey, margin: float) -> float:
    """Fraction of patches whose bit matches and whose slack is at least ``margin``."""
    lum = patch_luminance(image, key.layout, key.weights)
    bits = np.where(lum - key.tau >= 0, 1, -1)
    ok = bits == key.c
    if margin > 0:
        ok &= key.c * (lum - key.tau) >= margin - _MARGIN_SLACK
    return float(np.count_nonzero(ok)) / key.num_patches


def inject_posthoc_gd(image: np.ndarray, key: WatermarkKey, cfg: InjectionConfig) -> InjectionResult:
    """Descend the hinge penalty until enough patches hold with the margin."""
    key.layout.check(image)
    eta = cfg.step_size if cfg.step_size is not None else step_for_luminance(0.005, key)
    x = np.array(image, dtype=np.float64)
    it = 0
    while satisfied_fraction(x, key, cfg.margin) < cfg.target_match_rate and it < cfg.max_iterations:
        ev = penalty(x, key, cfg.margin)
        if ev.value == 0:
            break
        x -= eta * ev.gradient
        if cfg.clamp:
            np.clip(x, 0.0, 1.0, out=x)
        it += 1
    final_sat = satisfied_fraction(x, key, cfg.margin)
    rate = float(np.count_nonzero(binary_pattern(x, key) == key.c)) / key.num_patches
    return InjectionResult(
        image=x,
        iterations_used=it,
        final_match_rate=rate,
        psnr_db=psnr(image, x),
        success=final_sat >= cfg.target_match_rate and rate >= cfg.target_match_rate,
        penalty_value=penalty(x, key, cfg.margin).value,
    )


def projection_shift(
    image: np.ndarray, key: WatermarkKey, margin: float = 0.0, fraction: float = 1.0
) -> np.ndarray:
    """Per-patch uniform shift that lands each enforced violated patch at tau + margin.

    ``fraction`` < 1 enforces only that share of violated patches, largest
    violation first.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("fraction must lie in [0, 1]")
    lum = patch_luminance(image, key.layout, key.weights)
    terms = key.c * (key.tau - lum) + margin
    tie = (terms == 0) & (key.c == -1) & (margin == 0)
    idx = np.flatnonzero((terms > 0) | tie)
    n_enforce = math.ceil(fraction * idx.size)
    if n_enforce < idx.size:
        order = np.argsort(-terms[idx], kind="stable")
        idx = idx[order[:n_enforce]]
    shift = np.zeros(key.num_patches)
    # terms equals |tau_i - l_i| + margin on the wrong side of tau; the guard keeps
    # a c_i = -1 patch strictly below tau when margin is 0 (sgn(0) = +1)
    terms = terms + _TIE_GUARD
    shift[idx] = key.c[idx] * terms[idx] / key.weights.total
    return shift


def inject_hard_projection(
    image: np.ndarray,
    key: WatermarkKey,
    margin: float = 0.0,
    fraction: float = 1.0,
    clamp: bool = True,
) -> tuple[np.ndarray, list[int]]:
    """Shift all channels of each violated patch by a constant so it meets its constraint.

    Returns the new image and the indices of patches where clamping changed
    the shifted values.
    """
    key.layout.check(image)
    shift = projection_shift(image, key, margin, fraction)
    out = image + expand_patches(shift, key)[:, :, None]
    clamp_bound: list[int] = []
    if clamp:
        clipped = np.clip(out, 0.0, 1.0)
        changed = np.any(clipped != out, axis=2)
        k = key.layout.patch_size
        lay = key.layout
        per_patch = changed.reshape(lay.rows, k, lay.cols, k).any(axis=(1, 3)).ravel()
        clamp_bound = [int(i) for i in np.flatnonzero(per_patch & (shift != 0))]
        out = clipped
    return out, clamp_bound
