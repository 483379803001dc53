"""Hinge penalty on per-patch luminance constraints and its exact gradient."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import WatermarkKey, patch_luminance


@dataclass(frozen=True)
class PenaltyEval:
    value: float
    gradient: np.ndarray  # (H, W, 3)
    violated: np.ndarray  # (N,) bool
    terms: np.ndarray  # (N,) hinge arguments c_i (tau_i - l_i) + margin


def hinge_terms(image: np.ndarray, key: WatermarkKey, margin: float = 0.0) -> np.ndarray:
    lum = patch_luminance(image, key.layout, key.weights)
    return key.c * (key.tau - lum) + margin


def expand_patches(values: np.ndarray, key: WatermarkKey) -> np.ndarray:
    """Broadcast per-patch scalars to an (H, W) field."""
    lay = key.layout
    k = lay.patch_size
    grid = values.reshape(lay.rows, lay.cols)
    return np.repeat(np.repeat(grid, k, axis=0), k, axis=1)


def penalty(image: np.ndarray, key: WatermarkKey, margin: float = 0.0) -> PenaltyEval:
    """Sum of max(0, c_i (tau_i - l_i) + margin) with its analytic gradient.

    Every pixel of a violated patch gets ``-c_i * w / k**2``; at a hinge term
    of exactly zero the contribution is zero.
    """
    if margin < 0 or not math.isfinite(margin):
        raise ValueError(f"margin must be a nonnegative real, got {margin}")
    terms = hinge_terms(image, key, margin)
    violated = terms > 0
    value = math.fsum(terms[violated])
    k2 = key.layout.patch_size ** 2
    per_patch = np.where(violated, -key.c / k2, 0.0)
    gradient = expand_patches(per_patch, key)[:, :, None] * key.weights.as_array()
    return PenaltyEval(value=value, gradient=gradient, violated=violated, terms=terms)


def surrogate_gap(image: np.ndarray, key: WatermarkKey) -> tuple[float, int]:
    """Penalty value and the number of violated patches at margin 0."""
    ev = penalty(image, key, 0.0)
    return ev.value, int(np.count_nonzero(ev.violated))
