"""Exact binomial p-values, threshold calibration and certified detection."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from fractions import Fraction
from functools import lru_cache

import numpy as np

from .core import WatermarkKey, binary_pattern, patch_luminance, signs


class UnachievableFPR(ValueError):
    """The target false-positive rate is below the 2**-N floor."""


@lru_cache(maxsize=256)
def _tail_counts(n: int) -> tuple[int, ...]:
    # suffix sums of binomial coefficients, exact integers
    out = [0] * (n + 2)
    for k in range(n, -1, -1):
        out[k] = out[k + 1] + math.comb(n, k)
    return tuple(out[: n + 1])


def tail_probability(n: int, k: int) -> float:
    """P[Binomial(n, 1/2) >= k], correctly rounded from the exact rational."""
    if n < 0 or not 0 <= k <= n:
        raise ValueError(f"need 0 <= k <= n, got n={n}, k={k}")
    return float(Fraction(_tail_counts(n)[k], 1 << n))


def p_value_ladder(n: int) -> list[tuple[int, float]]:
    return [(k, tail_probability(n, k)) for k in range(n + 1)]


@dataclass(frozen=True)
class CalibratedThreshold:
    n: int
    target_fpr: float
    k_star: int
    t_match: float
    p_at_k_star: float

    def to_dict(self) -> dict:
        return asdict(self)


def calibrate_threshold(n: int, target_fpr: float) -> CalibratedThreshold:
    """Smallest k whose tail probability is at most ``target_fpr``."""
    if not 0.0 < target_fpr < 1.0:
        raise ValueError(f"target fpr must lie in (0, 1), got {target_fpr}")
    if n < 1:
        raise ValueError("need at least one patch")
    for k in range(n + 1):
        p = tail_probability(n, k)
        if p <= target_fpr:
            return CalibratedThreshold(n, target_fpr, k, k / n, p)
    raise UnachievableFPR(
        f"fpr {target_fpr:g} is below the minimum 2^-{n} = {2.0**-n:.3g} for {n} patches"
    )


def kl_divergence_half(epsilon: float) -> float:
    """KL(Bernoulli(1/2 + eps) || Bernoulli(1/2)) in nats, with 0 ln 0 = 0."""
    if not 0.0 <= epsilon <= 0.5:
        raise ValueError(f"epsilon must lie in [0, 1/2], got {epsilon}")
    up = (0.5 + epsilon) * math.log1p(2 * epsilon)
    down = 0.0 if epsilon == 0.5 else (0.5 - epsilon) * math.log1p(-2 * epsilon)
    return up + down


def kl_tail_bound(n: int, epsilon: float) -> float:
    """Chernoff-Hoeffding bound exp(-n * KL) on P[match rate >= 1/2 + eps]."""
    d = kl_divergence_half(epsilon)
    if epsilon == 0.5:
        return math.ldexp(1.0, -n)
    return math.exp(-n * d)


@dataclass(frozen=True)
class DetectionReport:
    match_rate: float
    match_count: int
    threshold: CalibratedThreshold
    p_value: float
    decision: bool
    flip_used: bool = False
    flip_match_rate: float | None = None
    flip_match_count: int | None = None

    def to_dict(self) -> dict:
        return {
            "match_rate": self.match_rate,
            "match_count": self.match_count,
            "t_match": self.threshold.t_match,
            "p_value": self.p_value,
            "decision": self.decision,
            "flip_used": self.flip_used,
            "flip_match_rate": self.flip_match_rate,
        }


def _check(key: WatermarkKey, threshold: CalibratedThreshold) -> None:
    if threshold.n != key.num_patches:
        raise ValueError(
            f"threshold calibrated for {threshold.n} patches, key has {key.num_patches}"
        )


def detect(image: np.ndarray, key: WatermarkKey, threshold: CalibratedThreshold) -> DetectionReport:
    _check(key, threshold)
    count = int(np.count_nonzero(binary_pattern(image, key) == key.c))
    rate = count / key.num_patches
    return DetectionReport(
        match_rate=rate,
        match_count=count,
        threshold=threshold,
        p_value=tail_probability(key.num_patches, count),
        decision=rate >= threshold.t_match,
    )


def detect_with_flip(
    image: np.ndarray, key: WatermarkKey, threshold: CalibratedThreshold
) -> DetectionReport:
    """OR of detection on the image and on its horizontal mirror.

    ``p_value`` belongs to the branch with more matches; it is per-branch and
    does not include the factor-two union correction.
    """
    plain = detect(image, key, threshold)
    mirrored = detect(image[:, ::-1], key, threshold)
    best = max(plain.match_count, mirrored.match_count)
    return DetectionReport(
        match_rate=plain.match_rate,
        match_count=plain.match_count,
        threshold=threshold,
        p_value=tail_probability(key.num_patches, best),
        decision=plain.decision or mirrored.decision,
        flip_used=True,
        flip_match_rate=mirrored.match_rate,
        flip_match_count=mirrored.match_count,
    )


def flip_threshold(n: int, target_fpr: float) -> CalibratedThreshold:
    """Per-branch calibration at fpr/2 so the OR of two branches meets ``target_fpr``."""
    return calibrate_threshold(n, target_fpr / 2)


def match_counts_for_keys(lum: np.ndarray, c: np.ndarray, tau: np.ndarray) -> np.ndarray:
    """Vectorized match counts of one luminance vector against a stack of keys.

    ``c`` and ``tau`` have shape ``(num_keys, N)``.
    """
    bits = signs(lum[None, :] - tau)
    return np.count_nonzero(bits == c, axis=1)


def image_luminance(image: np.ndarray, key: WatermarkKey) -> np.ndarray:
    return patch_luminance(image, key.layout, key.weights)
