"""Certified luminance-pattern watermarks with calibrated detection."""

__version__ = "0.1.0"

from .certify import (
    CalibratedThreshold,
    DetectionReport,
    UnachievableFPR,
    calibrate_threshold,
    detect,
    detect_with_flip,
    flip_threshold,
    kl_tail_bound,
    tail_probability,
)
from .core import (
    LUMINANCE,
    ChannelWeights,
    KeyFormatError,
    LayoutError,
    PatchLayout,
    WatermarkKey,
    binary_pattern,
    generate_key,
    load_image,
    match_rate,
    patch_luminance,
    save_png,
)
from .diffusion import (
    LinearDecoder,
    MixturePrior,
    build_schedule,
    sample_guided,
    sample_guided_latent,
    sample_hard_stepwise,
    sample_unguided,
)
from .injector import InjectionConfig, inject_hard_projection, inject_posthoc_gd, psnr
from .penalty import penalty

__all__ = [
    "CalibratedThreshold", "ChannelWeights", "DetectionReport", "InjectionConfig", "KeyFormatError",
    "LUMINANCE", "LayoutError", "LinearDecoder", "MixturePrior", "PatchLayout", "UnachievableFPR",
    "WatermarkKey", "binary_pattern", "build_schedule", "calibrate_threshold", "detect",
    "detect_with_flip", "flip_threshold", "generate_key", "inject_hard_projection",
    "inject_posthoc_gd", "kl_tail_bound", "load_image", "match_rate", "patch_luminance", "penalty",
    "psnr", "sample_guided", "sample_guided_latent", "sample_hard_stepwise", "sample_unguided",
    "save_png", "tail_probability",
]
