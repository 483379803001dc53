"""Experiment orchestration: FPR studies, robustness tables, ablations, reports.

Every number in a report is a deterministic function of the config (including
its seed). Trials are independent and may run in worker processes; results
are always aggregated in trial order, so the worker count never changes them.
Fidelity is measured by PSNR and L2 distance to the nearest template, not FID.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable, Iterable, Sequence

import cv2
import numpy as np
from scipy import stats

from .attacks import BATTERY, AttackKind, AttackSpec, apply_attack
from .certify import (
    CalibratedThreshold,
    calibrate_threshold,
    detect,
    detect_with_flip,
    flip_threshold,
    kl_tail_bound,
    tail_probability,
)
from .core import (
    ChannelWeights,
    PatchLayout,
    atomic_write_text,
    derive_seed,
    generate_key,
    generate_key_arrays,
    load_image,
    patch_luminance,
    quantize,
    splitmix64,
    to_uint8,
    from_uint8,
)
from .diffusion import (
    build_schedule,
    default_guidance_scale,
    sample_guided,
    sample_hard_stepwise,
    sample_unguided,
    toy_prior,
)
from .injector import InjectionConfig, inject_hard_projection, inject_posthoc_gd, psnr
from .templates import smooth_field

REPORT_VERSION = 1
IDENTITY = "identity"
INJECTION_MODES = ("gd", "guided", "project")
IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")

__all__ = [
    "ExperimentConfig",
    "RobustnessRow",
    "psnr",
    "run_ablation",
    "run_fpr_study",
    "run_robustness_table",
    "sweep_guidance_scale",
    "wilson_interval",
    "write_report",
]


def worker_count(requested: int | None = None) -> int:
    if requested is not None:
        return max(1, int(requested))
    return max(1, int(os.environ.get("LUMINARK_WORKERS", "1")))


def _map(fn: Callable, items: Sequence, workers: int) -> list:
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


@dataclass(frozen=True)
class ExperimentConfig:
    trials: int = 200
    seed: int = 0
    height: int = 512
    width: int = 512
    patch_size: int = 64
    fpr_target: float = 0.01
    injection: str = "gd"
    margin: float = 0.01
    attacks: tuple[str, ...] = (IDENTITY,) + tuple(k.value for k in BATTERY)
    weight_variant: str = "luminance"
    flip_or: bool = False
    flip_recalibrate: bool = True
    image_source: str = "procedural"
    replicates: int = 20
    guidance_scale: float | None = None
    fixed_images: int = 4
    workers: int | None = None

    def __post_init__(self):
        if self.trials < 1:
            raise ValueError("trials must be at least 1")
        if self.replicates < 1:
            raise ValueError("replicates must be at least 1")
        if self.injection not in INJECTION_MODES:
            raise ValueError(f"injection must be one of {INJECTION_MODES}")
        PatchLayout(self.height, self.width, self.patch_size)
        object.__setattr__(self, "attacks", tuple(self.attacks))
        for a in self.attacks:
            if a != IDENTITY:
                AttackKind(a)
        if self.weight_variant.lower() not in ("luminance", "r", "g", "b", "average", "random"):
            raise ValueError(f"unknown weight variant {self.weight_variant!r}")

    @property
    def layout(self) -> PatchLayout:
        return PatchLayout(self.height, self.width, self.patch_size)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["attacks"] = list(self.attacks)
        d.pop("workers")
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(**data)


def wilson_interval(successes: int, trials: int, confidence: float = 0.99) -> tuple[float, float]:
    ci = stats.binomtest(successes, trials).proportion_ci(confidence_level=confidence, method="wilson")
    return float(ci.low), float(ci.high)


def weights_for(variant: str, seed: int) -> ChannelWeights:
    return ChannelWeights.variant(variant, seed=seed if variant.lower() == "random" else None)


def _threshold(cfg: ExperimentConfig) -> CalibratedThreshold:
    n = cfg.layout.num_patches
    if cfg.flip_or and cfg.flip_recalibrate:
        return flip_threshold(n, cfg.fpr_target)
    return calibrate_threshold(n, cfg.fpr_target)


def _null_rate_bound(cfg: ExperimentConfig, th: CalibratedThreshold) -> float:
    """Guaranteed false-positive rate of the configured test (union bound with flip-OR)."""
    return min(1.0, 2 * th.p_at_k_star) if cfg.flip_or else th.p_at_k_star


# ---------------------------------------------------------------------------
# False-positive study


def run_fpr_study(cfg: ExperimentConfig) -> dict:
    """Detection rate of ``cfg.trials`` independent random keys on fixed unwatermarked images.

    Trial ``t`` uses key seed ``derive_seed(cfg.seed, t)`` against fixed image
    ``t mod cfg.fixed_images``. PASS when the Wilson 99% interval does not
    lie entirely above the guaranteed rate.
    """
    lay = cfg.layout
    n = lay.num_patches
    th = _threshold(cfg)
    weights = weights_for(cfg.weight_variant, derive_seed(cfg.seed, 1 << 20))
    images = [smooth_field(derive_seed(cfg.seed, (1 << 21) + j), lay.height, lay.width) for j in range(cfg.fixed_images)]
    lums = np.stack([patch_luminance(im, lay, weights) for im in images])
    mirrored = np.stack([patch_luminance(im[:, ::-1], lay, weights) for im in images])
    seeds = splitmix64(cfg.seed, cfg.trials)
    which = np.arange(cfg.trials) % cfg.fixed_images
    detections = 0
    counts_hist = np.zeros(n + 1, dtype=np.int64)
    for start in range(0, cfg.trials, 20000):
        sl = slice(start, min(cfg.trials, start + 20000))
        c, tau = generate_key_arrays(seeds[sl], n)
        idx = which[sl]
        bits = np.where(lums[idx] - tau >= 0, 1, -1)
        counts = np.count_nonzero(bits == c, axis=1)
        hit = counts >= th.k_star
        if cfg.flip_or:
            mbits = np.where(mirrored[idx] - tau >= 0, 1, -1)
            hit |= np.count_nonzero(mbits == c, axis=1) >= th.k_star
        detections += int(np.count_nonzero(hit))
        counts_hist += np.bincount(counts, minlength=n + 1)
    rate = detections / cfg.trials
    guaranteed = _null_rate_bound(cfg, th)
    low, high = wilson_interval(detections, cfg.trials)
    se = math.sqrt(guaranteed * (1 - guaranteed) / cfg.trials)
    eps = 0.25
    k_eps = math.ceil(n * (0.5 + eps))
    return {
        "version": REPORT_VERSION,
        "config": cfg.to_dict(),
        "num_patches": n,
        "k_star": th.k_star,
        "t_match": th.t_match,
        "p_at_k_star": th.p_at_k_star,
        "guaranteed_rate": guaranteed,
        "detections": detections,
        "empirical_rate": rate,
        "wilson99": [low, high],
        "three_se_band": [guaranteed - 3 * se, guaranteed + 3 * se],
        "pass": low <= guaranteed,
        "match_count_histogram": counts_hist.tolist(),
        "kl_check": {
            "epsilon": eps,
            "exact_tail": tail_probability(n, min(n, k_eps)),
            "bound": kl_tail_bound(n, eps),
            "empirical_tail": float(counts_hist[k_eps:].sum() / cfg.trials),
        },
    }


def verify_kl_bound(max_n: int = 64) -> list[tuple[int, int, float, float]]:
    """Exhaustive check of exact tail <= exp(-N KL) for all N <= max_n; returns violations."""
    bad = []
    for n in range(1, max_n + 1):
        for k in range(math.ceil(n / 2), n + 1):
            eps = k / n - 0.5
            t, b = tail_probability(n, k), kl_tail_bound(n, eps)
            if t > b:
                bad.append((n, k, t, b))
    return bad


# ---------------------------------------------------------------------------
# Robustness


@dataclass
class RobustnessRow:
    attack: str
    accuracy: float  # detection rate on watermarked images
    false_positives: int
    trials: int
    accuracy_std: float = 0.0
    balanced_accuracy: float = 0.0
    fp_bound: int = 0
    fp_within_bound: bool = True
    mean_match_watermarked: float = 0.0
    mean_match_clean: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


def _list_images(folder: str) -> list[Path]:
    return sorted(p for p in Path(folder).iterdir() if p.suffix.lower() in IMAGE_EXTENSIONS)


def _source_image(cfg: ExperimentConfig, trial_seed: int, index: int) -> np.ndarray:
    lay = cfg.layout
    if cfg.image_source == "procedural":
        return smooth_field(derive_seed(trial_seed, 0), lay.height, lay.width)
    if cfg.image_source == "prior":
        return sample_unguided(derive_seed(trial_seed, 0), build_schedule(), toy_prior(lay.height))
    files = _list_images(cfg.image_source)
    if not files:
        raise FileNotFoundError(f"no images in {cfg.image_source}")
    img = load_image(files[index % len(files)])
    if img.shape[:2] != (lay.height, lay.width):
        img = from_uint8(cv2.resize(to_uint8(img), (lay.width, lay.height), interpolation=cv2.INTER_LINEAR))
    return img


def _make_pair(cfg: ExperimentConfig, trial_seed: int, index: int, key, th) -> tuple[np.ndarray, np.ndarray, bool]:
    """(clean image, watermarked image, injection success)."""
    if cfg.injection == "guided":
        lay = cfg.layout
        prior = toy_prior(lay.height)
        sched = build_schedule()
        scale = cfg.guidance_scale or default_guidance_scale(lay.patch_size)
        s = derive_seed(trial_seed, 0)
        trace = sample_guided(s, sched, prior, key, scale, th, margin=cfg.margin)
        return sample_unguided(s, sched, prior), trace.image, trace.success
    clean = _source_image(cfg, trial_seed, index)
    if cfg.injection == "gd":
        res = inject_posthoc_gd(clean, key, InjectionConfig(margin=cfg.margin))
        return clean, res.image, res.success
    wm, _ = inject_hard_projection(clean, key, cfg.margin)
    return clean, wm, True


def _robustness_trial(args) -> dict:
    cfg, rep, rep_seed, t = args
    trial_seed = derive_seed(rep_seed, t)
    lay = cfg.layout
    weights = weights_for(cfg.weight_variant, derive_seed(trial_seed, 2))
    key = generate_key(derive_seed(trial_seed, 1), lay, weights)
    th = _threshold(cfg)
    try:
        clean, wm, ok = _make_pair(cfg, trial_seed, t, key, th)
    except (OSError, ValueError) as exc:
        return {"replicate": rep, "trial": t, "error": str(exc)}
    wm, clean = quantize(wm), quantize(clean)
    out = {"replicate": rep, "trial": t, "injected": ok, "attacks": {}}
    order = list(AttackKind)
    for name in cfg.attacks:
        if name == IDENTITY:
            a_wm, a_clean = wm, clean
        else:
            kind = AttackKind(name)
            s = derive_seed(trial_seed, 16 + order.index(kind))
            a_wm = apply_attack(wm, AttackSpec(kind, seed=s))
            a_clean = apply_attack(clean, AttackSpec(kind, seed=derive_seed(s, 1)))
        det = detect_with_flip if cfg.flip_or else detect
        r_wm, r_clean = det(a_wm, key, th), det(a_clean, key, th)
        out["attacks"][name] = (r_wm.decision, r_clean.decision, r_wm.match_rate, r_clean.match_rate)
    return out


def run_robustness_table(cfg: ExperimentConfig, details: dict | None = None) -> list[RobustnessRow]:
    """Inject, attack and detect over ``replicates x trials`` fresh keys and images.

    Every trial draws its own key so false positives on the clean class are
    Binomial(trials, p) under the calibration guarantee. Per-item failures are
    recorded in ``details['errors']`` and the run continues.
    """
    th = _threshold(cfg)
    jobs = [
        (cfg, r, derive_seed(cfg.seed, r), t) for r in range(cfg.replicates) for t in range(cfg.trials)
    ]
    results = _map(_robustness_trial, jobs, worker_count(cfg.workers))
    errors = [r for r in results if "error" in r]
    good = [r for r in results if "error" not in r]
    rows = []
    bound_rate = _null_rate_bound(cfg, th)
    for name in cfg.attacks:
        per_rep = []
        fp = 0
        mw, mc = [], []
        for r in range(cfg.replicates):
            chunk = [g for g in good if g["replicate"] == r]
            if not chunk:
                continue
            hits = [g["attacks"][name][0] for g in chunk]
            per_rep.append(float(np.mean(hits)))
            fp += sum(g["attacks"][name][1] for g in chunk)
            mw += [g["attacks"][name][2] for g in chunk]
            mc += [g["attacks"][name][3] for g in chunk]
        n_clean = len(good)
        acc = float(np.mean(per_rep)) if per_rep else 0.0
        fp_bound = int(stats.binom.ppf(0.999, n_clean, bound_rate)) if n_clean else 0
        rows.append(
            RobustnessRow(
                attack=name,
                accuracy=acc,
                false_positives=int(fp),
                trials=n_clean,
                accuracy_std=float(np.std(per_rep)) if per_rep else 0.0,
                balanced_accuracy=0.5 * (acc + (1 - fp / n_clean)) if n_clean else 0.0,
                fp_bound=fp_bound,
                fp_within_bound=fp <= fp_bound,
                mean_match_watermarked=float(np.mean(mw)) if mw else 0.0,
                mean_match_clean=float(np.mean(mc)) if mc else 0.0,
            )
        )
    if details is not None:
        details["errors"] = errors
        details["injection_failures"] = sum(1 for g in good if not g["injected"])
        details["threshold"] = th.to_dict()
    return rows


# ---------------------------------------------------------------------------
# Ablation

ABLATION_METHODS = ("guided", "hard_stepwise", "posthoc_projection")


def _ablation_trial(args) -> dict:
    cfg, variant, method, t, scale = args
    lay = cfg.layout
    trial_seed = derive_seed(cfg.seed, t)
    weights = weights_for(variant, derive_seed(trial_seed, 2))
    key = generate_key(derive_seed(trial_seed, 1), lay, weights)
    th = calibrate_threshold(lay.num_patches, cfg.fpr_target)
    prior = toy_prior(lay.height)
    sched = build_schedule()
    s = derive_seed(trial_seed, 0)
    reference = sample_unguided(s, sched, prior)
    retries = 1
    if method == "guided":
        trace = sample_guided(s, sched, prior, key, scale, th, margin=cfg.margin)
        img, retries = trace.image, trace.retries
    elif method == "hard_stepwise":
        img = sample_hard_stepwise(s, sched, prior, key, cfg.margin)
    else:
        img, _ = inject_hard_projection(reference, key, cfg.margin)
    img = quantize(img)
    return {
        "l2_to_template": prior.nearest_distance(img),
        "psnr_vs_unguided": psnr(reference, img),
        "detected": detect(img, key, th).decision,
        "retries": retries,
    }


def run_ablation(cfg: ExperimentConfig, variants: Sequence[str] | None = None,
                 methods: Sequence[str] = ABLATION_METHODS) -> dict:
    """Injection methods x channel-weight variants on the toy sampler.

    Checks the expected fidelity ordering (guided closer to the template
    manifold than hard step-wise projection) as a strict inequality of mean
    L2-to-nearest-template. The random-weight ordering is reported, not
    enforced.
    """
    variants = tuple(variants) if variants is not None else ("luminance", "r", "g", "b", "average", "random")
    scale = cfg.guidance_scale or default_guidance_scale(cfg.patch_size)
    jobs = [(cfg, v, m, t, scale) for v in variants for m in methods for t in range(cfg.trials)]
    results = _map(_ablation_trial, jobs, worker_count(cfg.workers))
    cells = []
    by_cell: dict[tuple[str, str], list[dict]] = {}
    for (c, v, m, t, s), r in zip(jobs, results):
        by_cell.setdefault((v, m), []).append(r)
    for (v, m), rs in by_cell.items():
        l2 = [r["l2_to_template"] for r in rs]
        ps = [r["psnr_vs_unguided"] for r in rs]
        cells.append(
            {
                "variant": v,
                "method": m,
                "trials": len(rs),
                "l2_mean": float(np.mean(l2)),
                "l2_std": float(np.std(l2)),
                "psnr_mean": float(np.mean([p for p in ps if math.isfinite(p)] or [math.inf])),
                "detection_rate": float(np.mean([r["detected"] for r in rs])),
                "mean_retries": float(np.mean([r["retries"] for r in rs])),
            }
        )
    lookup = {(c["variant"], c["method"]): c for c in cells}
    checks = {}
    if ("luminance", "guided") in lookup and ("luminance", "hard_stepwise") in lookup:
        g, h = lookup[("luminance", "guided")], lookup[("luminance", "hard_stepwise")]
        checks["guided_beats_hard_stepwise"] = g["l2_mean"] < h["l2_mean"]
    if ("luminance", "guided") in lookup and ("random", "guided") in lookup:
        checks["luminance_beats_random"] = (
            lookup[("luminance", "guided")]["l2_mean"] <= lookup[("random", "guided")]["l2_mean"]
        )
    return {
        "version": REPORT_VERSION,
        "config": cfg.to_dict(),
        "guidance_scale": scale,
        "fidelity_proxy": "L2 to nearest template and PSNR vs. the unguided sample (not FID)",
        "cells": cells,
        "checks": checks,
    }


def sweep_guidance_scale(size: int, patch_size: int, scales: Iterable[float], trials: int = 20,
                         seed: int = 0, fpr: float = 0.01) -> list[dict]:
    """Single-pass success rate and mean restarts of guided sampling per scale."""
    lay = PatchLayout(size, size, patch_size)
    th = calibrate_threshold(lay.num_patches, fpr)
    prior = toy_prior(size)
    sched = build_schedule()
    out = []
    for s in scales:
        first, retries, rates = [], [], []
        for t in range(trials):
            ts = derive_seed(seed, t)
            key = generate_key(derive_seed(ts, 1), lay)
            tr = sample_guided(derive_seed(ts, 0), sched, prior, key, s, th)
            first.append(tr.retries == 1)
            retries.append(tr.retries)
            rates.append(tr.attempt_match_rates[0])
        out.append({
            "scale": float(s),
            "single_pass_rate": float(np.mean(first)),
            "mean_retries": float(np.mean(retries)),
            "mean_first_match_rate": float(np.mean(rates)),
        })
    return out


# ---------------------------------------------------------------------------
# Reports


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.bool_):
        return bool(o)
    raise TypeError(f"not JSON serializable: {type(o)}")


def dumps(obj) -> str:
    def fix(v):
        if isinstance(v, float) and math.isinf(v):
            return "inf" if v > 0 else "-inf"
        if isinstance(v, dict):
            return {k: fix(x) for k, x in v.items()}
        if isinstance(v, (list, tuple)):
            return [fix(x) for x in v]
        return v

    return json.dumps(fix(obj), indent=2, sort_keys=True, default=_json_default) + "\n"


def rows_to_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    if rows:
        writer = csv.DictWriter(buf, fieldnames=list(rows[0].keys()), lineterminator="\n")
        writer.writeheader()
        for r in rows:
            writer.writerow(r)
    return buf.getvalue()


def write_report(out_dir: str | os.PathLike, name: str, payload: dict, rows: Sequence[dict] | None = None) -> list[str]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = [f"{name}.json"]
    atomic_write_text(out / f"{name}.json", dumps(payload))
    if rows is not None:
        atomic_write_text(out / f"{name}.csv", rows_to_csv(rows))
        written.append(f"{name}.csv")
    return written
