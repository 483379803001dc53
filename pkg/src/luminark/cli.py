"""Command-line interface.

Exit codes: 0 success, 1 operational failure (JSON diagnostics on stdout),
2 usage error. Key files are read and written by path only and their
contents are never printed.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .attacks import BATTERY, AttackKind, AttackSpec, apply_attack, attack_battery
from .certify import UnachievableFPR, calibrate_threshold, detect, detect_with_flip, flip_threshold, p_value_ladder
from .core import (
    ChannelWeights,
    LayoutError,
    PatchLayout,
    WatermarkKey,
    atomic_write_text,
    generate_key,
    load_image,
    match_rate,
    patch_luminance,
    quantize,
    resize_to_grid,
    save_png,
)
from .diffusion import (
    LinearDecoder,
    MixturePrior,
    build_schedule,
    default_guidance_scale,
    sample_guided,
    sample_guided_latent,
    sample_hard_stepwise,
    sample_unguided,
    toy_prior,
)
from .harness import (
    ExperimentConfig,
    dumps,
    rows_to_csv,
    run_ablation,
    run_fpr_study,
    run_robustness_table,
    write_report,
)
from .injector import InjectionConfig, inject_hard_projection, inject_posthoc_gd, psnr

OUTPUT_VERSION = 1


class UsageError(Exception):
    pass


class OperationalError(Exception):
    def __init__(self, message: str, **details):
        super().__init__(message)
        self.details = details


def _emit(args, payload: dict) -> None:
    if args.quiet:
        return
    sys.stdout.write(dumps({"version": OUTPUT_VERSION, "command": args.command, **payload}))


def _threshold(args, n: int):
    try:
        if args.flip_or:
            return flip_threshold(n, args.fpr)
        return calibrate_threshold(n, args.fpr)
    except (UnachievableFPR, ValueError) as exc:
        raise UsageError(str(exc)) from exc


def _load_key(args) -> WatermarkKey:
    if not args.key:
        raise UsageError("--key is required")
    try:
        return WatermarkKey.load(args.key)
    except FileNotFoundError as exc:
        raise OperationalError(f"key file not found: {args.key}") from exc
    except (ValueError, json.JSONDecodeError) as exc:
        raise OperationalError(f"invalid key file: {exc}") from exc


def _load_input(args, key: WatermarkKey) -> np.ndarray:
    try:
        img = load_image(args.input)
    except (FileNotFoundError, OSError) as exc:
        raise OperationalError(f"cannot read image {args.input}: {exc}") from exc
    if getattr(args, "resize_to_grid", False):
        img = resize_to_grid(img, key.layout.patch_size)
    try:
        key.layout.check(img)
    except LayoutError as exc:
        raise OperationalError(str(exc), hint="pass --resize-to-grid to resample explicitly") from exc
    return img


def _weights(spec: str) -> ChannelWeights:
    if "," in spec:
        try:
            return ChannelWeights(*(float(v) for v in spec.split(",")))
        except (TypeError, ValueError) as exc:
            raise UsageError(f"bad --weights {spec!r}: {exc}") from exc
    try:
        return ChannelWeights.variant(spec)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _fingerprint(path: str) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# Subcommands


def cmd_keygen(args) -> int:
    if args.seed is None:
        raise UsageError("--seed is required for keygen")
    try:
        layout = PatchLayout(args.height, args.width, args.patch_size)
        key = generate_key(args.seed, layout, _weights(args.weights), args.tau_low, args.tau_high)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    key.save(args.out)
    _emit(args, {"key_file": args.out, "num_patches": layout.num_patches, "fingerprint": _fingerprint(args.out)})
    return 0


def cmd_calibrate(args) -> int:
    th = _threshold(args, args.n)
    if args.ladder and not args.json:
        if not args.quiet:
            sys.stdout.write(rows_to_csv([{"k": k, "p_k": repr(p)} for k, p in p_value_ladder(args.n)]))
        return 0
    payload = {"per_branch_fpr": args.fpr / 2 if args.flip_or else args.fpr, **th.to_dict()}
    if args.ladder:
        payload["ladder"] = [[k, p] for k, p in p_value_ladder(args.n)]
    _emit(args, payload)
    return 0


def cmd_detect(args) -> int:
    key = _load_key(args)
    img = _load_input(args, key)
    th = _threshold(args, key.num_patches)
    report = (detect_with_flip if args.flip_or else detect)(img, key, th)
    _emit(args, report.to_dict())
    return 0


def cmd_inject(args) -> int:
    key = _load_key(args)
    img = _load_input(args, key)
    if args.margin < 0:
        raise UsageError("--margin must be nonnegative")
    if args.mode == "gd":
        try:
            cfg = InjectionConfig(
                step_size=args.step_size, max_iterations=args.max_iter,
                margin=args.margin, target_match_rate=args.target_match_rate,
            )
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
        res = inject_posthoc_gd(img, key, cfg)
        out_img, result = res.image, res.to_dict()
    else:
        out_img, clamp_bound = inject_hard_projection(img, key, args.margin, args.fraction)
        p = psnr(img, out_img)
        result = {
            "iterations_used": 1,
            "final_match_rate": match_rate(out_img, key),
            "psnr_db": "inf" if math.isinf(p) else p,
            "clamp_bound": clamp_bound,
        }
    # the PNG holds 8-bit values, so report what a detector will see
    out_img = quantize(out_img)
    result["saved_match_rate"] = match_rate(out_img, key)
    result["success"] = result["saved_match_rate"] >= args.target_match_rate
    save_png(args.out, out_img)
    sidecar = {"version": OUTPUT_VERSION, "mode": args.mode, "margin": args.margin, **result}
    atomic_write_text(args.out + ".json", dumps(sidecar))
    _emit(args, {"out": args.out, "sidecar": args.out + ".json", "mode": args.mode, **result})
    if not result["success"]:
        raise OperationalError("injection did not reach the target match rate", **result)
    return 0


def cmd_sample(args) -> int:
    seed = 0 if args.seed is None else args.seed
    sched = build_schedule(args.steps)
    prior = toy_prior(args.size, args.spread)
    if not args.guided and not args.hard_stepwise:
        img = sample_unguided(seed, sched, prior)
        save_png(args.out, img)
        payload = {"seed": seed, "guided": False, "schedule": sched.to_dict()}
        if args.trace:
            atomic_write_text(args.trace, dumps({"version": OUTPUT_VERSION, **payload}))
        _emit(args, {"out": args.out, **payload})
        return 0
    key = _load_key(args)
    if (key.layout.height, key.layout.width) != (args.size, args.size):
        raise UsageError(f"key layout {key.layout.height}x{key.layout.width} does not match --size {args.size}")
    if args.hard_stepwise:
        img = sample_hard_stepwise(seed, sched, prior, key, args.margin)
        save_png(args.out, img)
        payload = {"seed": seed, "hard_stepwise": True, "match_rate": match_rate(img, key)}
        if args.trace:
            atomic_write_text(args.trace, dumps({"version": OUTPUT_VERSION, **payload, "schedule": sched.to_dict()}))
        _emit(args, {"out": args.out, **payload})
        return 0
    th = _threshold(args, key.num_patches)
    scale = args.scale if args.scale is not None else default_guidance_scale(key.layout.patch_size)
    if args.latent:
        factor = 2
        lat = (args.size // factor, args.size // factor, 3)
        dec = LinearDecoder.nearest(lat, factor) if args.latent == "nearest" else LinearDecoder.bilinear(lat, factor)
        lprior = MixturePrior.uniform([dec.encode(t) for t in prior.templates], prior.spread)
        trace = sample_guided_latent(
            seed, sched, lprior, dec, key, scale, th,
            max_retries=args.max_retries, margin=args.margin,
        )
    else:
        trace = sample_guided(seed, sched, prior, key, scale, th, max_retries=args.max_retries, margin=args.margin)
    save_png(args.out, trace.image)
    payload = trace.to_dict()
    if args.trace:
        atomic_write_text(args.trace, dumps({"version": OUTPUT_VERSION, **payload}))
    _emit(args, {"out": args.out, **{k: v for k, v in payload.items() if k != "schedule"}})
    if not trace.success:
        raise OperationalError("retry cap exhausted", retries=trace.retries, match_rate=trace.match_rate)
    return 0


def cmd_attack(args) -> int:
    try:
        img = load_image(args.input)
    except (FileNotFoundError, OSError) as exc:
        raise OperationalError(f"cannot read image {args.input}: {exc}") from exc
    seed = 0 if args.seed is None else args.seed
    if args.kind == "all":
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        results = attack_battery(img, seed, BATTERY + (AttackKind.HORIZONTAL_FLIP,) if args.with_flip else BATTERY)
        files = {}
        for name, attacked in results.items():
            save_png(out_dir / f"{name}.png", attacked)
            files[name] = f"{name}.png"
        manifest = {"version": OUTPUT_VERSION, "input": str(args.input), "seed": seed, "files": files}
        atomic_write_text(out_dir / "manifest.json", dumps(manifest))
        _emit(args, {"out": str(out_dir), "count": len(files), "files": files})
        return 0
    spec = AttackSpec(AttackKind(args.kind), seed=seed)
    save_png(args.out, apply_attack(img, spec))
    _emit(args, {"out": args.out, "kind": args.kind, "seed": seed, "params": spec.params})
    return 0


def cmd_eval(args) -> int:
    try:
        data = json.loads(Path(args.config).read_text(encoding="utf-8"))
        studies = data.pop("studies", None) or [args.study]
        if args.seed is not None:
            data["seed"] = args.seed
        cfg = ExperimentConfig.from_dict({**data, "attacks": tuple(data.get("attacks", ExperimentConfig.attacks))})
    except FileNotFoundError as exc:
        raise OperationalError(f"config not found: {args.config}") from exc
    except (ValueError, TypeError) as exc:
        raise UsageError(f"invalid config: {exc}") from exc
    if "all" in studies:
        studies = ["fpr", "robustness", "ablation"]
    out = Path(args.out)
    written: list[str] = []
    summary = {}
    for study in studies:
        if study == "fpr":
            rep = run_fpr_study(cfg)
            written += write_report(out, "fpr", rep)
            summary["fpr"] = {"empirical_rate": rep["empirical_rate"], "pass": rep["pass"]}
        elif study == "robustness":
            details: dict = {}
            rows = [r.to_dict() for r in run_robustness_table(cfg, details)]
            payload = {"version": OUTPUT_VERSION, "config": cfg.to_dict(), "rows": rows, **details}
            written += write_report(out, "robustness", payload, rows)
            summary["robustness"] = {r["attack"]: r["accuracy"] for r in rows}
        elif study == "ablation":
            rep = run_ablation(cfg)
            written += write_report(out, "ablation", rep, rep["cells"])
            summary["ablation"] = rep["checks"]
        else:
            raise UsageError(f"unknown study {study!r}")
    manifest = {"version": OUTPUT_VERSION, "config": cfg.to_dict(), "studies": studies, "files": written}
    atomic_write_text(out / "manifest.json", dumps(manifest))
    _emit(args, {"out": str(out), "files": written, "summary": summary})
    return 0


def cmd_inspect(args) -> int:
    key = _load_key(args)
    img = _load_input(args, key)
    lum = patch_luminance(img, key.layout, key.weights)
    slack = key.c * (lum - key.tau)
    bits = np.where(lum >= key.tau, 1, -1)
    rows = [
        {
            "patch": i,
            "luminance": repr(float(lum[i])),
            "tau": repr(float(key.tau[i])),
            "c": int(key.c[i]),
            "violated": bool(bits[i] != key.c[i]),
            "slack": repr(float(slack[i])),
        }
        for i in range(key.num_patches)
    ]
    text = rows_to_csv(rows)
    if args.out:
        atomic_write_text(args.out, text)
        _emit(args, {"out": args.out, "violated": int(np.count_nonzero(bits != key.c))})
    elif not args.quiet:
        sys.stdout.write(text)
    return 0


# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.exit(2, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, help="64-bit unsigned seed")
    common.add_argument("--key", help="path to a key file")
    common.add_argument("--fpr", type=float, default=0.01, help="target false-positive rate")
    common.add_argument("--flip-or", action="store_true", help="OR detection with the mirrored image, fpr/2 per branch")
    common.add_argument("--json", action="store_true", help="machine-readable output only")
    common.add_argument("--quiet", action="store_true")

    p = _Parser(prog="luminark", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("keygen", parents=[common], help="generate a watermark key")
    s.add_argument("--height", type=int, default=512)
    s.add_argument("--width", type=int, default=512)
    s.add_argument("--patch-size", type=int, default=64)
    s.add_argument("--weights", default="luminance", help="variant name or 'wr,wg,wb'")
    s.add_argument("--tau-low", type=float, default=0.4)
    s.add_argument("--tau-high", type=float, default=0.6)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_keygen)

    s = sub.add_parser("calibrate", parents=[common], help="match-rate threshold for a target fpr")
    s.add_argument("--n", type=int, default=64, help="number of patches")
    s.add_argument("--ladder", action="store_true", help="print the full (k, p_k) ladder as CSV")
    s.set_defaults(func=cmd_calibrate)

    s = sub.add_parser("detect", parents=[common], help="certified detection on an image")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--resize-to-grid", action="store_true")
    s.set_defaults(func=cmd_detect)

    s = sub.add_parser("inject", parents=[common], help="post-hoc watermark injection")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--mode", choices=("gd", "project"), default="gd")
    s.add_argument("--margin", type=float, default=0.01, help="luminance slack; 0.01 survives 8-bit rounding")
    s.add_argument("--target-match-rate", type=float, default=1.0)
    s.add_argument("--step-size", type=float)
    s.add_argument("--max-iter", type=int, default=500)
    s.add_argument("--fraction", type=float, default=1.0, help="share of violated patches to project")
    s.add_argument("--resize-to-grid", action="store_true")
    s.set_defaults(func=cmd_inject)

    s = sub.add_parser("sample", parents=[common], help="toy diffusion sampling")
    s.add_argument("--guided", action="store_true")
    s.add_argument("--hard-stepwise", action="store_true")
    s.add_argument("--latent", choices=("nearest", "bilinear"))
    s.add_argument("--scale", type=float)
    s.add_argument("--size", type=int, choices=(256, 512), default=256)
    s.add_argument("--spread", type=float, default=0.03)
    s.add_argument("--steps", type=int, default=32)
    s.add_argument("--margin", type=float, default=0.0)
    s.add_argument("--max-retries", type=int, default=64)
    s.add_argument("--out", required=True)
    s.add_argument("--trace")
    s.set_defaults(func=cmd_sample)

    s = sub.add_parser("attack", parents=[common], help="apply robustness attacks")
    s.add_argument("--kind", required=True, choices=[k.value for k in AttackKind] + ["all"])
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--with-flip", action="store_true", help="include horizontal_flip in --kind all")
    s.set_defaults(func=cmd_attack)

    s = sub.add_parser("eval", parents=[common], help="run harness studies from a JSON config")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--study", choices=("fpr", "robustness", "ablation", "all"), default="robustness")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("inspect", parents=[common], help="per-patch statistics as CSV")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out")
    s.add_argument("--resize-to-grid", action="store_true")
    s.set_defaults(func=cmd_inspect)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.seed is not None and not 0 <= args.seed < 2**64:
        parser.exit(2, "luminark: error: --seed must be a 64-bit unsigned integer\n")
    try:
        return args.func(args)
    except UsageError as exc:
        sys.stderr.write(f"luminark {args.command}: error: {exc}\n")
        return 2
    except OperationalError as exc:
        sys.stdout.write(dumps({"version": OUTPUT_VERSION, "command": args.command, "error": str(exc), **exc.details}))
        return 1


if __name__ == "__main__":
    sys.exit(main())
