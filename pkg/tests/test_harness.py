import json
import math

import pytest

from luminark.harness import (
    ExperimentConfig,
    dumps,
    rows_to_csv,
    run_ablation,
    run_fpr_study,
    run_robustness_table,
    sweep_guidance_scale,
    verify_kl_bound,
    wilson_interval,
    write_report,
)


def test_wilson_interval_reference():
    low, high = wilson_interval(0, 100, 0.95)
    assert low == pytest.approx(0.0, abs=1e-12) and high == pytest.approx(0.03699, abs=1e-4)
    low, high = wilson_interval(50, 100, 0.95)
    assert low == pytest.approx(0.40383, abs=1e-4) and high == pytest.approx(0.59617, abs=1e-4)


def test_config_roundtrip_and_validation():
    cfg = ExperimentConfig(trials=3, attacks=("identity", "jpeg"))
    assert ExperimentConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        ExperimentConfig.from_dict({"trials": 3, "bogus": 1})
    with pytest.raises(ValueError):
        ExperimentConfig(attacks=("rotate",))
    with pytest.raises(ValueError):
        ExperimentConfig(injection="magic")
    with pytest.raises(ValueError):
        ExperimentConfig(height=500)


def test_kl_bound_has_no_violations():
    assert verify_kl_bound(32) == []


def test_fpr_study_small():
    rep = run_fpr_study(ExperimentConfig(trials=5000, seed=3))
    assert rep["k_star"] == 42 and rep["pass"]
    assert sum(rep["match_count_histogram"]) == 5000
    assert rep["detections"] == round(rep["empirical_rate"] * 5000)
    assert rep["kl_check"]["exact_tail"] <= rep["kl_check"]["bound"]
    again = run_fpr_study(ExperimentConfig(trials=5000, seed=3))
    assert dumps(rep) == dumps(again)


def test_flip_fpr_uses_half_budget():
    rep = run_fpr_study(ExperimentConfig(trials=2000, seed=1, flip_or=True))
    assert rep["k_star"] == 43
    assert rep["guaranteed_rate"] == pytest.approx(2 * rep["p_at_k_star"])


def test_robustness_small():
    cfg = ExperimentConfig(
        trials=2, replicates=2, height=128, width=128, patch_size=32,
        attacks=("identity", "gaussian_noise", "horizontal_flip"), workers=1,
    )
    details = {}
    rows = run_robustness_table(cfg, details)
    assert [r.attack for r in rows] == ["identity", "gaussian_noise", "horizontal_flip"]
    assert rows[0].accuracy == 1.0 and rows[0].trials == 4
    assert details["errors"] == [] and details["injection_failures"] == 0
    assert all(r.fp_within_bound for r in rows)


def test_robustness_reports_missing_image_dir(tmp_path):
    cfg = ExperimentConfig(trials=1, replicates=1, height=128, width=128, patch_size=32,
                           attacks=("identity",), image_source=str(tmp_path), workers=1)
    details = {}
    rows = run_robustness_table(cfg, details)
    assert len(details["errors"]) == 1 and rows[0].trials == 0


def test_ablation_small():
    cfg = ExperimentConfig(trials=2, height=256, width=256, patch_size=32, margin=0.01, workers=1)
    rep = run_ablation(cfg, variants=("luminance", "random"))
    assert len(rep["cells"]) == 6
    assert set(rep["checks"]) == {"guided_beats_hard_stepwise", "luminance_beats_random"}
    assert all(c["detection_rate"] == 1.0 for c in rep["cells"])


def test_sweep_small():
    out = sweep_guidance_scale(256, 32, [8000.0], trials=2)
    assert out[0]["scale"] == 8000.0 and out[0]["mean_retries"] >= 1


def test_report_writers(tmp_path):
    payload = {"b": math.inf, "a": [1, 2]}
    text = dumps(payload)
    assert json.loads(text) == {"a": [1, 2], "b": "inf"}
    assert rows_to_csv([{"x": 1, "y": 2}]) == "x,y\n1,2\n"
    assert rows_to_csv([]) == ""
    files = write_report(tmp_path, "r", payload, [{"x": 1}])
    assert files == ["r.json", "r.csv"]
    assert (tmp_path / "r.json").read_text() == text
