import json

import numpy as np
import pytest

from luminark import __version__
from luminark.cli import main
from luminark.core import load_image, save_png
from luminark.templates import smooth_field


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    save_png("img.png", smooth_field(1, 256))
    assert main(["keygen", "--seed", "7", "--height", "256", "--width", "256", "--patch-size", "32",
                 "--out", "k.json", "--quiet"]) == 0
    return tmp_path


def test_keygen_never_echoes_key(workdir, capsys):
    code, out, _ = run(capsys, "keygen", "--seed", "8", "--height", "256", "--width", "256",
                       "--patch-size", "32", "--out", "k2.json")
    assert code == 0
    rep = json.loads(out)
    assert rep["version"] == 1 and rep["num_patches"] == 64
    key_text = (workdir / "k2.json").read_text()
    tau0 = json.loads(key_text)["tau"][0]
    assert tau0 not in out and '"c"' not in out and '"seed"' not in out


def test_keygen_requires_seed(workdir, capsys):
    code, _, err = run(capsys, "keygen", "--out", "x.json")
    assert code == 2 and "--seed" in err


def test_calibrate(capsys):
    code, out, _ = run(capsys, "calibrate", "--n", "64", "--fpr", "0.01")
    rep = json.loads(out)
    assert code == 0 and rep["k_star"] == 42 and rep["t_match"] == 0.65625
    code, out, _ = run(capsys, "calibrate", "--n", "64", "--fpr", "0.01", "--flip-or")
    assert json.loads(out)["k_star"] == 43
    code, out, _ = run(capsys, "calibrate", "--n", "8", "--ladder")
    lines = out.strip().splitlines()
    assert lines[0] == "k,p_k" and len(lines) == 10
    code, _, err = run(capsys, "calibrate", "--n", "8", "--fpr", "1e-9")
    assert code == 2 and "minimum" in err


def test_inject_detect_roundtrip(workdir, capsys):
    code, out, _ = run(capsys, "detect", "--in", "img.png", "--key", "k.json")
    assert code == 0 and json.loads(out)["match_count"] <= 64
    for mode in ("gd", "project"):
        code, out, _ = run(capsys, "inject", "--mode", mode, "--in", "img.png", "--out", f"{mode}.png",
                           "--key", "k.json")
        rep = json.loads(out)
        assert code == 0 and rep["success"] and rep["saved_match_rate"] == 1.0
        side = json.loads((workdir / f"{mode}.png.json").read_text())
        assert side["mode"] == mode and side["version"] == 1
        code, out, _ = run(capsys, "detect", "--in", f"{mode}.png", "--key", "k.json")
        assert json.loads(out)["decision"] is True


def test_inspect_csv(workdir, capsys):
    code, out, _ = run(capsys, "inspect", "--in", "img.png", "--key", "k.json")
    lines = out.strip().splitlines()
    assert code == 0 and lines[0] == "patch,luminance,tau,c,violated,slack" and len(lines) == 65


def test_layout_mismatch_is_operational(workdir, capsys):
    save_png("odd.png", smooth_field(2, 250))
    code, out, _ = run(capsys, "detect", "--in", "odd.png", "--key", "k.json")
    rep = json.loads(out)
    assert code == 1 and "resize-to-grid" in rep["hint"]
    code, out, _ = run(capsys, "detect", "--in", "odd.png", "--key", "k.json", "--resize-to-grid")
    assert code == 0


def test_missing_files(workdir, capsys):
    code, out, _ = run(capsys, "detect", "--in", "nope.png", "--key", "k.json")
    assert code == 1 and "error" in json.loads(out)
    code, out, _ = run(capsys, "detect", "--in", "img.png", "--key", "nokey.json")
    assert code == 1
    code, _, _ = run(capsys, "detect", "--in", "img.png")
    assert code == 2


def test_usage_errors(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        main(["calibrate", "--seed", "-4"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        main(["--version"])
    assert exc.value.code == 0 and __version__ in capsys.readouterr().out


def test_sample_and_trace(workdir, capsys):
    code, out, _ = run(capsys, "sample", "--guided", "--key", "k.json", "--seed", "3", "--out", "s.png",
                       "--trace", "t.json")
    rep = json.loads(out)
    assert code == 0 and rep["success"] and rep["retries"] >= 1
    trace = json.loads((workdir / "t.json").read_text())
    assert len(trace["schedule"]["sigmas"]) == 33
    assert load_image("s.png").shape == (256, 256, 3)
    code, out, _ = run(capsys, "sample", "--seed", "3", "--out", "u.png")
    assert code == 0 and json.loads(out)["guided"] is False
    code, _, err = run(capsys, "sample", "--guided", "--seed", "3", "--out", "x.png")
    assert code == 2


def test_attack_single_and_all(workdir, capsys):
    code, out, _ = run(capsys, "attack", "--kind", "jpeg", "--in", "img.png", "--out", "j.png", "--seed", "1")
    assert code == 0 and json.loads(out)["params"] == {"quality": 50}
    img = np.asarray(load_image("img.png"))
    save_png("small.png", img[:64, :64])
    code, out, _ = run(capsys, "attack", "--kind", "all", "--in", "small.png", "--out", "atk", "--seed", "1")
    manifest = json.loads((workdir / "atk" / "manifest.json").read_text())
    assert code == 0 and len(manifest["files"]) == 9
    assert all((workdir / "atk" / f).exists() for f in manifest["files"].values())


def test_eval_fpr(workdir, capsys):
    (workdir / "cfg.json").write_text(json.dumps({"trials": 1000, "seed": 2, "studies": ["fpr"]}))
    code, out, _ = run(capsys, "eval", "--config", "cfg.json", "--out", "rep")
    assert code == 0
    assert json.loads((workdir / "rep" / "fpr.json").read_text())["k_star"] == 42
    assert json.loads((workdir / "rep" / "manifest.json").read_text())["files"] == ["fpr.json"]
    (workdir / "bad.json").write_text(json.dumps({"trails": 3}))
    code, _, err = run(capsys, "eval", "--config", "bad.json", "--out", "rep")
    assert code == 2 and "trails" in err


def test_wrong_key_does_not_detect(workdir, capsys):
    assert main(["inject", "--in", "img.png", "--out", "w.png", "--key", "k.json", "--quiet"]) == 0
    hits = 0
    for seed in range(100, 120):
        main(["keygen", "--seed", str(seed), "--height", "256", "--width", "256", "--patch-size", "32",
              "--out", "other.json", "--quiet"])
        code, out, _ = run(capsys, "detect", "--in", "w.png", "--key", "other.json")
        hits += json.loads(out)["decision"]
    assert hits <= 1
