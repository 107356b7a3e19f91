import json
import subprocess
import sys

import pytest

from hrseg.cli import read_config_file, run


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """synth -> encode -> decode on three scenes."""
    root = tmp_path_factory.mktemp("pipe")
    d, t, p = root / "d", root / "t", root / "p.json"
    assert run(["synth", "--seed", "7", "--count", "3", "--out", str(d)]) == 0
    assert run(["encode", "--in", str(d), "--out", str(t)]) == 0
    assert run(["decode", "--in", str(t), "--out", str(p)]) == 0
    return root


def _files(path):
    """Relative path -> bytes for every non-manifest file below ``path``."""
    return {str(f.relative_to(path)): f.read_bytes() for f in sorted(path.rglob("*"))
            if f.is_file() and "manifest" not in f.name}


def test_full_pipeline_recall(pipeline):
    out = pipeline / "eval.json"
    assert run(["eval", "--gt", str(pipeline / "d"), "--pred", str(pipeline / "p.json"),
                "--out", str(out)]) == 0
    report = json.loads(out.read_text())
    assert report["mR"]["25"] == pytest.approx(1.0, abs=1e-9)
    assert report["AR"] == pytest.approx(1.0, abs=1e-9)


def test_hrs_mode_and_ap_role(pipeline):
    out = pipeline / "eval_hrs.json"
    assert run(["eval", "--gt", str(pipeline / "d"), "--pred", str(pipeline / "p.json"),
                "--mode", "hrs", "--ap-role", "--out", str(out)]) == 0
    report = json.loads(out.read_text())
    assert report["mode"] == "HRS" and report["mR"]["25"] == 1.0
    assert report["AP_role"] == 1.0


def test_synth_layout(pipeline):
    d = pipeline / "d"
    assert sorted(f.name for f in d.glob("*.scene.json")) == [
        "scene_00007.scene.json", "scene_00008.scene.json", "scene_00009.scene.json"]
    assert (d / "schema.json").exists() and (d / "manifest.json").exists()
    assert len(list((d / "render").glob("*.hrst"))) == 3


def test_manifest_contents(pipeline):
    m = json.loads((pipeline / "p.manifest.json").read_text())
    assert m["subcommand"] == "decode" and m["config"]["ks"] == 25
    assert all(v >= 0 for v in m["timings"].values())
    assert m["counters"]["images"] == 3 and m["counters"]["no_subject"] == 0


def test_eval_dimension_mismatch(pipeline, tmp_path, capsys):
    # the same scene names rendered at a smaller image size
    d, t, p = tmp_path / "d", tmp_path / "t", tmp_path / "p.json"
    assert run(["synth", "--seed", "7", "--count", "1", "--width", "128", "--height", "128",
                "--out", str(d)]) == 0
    assert run(["encode", "--in", str(d), "--out", str(t)]) == 0
    assert run(["decode", "--in", str(t), "--out", str(p)]) == 0
    capsys.readouterr()
    assert run(["eval", "--gt", str(pipeline / "d"), "--pred", str(p)]) == 1
    err = capsys.readouterr().err
    assert "scene_00007" in err and "128x128" in err


def test_eval_malformed_prediction_names_scene(pipeline, tmp_path, capsys):
    preds = json.loads((pipeline / "p.json").read_text())
    preds["images"]["scene_00008"]["width"] += 4
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(preds))
    assert run(["eval", "--gt", str(pipeline / "d"), "--pred", str(bad)]) == 1
    assert "scene_00008" in capsys.readouterr().err


def test_eval_unknown_scene(pipeline, tmp_path, capsys):
    preds = json.loads((pipeline / "p.json").read_text())
    preds["images"]["scene_99999"] = preds["images"]["scene_00007"]
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(preds))
    assert run(["eval", "--gt", str(pipeline / "d"), "--pred", str(bad)]) == 1
    assert "scene_99999" in capsys.readouterr().err


def test_subcommands_are_idempotent(pipeline, tmp_path):
    d2, t2, p2 = tmp_path / "d", tmp_path / "t", tmp_path / "p.json"
    assert run(["synth", "--seed", "7", "--count", "3", "--out", str(d2)]) == 0
    assert run(["encode", "--in", str(d2), "--out", str(t2), "--jobs", "2"]) == 0
    assert run(["decode", "--in", str(t2), "--out", str(p2)]) == 0
    assert _files(d2) == _files(pipeline / "d")
    assert _files(t2) == _files(pipeline / "t")
    assert p2.read_bytes() == (pipeline / "p.json").read_bytes()


def test_bench_writes_latency(pipeline):
    assert run(["bench", "--in", str(pipeline / "t"), "--iters", "5"]) == 0
    m = json.loads((pipeline / "t" / "bench.manifest.json").read_text())
    lat = m["latency"]
    assert set(lat) >= {"mean_ms", "p95_ms"}
    assert 0 < lat["min_ms"] <= lat["mean_ms"] and lat["mean_ms"] >= 0


def test_gradcheck_report(tmp_path):
    out = tmp_path / "g.json"
    assert run(["gradcheck", "--points", "3", "--out", str(out)]) == 0
    report = json.loads(out.read_text())
    assert report["passed"] and max(report["max_relative_error"].values()) < 1e-4


def test_gradcheck_failure_exits_1(tmp_path):
    assert run(["gradcheck", "--points", "2", "--tolerance", "1e-30",
                "--out", str(tmp_path / "g.json")]) == 1


# -- argument handling -------------------------------------------------------------

def test_unknown_flag_rejected(tmp_path, capsys):
    assert run(["synth", "--out", str(tmp_path), "--bogus"]) == 1
    assert "--bogus" in capsys.readouterr().err


def test_missing_subcommand():
    assert run([]) == 1


def test_io_error_exits_2(tmp_path):
    assert run(["encode", "--in", str(tmp_path / "nope"), "--out", str(tmp_path / "t")]) == 2


def test_read_config_file(tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("# comment\nks = 3\nmask-threshold=0.4\n\n")
    assert read_config_file(cfg) == {"ks": "3", "mask_threshold": "0.4"}
    cfg.write_text("no equals sign\n")
    with pytest.raises(ValueError):
        read_config_file(cfg)


def test_config_precedence(pipeline, tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("ks = 3\nko = 4\nmask-threshold = 0.4\n")
    out = tmp_path / "p.json"
    argv = ["decode", "--config", str(cfg), "--in", str(pipeline / "t"), "--out", str(out)]
    assert run(argv + ["--ks", "5"]) == 0
    conf = json.loads((tmp_path / "p.manifest.json").read_text())["config"]
    # flag beats file, file beats default, untouched keys keep defaults
    assert conf["ks"] == 5 and conf["ko"] == 4 and conf["mask_threshold"] == 0.4
    assert conf["kr"] == 30


def test_config_can_supply_required_flags(pipeline, tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text(f"in = {pipeline / 't'}\nout = {tmp_path / 'p.json'}\n")
    assert run(["decode", "--config", str(cfg)]) == 0
    assert (tmp_path / "p.json").exists()


def test_unknown_config_key(pipeline, tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("bogus = 1\n")
    assert run(["decode", "--config", str(cfg), "--in", str(pipeline / "t"),
                "--out", str(tmp_path / "p.json")]) == 1


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "hrseg.cli", "synth", "--count", "1",
                           "--out", str(tmp_path / "d")], capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout == ""
