import json

import pytest

from robusta.cli import main, read_config
from robusta.core import read_features
from robusta.detector import load_model
from robusta.gmm import load_gmm
from robusta.synthgen import read_scenes


def run(argv, capsys):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def test_gen_is_deterministic(tmp_path, capsys):
    for name in ("a", "b"):
        code, out, _ = run(["gen", "--n", "10", "--segments", "4", "--seed", "3", "--out-dir", tmp_path / name], capsys)
        assert code == 0 and "wrote 8 train and 2 test" in out
    for part in ("train.ras", "test.ras"):
        assert (tmp_path / "a" / part).read_bytes() == (tmp_path / "b" / part).read_bytes()
    scenes, seed, _ = read_scenes(tmp_path / "a" / "train.ras")
    assert seed == 3 and len(scenes) == 8


def test_full_chain(tmp_path, capsys):
    d = tmp_path
    steps = [
        ["gen", "--n-train", "24", "--n-test", "8", "--segments", "8", "--out-dir", d],
        ["extract", "--scenes", d / "train.ras", "--out", d / "train.raf", "--no-truth"],
        ["corrupt", "--scenes", d / "test.ras", "--kind", "fog", "--fraction", "0.5", "--out", d / "fog.ras"],
        ["extract", "--scenes", d / "fog.ras", "--out", d / "fog.raf"],
        ["train", "--features", d / "train.raf", "--mode", "shared", "--epochs", "5", "--out", d / "shared.ram"],
        ["fit-gmm", "--features", d / "train.raf", "--modality", "audio", "--k", "2", "--out", d / "a.rag"],
        ["fit-gmm", "--features", d / "train.raf", "--modality", "visual", "--k", "2", "--out", d / "v.rag"],
        ["calibrate", "--gmm", d / "a.rag", "--features", d / "train.raf"],
        ["calibrate", "--gmm", d / "v.rag", "--features", d / "train.raf"],
        ["eval", "--features", d / "fog.raf", "--model", d / "shared.ram", "--scheme", "dynamic",
         "--gmm-audio", d / "a.rag", "--gmm-visual", d / "v.rag", "--trace", d / "trace.csv"],
    ]
    for argv in steps:
        code, out, err = run(argv, capsys)
        assert code == 0, (argv[0], err)
    assert out.startswith("AP ")
    assert len(read_features(d / "fog.raf")) == 8
    manifest = json.loads((d / "fog.ras.manifest.json").read_text())
    assert len(manifest["corrupted"]) == 4
    assert load_model(d / "shared.ram")[0].mode.value == "shared"
    assert load_gmm(d / "v.rag")[1] is not None
    meta = json.loads((d / "trace.csv.meta.json").read_text())
    assert meta["command"] == "eval" and meta["seed"] == 0
    lines = (d / "trace.csv").read_text().splitlines()
    assert len(lines) == 1 + 8 * 8


def test_dynamic_eval_needs_gates(tmp_path, capsys):
    d = tmp_path
    run(["gen", "--n-train", "8", "--n-test", "4", "--segments", "4", "--out-dir", d], capsys)
    run(["extract", "--scenes", d / "train.ras", "--out", d / "train.raf"], capsys)
    run(["train", "--features", d / "train.raf", "--epochs", "1", "--out", d / "m.ram"], capsys)
    code, _, err = run(["eval", "--features", d / "train.raf", "--model", d / "m.ram"], capsys)
    assert code == 1 and err.startswith("ERROR cli: dynamic scheme needs")


def test_errors_name_the_module(tmp_path, capsys):
    bad = tmp_path / "bad.raf"
    bad.write_bytes(b"XXXXjunk")
    code, _, err = run(["train", "--features", bad, "--out", tmp_path / "m.ram"], capsys)
    assert code == 1
    assert err.startswith("ERROR core:") and "magic" in err
    code, _, err = run(["train", "--features", tmp_path / "nope.raf", "--out", tmp_path / "m.ram"], capsys)
    assert code == 1 and err.startswith("ERROR cli: feature file not found")
    code, _, err = run(["gen", "--n", "10", "--anomaly-ratio", "2", "--out-dir", tmp_path], capsys)
    assert code == 1 and err.startswith("ERROR synthgen:")


@pytest.mark.parametrize("argv", [["gen", "--bogus"], ["explode"], ["train", "--features", "x"], []])
def test_usage_errors_exit_2(argv, capsys):
    with pytest.raises(SystemExit) as info:
        main(argv)
    assert info.value.code == 2


def test_config_file_and_flag_precedence(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# small world\nn_train = 6\nn-test = 2\nsegments_per_video = 4\nseed = 5\n")
    assert read_config(cfg)["n_test"] == "2"
    code, out, _ = run(["gen", "--config", cfg, "--out-dir", tmp_path / "a"], capsys)
    assert code == 0 and "wrote 6 train and 2 test" in out
    assert read_scenes(tmp_path / "a" / "train.ras")[1] == 5
    code, out, _ = run(["gen", "--config", cfg, "--n-train", "3", "--seed", "1", "--out-dir", tmp_path / "b"], capsys)
    assert "wrote 3 train" in out and read_scenes(tmp_path / "b" / "train.ras")[1] == 1


def test_unknown_config_key(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("warp_factor = 9\n")
    code, _, err = run(["gen", "--config", cfg], capsys)
    assert code == 1 and "unknown config keys: warp_factor" in err


def test_sweep_and_report(tmp_path, capsys, monkeypatch):
    cfg = tmp_path / "s.cfg"
    cfg.write_text("n_train = 16\nn_test = 8\nsegments_per_video = 8\nepochs = 2\n")
    out = tmp_path / "r.csv"
    csvs = []
    for threads in ("1", "4"):
        monkeypatch.setenv("ROBUSTA_THREADS", threads)
        code, msg, err = run(["sweep", "--config", cfg, "--kinds", "rain,pink", "--levels", "0.0,1.0", "--out", out], capsys)
        assert code == 0, err
        csvs.append(out.read_bytes())
    assert csvs[0] == csvs[1]
    assert "wrote 20 rows" in msg
    code, table, _ = run(["report", out], capsys)
    assert code == 0 and table.splitlines()[0].split() == ["kind", "modality", "level", "scheme", "variant", "ap", "n_segments"]
    assert len(table.splitlines()) == 22
