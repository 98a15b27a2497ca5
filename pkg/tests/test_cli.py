import csv
import json
import os
import shutil

import numpy as np
import pytest

from lumisplit import cli, dataset, imgio, physsep


def run(*argv):
    return cli.main([str(a) for a in argv])


def files_bytes(root, suffixes=(".pfm", ".csv")):
    out = {}
    for d, _, names in os.walk(root):
        for n in names:
            if n.endswith(suffixes):
                p = os.path.join(d, n)
                out[os.path.relpath(p, root)] = open(p, "rb").read()
    return out


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("synth")
    assert run("synth", "--out", d, "--count", 4, "--size", 16, "--seed", 7) == 0
    return d


def test_synth_layout_and_config(synth_dir):
    assert dataset.list_samples(synth_dir) == ["00000", "00001", "00002", "00003"]
    cfg = json.load(open(synth_dir / "config.json"))
    assert cfg["command"] == "synth" and cfg["seed"] == 7 and cfg["params"]["size"] == 16


def test_synth_deterministic_and_parallel(tmp_path, synth_dir):
    assert run("synth", "--out", tmp_path / "b", "--count", 4, "--size", 16, "--seed", 7, "--jobs", 2) == 0
    assert files_bytes(tmp_path / "b") == files_bytes(synth_dir)
    run("synth", "--out", tmp_path / "c", "--count", 1, "--size", 16, "--seed", 8)
    assert files_bytes(tmp_path / "c")["00000/input.pfm"] != files_bytes(synth_dir)["00000/input.pfm"]


def test_seed_env_fallback(tmp_path, monkeypatch, synth_dir):
    monkeypatch.setenv("LUMISPLIT_SEED", "7")
    run("synth", "--out", tmp_path / "e", "--count", 4, "--size", 16)
    assert files_bytes(tmp_path / "e") == files_bytes(synth_dir)


def test_unknown_config_key(tmp_path):
    (tmp_path / "c.json").write_text('{"size": 16, "sparkle": 3}')
    assert run("synth", "--out", tmp_path / "o", "--config", tmp_path / "c.json") == 2
    (tmp_path / "t.json").write_text('{"learning_rate": 1}')
    assert run("train", "--data", tmp_path, "--out", tmp_path / "r", "--config", tmp_path / "t.json") == 2


def test_bench_gen_conservation(tmp_path):
    assert run("bench-gen", "--out", tmp_path, "--count", 6, "--scenes", 3, "--colors", 4, "--size", 16) == 0
    for sid in dataset.list_samples(tmp_path):
        s = dataset.read_sample(tmp_path / sid)
        assert np.abs(s.input - s.separated[0] - s.separated[1]).max() <= 1e-6


def test_compose(tmp_path):
    rng = np.random.default_rng(0)
    noflash = rng.random((8, 8, 3)) * 0.3
    flash = noflash + rng.random((8, 8, 3)) * 0.5 + 0.05
    imgio.write_pfm(tmp_path / "f.pfm", flash)
    imgio.write_pfm(tmp_path / "n.pfm", noflash)
    assert run("compose", "--flash", tmp_path / "f.pfm", "--noflash", tmp_path / "n.pfm", "--out", tmp_path / "o",
               "--recolor", "0.5,0.3,0.2", "--recolor", "0.2,0.3,0.5") == 0
    assert dataset.list_samples(tmp_path / "o") == ["00000", "00001"]
    s = dataset.read_sample(tmp_path / "o" / "00001")
    assert np.abs(s.input - s.separated[0] - s.separated[1]).max() <= 1e-6
    assert run("compose", "--flash", tmp_path / "f.pfm", "--noflash", tmp_path / "n.pfm", "--out", tmp_path / "x",
               "--recolor", "0.5,0.3") == 2


def test_separate_single(tmp_path, synth_dir):
    d = synth_dir / "00001"
    assert run("separate", "--input", d / "input.pfm", "--alpha", d / "alpha.pfm", "--out-prefix", tmp_path / "p") == 0
    i1, i2 = imgio.load_image(tmp_path / "p_1.pfm"), imgio.load_image(tmp_path / "p_2.pfm")
    ref = physsep.separate_with_chrom(imgio.load_image(d / "input.pfm"), imgio.load_image(d / "alpha.pfm"))
    np.testing.assert_array_equal(i1, ref.images[0].astype(np.float32))
    np.testing.assert_array_equal(i2, ref.images[1].astype(np.float32))
    fit = json.load(open(tmp_path / "p_fit.json"))
    assert "l1" in json.dumps(fit)
    assert json.load(open(tmp_path / "p_config.json"))["command"] == "separate"
    # exactly one of --alpha / --checkpoint
    assert run("separate", "--input", d / "input.pfm", "--out-prefix", tmp_path / "q") == 2
    assert run("separate", "--input", tmp_path / "missing.pfm", "--alpha", d / "alpha.pfm",
               "--out-prefix", tmp_path / "q") == 2


def test_eval_ground_truth_is_zero(tmp_path, synth_dir):
    assert run("eval", synth_dir, synth_dir, "--out", tmp_path) == 0
    rows = list(csv.DictReader(open(tmp_path / "eval.csv")))
    assert [r["id"] for r in rows] == ["00000", "00001", "00002", "00003", "mean"]
    assert all(float(r["sep_metric"]) == 0.0 and float(r["chrom_l1"]) == 0.0 for r in rows)
    rep = json.load(open(tmp_path / "eval.json"))
    assert rep["n"] == 4 and rep["mean_sep_metric"] == 0.0


def test_eval_swap_invariance(tmp_path, synth_dir):
    assert run("separate", "--data", synth_dir, "--out", tmp_path / "p") == 0
    assert run("eval", tmp_path / "p", synth_dir, "--out", tmp_path / "r1") == 0
    shutil.copytree(tmp_path / "p", tmp_path / "q")
    for sid in dataset.list_samples(synth_dir):
        a, b = tmp_path / "q" / sid / "out_1.pfm", tmp_path / "q" / sid / "out_2.pfm"
        os.rename(a, tmp_path / "tmp.pfm")
        os.rename(b, a)
        os.rename(tmp_path / "tmp.pfm", b)
    assert run("eval", tmp_path / "q", synth_dir, "--out", tmp_path / "r2") == 0
    assert open(tmp_path / "r1" / "eval.csv").read() == open(tmp_path / "r2" / "eval.csv").read()
    means = list(csv.DictReader(open(tmp_path / "r1" / "eval.csv")))[-1]
    assert float(means["sep_metric"]) < 1e-2


def test_eval_missing_predictions(tmp_path, synth_dir):
    os.makedirs(tmp_path / "p" / "00000")
    assert run("eval", tmp_path / "p", synth_dir) == 2


def test_train_separate_with_checkpoint(tmp_path, synth_dir):
    (tmp_path / "t.json").write_text('{"width": 4, "batch": 2}')
    assert run("train", "--data", synth_dir, "--out", tmp_path / "run", "--mode", "full", "--steps", 4,
               "--checkpoint-every", 2, "--config", tmp_path / "t.json") == 0
    assert os.path.exists(tmp_path / "run" / "final" / "manifest.json")
    assert os.path.exists(tmp_path / "run" / "step_000002" / "manifest.json")
    rows = list(csv.reader(open(tmp_path / "run" / "metrics.csv")))
    assert len(rows) == 5
    d = synth_dir / "00000"
    for mode in ("physics", "direct"):
        assert run("separate", "--input", d / "input.pfm", "--checkpoint", tmp_path / "run" / "final",
                   "--mode", mode, "--out-prefix", tmp_path / mode) == 0
        assert os.path.exists(tmp_path / f"{mode}_alpha.pfm")
    # resume to a longer schedule continues the log
    assert run("train", "--data", synth_dir, "--out", tmp_path / "run", "--mode", "full", "--steps", 6,
               "--config", tmp_path / "t.json", "--resume", tmp_path / "run" / "final") == 0
    assert len(list(csv.reader(open(tmp_path / "run" / "metrics.csv")))) == 7


def test_gradcheck_pass_and_mutation(tmp_path):
    assert run("gradcheck", "--seeds", 1, "--sizes", "4x4", "--out", tmp_path / "g.json") == 0
    rep = json.load(open(tmp_path / "g.json"))
    names = {r["name"] for r in rep["rows"]}
    assert {"conv3x3", "simplex_head", "chrom_loss", "shading_loss", "separation_loss"} <= names
    assert all(r["max_rel_err"] < 1e-3 for r in rep["rows"])
    assert run("gradcheck", "--seeds", 1, "--sizes", "4x4", "--corrupt", "relu") == 3
    assert run("gradcheck", "--corrupt", "nope") == 2
    assert run("gradcheck", "--sizes", "4by4") == 2


def test_report_rows(tmp_path):
    cfg = {"size": 16, "n_train": 4, "steps": 3, "batch": 2, "n_scenes": 2, "n_test": 3, "n_colors": 2}
    (tmp_path / "a.json").write_text(json.dumps(cfg))
    code = run("report", "--out", tmp_path / "r", "--config", tmp_path / "a.json")
    rows = list(csv.DictReader(open(tmp_path / "r" / "ablation.csv")))
    assert [r["variant"] for r in rows] == ["Chrom-Only", "Final-Only", "Full-Direct", "Full+physics", "SingleNet",
                                           "Oracle-alpha+physics"]
    rep = json.load(open(tmp_path / "r" / "ablation.json"))
    assert code == (0 if rep["passed"] else 3)
    assert rep["checks"]["conservation"]


def test_help_lists_subcommands(capsys):
    with pytest.raises(SystemExit):
        run("--help")
    out = capsys.readouterr().out
    for name in ("synth", "compose", "bench-gen", "train", "separate", "eval", "gradcheck", "report"):
        assert name in out
