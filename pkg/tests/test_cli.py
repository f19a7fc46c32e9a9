import json
import os

import numpy as np
import pytest

from cvae.checkpoint import load_dataset, load_model
from cvae.cli import main
from cvae.evaluate import read_embedding
from cvae.pgm import read_pgm


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    return tmp_path


@pytest.fixture
def datasets(workdir):
    assert main(["synthesize", "--n-target", "120", "--n-background", "80", "--seed", "2", "--out-target", "t.ds", "--out-background", "b.ds"]) == 0
    return workdir


def test_no_arguments_is_usage_error(capsys):
    assert main([]) == 1
    assert "usage" in capsys.readouterr().err


def test_unknown_subcommand_and_flag(capsys):
    assert main(["frobnicate"]) == 1
    assert main(["score", "--nope"]) == 1
    assert "usage" in capsys.readouterr().err


def test_synthesize_outputs(datasets):
    t = load_dataset("t.ds")
    assert t.samples.shape == (120, 784) and len(load_dataset("b.ds")) == 80
    manifest = json.loads(open("t.ds.manifest.json").read())
    assert manifest["config"]["recipe"]["seed"] == 2 and set(manifest["outputs"]) == {"t.ds", "b.ds"}


def test_train_embed_score_generate(datasets, capsys):
    (datasets / "c.cfg").write_text("epochs = 5\nbatch_size = 32\nhidden_dim = 16\n")
    assert main(["train", "--model", "cvae", "--config", "c.cfg", "--target", "t.ds", "--background", "b.ds", "--out", "m.ckpt", "--epochs", "2"]) == 0
    manifest = json.loads(open("m.ckpt.manifest.json").read())
    # flags beat the config file
    assert manifest["config"]["epochs"] == 2 and manifest["config"]["hidden_dim"] == 16
    assert "m.ckpt" in manifest["outputs"] and manifest["training"]["steps"] == 2 * 4
    assert len(open("m.ckpt.losses.csv").read().splitlines()) == 3

    assert main(["embed", "--model", "m.ckpt", "--data", "t.ds", "--out", "e.csv"]) == 0
    emb = read_embedding("e.csv")
    assert emb.points.shape == (120, 2) and emb.space_tag == "cvae_salient"
    capsys.readouterr()
    assert main(["score", "--embedding", "e.csv"]) == 0
    out = capsys.readouterr().out.strip()
    assert len(out.split(".")[1]) == 4 and -1 <= float(out) <= 1

    assert main(["generate", "--model", "m.ckpt", "--points", "5", "--out", "g.pgm"]) == 0
    assert read_pgm("g.pgm").shape == (5 * 28 + 6 * 2,) * 2


def test_vae_and_denoise(datasets, capsys):
    assert main(["train", "--model", "vae", "--target", "t.ds", "--out", "v.ckpt", "--epochs", "1", "--s-dim", "4", "--hidden-dim", "8"]) == 0
    assert load_model("v.ckpt").latent_dim == 4
    assert main(["embed", "--model", "v.ckpt", "--data", "t.ds", "--out", "ve.csv"]) == 0
    assert read_embedding("ve.csv").space_tag == "vae_latent"

    assert main(["train", "--target", "t.ds", "--background", "b.ds", "--out", "m.ckpt", "--epochs", "1", "--hidden-dim", "8"]) == 0
    assert main(["denoise", "--model", "m.ckpt", "--data", "t.ds", "--out", "d.pgm"]) == 2
    assert "zero_bias" in capsys.readouterr().err
    assert main(["train", "--target", "t.ds", "--background", "b.ds", "--out", "z.ckpt", "--epochs", "1", "--hidden-dim", "8", "--zero-bias"]) == 0
    assert main(["denoise", "--model", "z.ckpt", "--data", "t.ds", "--count", "4", "--out", "d.pgm", "--out-data", "d.ds"]) == 0
    assert read_pgm("d.pgm").shape == (2 * 28 + 3 * 2, 4 * 28 + 5 * 2)
    assert load_dataset("d.ds").samples.shape == (120, 784)


def test_runtime_failures_exit_2(workdir, capsys):
    assert main(["score", "--embedding", "missing.csv"]) == 2
    (workdir / "bad.ckpt").write_bytes(b"garbage")
    assert main(["generate", "--model", "bad.ckpt", "--out", "g.pgm"]) == 2
    assert main(["synthesize", "--images-path", "nope.idx", "--out-target", "t.ds"]) == 2
    err = capsys.readouterr().err
    assert "labels file" in err and "nope.idx" in err


def test_cvae_train_needs_background(datasets):
    assert main(["train", "--target", "t.ds", "--out", "m.ckpt"]) == 1


def test_tabular_ingest(workdir):
    rows = np.random.default_rng(0).normal(size=(30, 6))
    (workdir / "x.csv").write_text("\n".join(",".join(f"{v:.6f}" for v in r) for r in rows) + "\n")
    (workdir / "y.csv").write_text("\n".join(",".join(f"{v:.6f}" for v in r) for r in rows[:20]) + "\n")
    assert main(["synthesize", "--csv", "x.csv", "--background-csv", "y.csv", "--normalize", "--out-target", "x.ds", "--out-background", "y.ds"]) == 0
    assert main(["train", "--target", "x.ds", "--background", "y.ds", "--out", "g.ckpt", "--epochs", "1", "--recon-model", "gaussian", "--batch-size", "8"]) == 0


def test_sweep_command(workdir):
    (workdir / "s.cfg").write_text(
        "sweep_kind = background_noise\ngrid = 0, 2\ntrials = 1\nepochs = 1\nn_target = 60\nn_background = 60\nhidden_dim = 8\n"
    )
    assert main(["sweep", "--spec", "s.cfg", "--out", "out/r.csv", "--trials", "2"]) == 0
    assert len(open("out/r.csv").read().splitlines()) == 1 + 4
    assert json.loads(open("out/r.csv.manifest.json").read())["config"]["trials"] == 2
    (workdir / "bad.cfg").write_text("sweep_kind = sideways\ngrid = 0\n")
    assert main(["sweep", "--spec", "bad.cfg", "--out", "r.csv"]) == 1


def test_reproduce_unknown_figure(workdir):
    assert main(["reproduce", "fig99"]) == 1


TINY = ["--trials", "1", "--epochs", "1", "--n-target", "90", "--n-background", "90"]


def test_reproduce_fig6a_grid(workdir):
    assert main(["reproduce", "fig6a", "--out-dir", "a"] + TINY) == 0
    lines = open("a/fig6a_scale.csv").read().splitlines()[1:]
    values = sorted({float(l.split(",")[1]) for l in lines})
    assert values == [0.25 * i for i in range(9)]
    assert len(lines) == 9 * 2
    assert os.path.exists("a/fig6a_samples.pgm") and os.path.exists("a/manifest.json")


def test_reproduce_fig4_twice_identical(workdir):
    for d in ("r1", "r2"):
        assert main(["reproduce", "fig4", "--seed", "7", "--out-dir", d] + TINY) == 0
    files = sorted(os.listdir("r1"))
    assert files == sorted(os.listdir("r2"))
    assert {"cvae_trial0.ckpt", "vae_trial0_embedding.csv", "scores.csv", "cvae_trial0_sweep.pgm"} <= set(files)
    for name in files:
        assert open(os.path.join("r1", name), "rb").read() == open(os.path.join("r2", name), "rb").read(), name
