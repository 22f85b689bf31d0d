import csv
import json
import subprocess
import sys

import pytest

from rivercast import cli

SMALL_MODEL = "d_hidden=6\nd_fusion=8\nbatch=8\nstride=4\nval_stride=7\ndtype=float32\nft.max_batches=2\n"


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run("gen-data", "--reaches", 12, "--split", "120,40,40", "--seed", 3,
               "--obs-manning-scale", 1.3, "--out", root / "data") == 0
    (root / "small.cfg").write_text(SMALL_MODEL)
    assert run("pretrain", "--data", root / "data", "--config", root / "small.cfg", "--epochs", 2,
               "--max-batches", 3, "--out", root / "ckpt") == 0
    return root


def test_gen_data_is_reproducible(tmp_path):
    for name in ("a", "b"):
        assert run("gen-data", "--reaches", 6, "--split", "30,10,10", "--seed", 5, "--out", tmp_path / name) == 0
    for f in ("graph.json", "forcing.bin", "hydro.bin", "norm.json"):
        assert cli.sha256(tmp_path / "a" / f) == cli.sha256(tmp_path / "b" / f)
    man = json.loads((tmp_path / "a" / cli.MANIFEST).read_text())
    assert man["command"] == "gen-data" and man["seeds"] == {"data": 5}
    assert man["outputs"]["hydro.bin"] == cli.sha256(tmp_path / "a" / "hydro.bin")


def test_env_seed(tmp_path, monkeypatch):
    monkeypatch.setenv("GRC_SEED", "5")
    assert run("gen-data", "--reaches", 6, "--split", "30,10,10", "--out", tmp_path / "env") == 0
    monkeypatch.delenv("GRC_SEED")
    assert run("gen-data", "--reaches", 6, "--split", "30,10,10", "--seed", 5, "--out", tmp_path / "flag") == 0
    assert cli.sha256(tmp_path / "env" / "hydro.bin") == cli.sha256(tmp_path / "flag" / "hydro.bin")
    monkeypatch.setenv("GRC_SEED", "x")
    assert run("gen-data", "--reaches", 6, "--split", "30,10,10", "--out", tmp_path / "bad") == 1


def test_unknown_flag_exits_1():
    proc = subprocess.run([sys.executable, "-m", "rivercast.cli", "gen-data", "--bogus", "--out", "x"],
                          capture_output=True, text=True)
    assert proc.returncode == 1 and "unrecognized" in proc.stderr


def test_missing_input_exits_1(tmp_path, capsys):
    assert run("pretrain", "--data", tmp_path / "nope", "--out", tmp_path / "o") == 1
    assert "not found" in capsys.readouterr().err
    assert run("report", "--run", tmp_path / "nope") == 1


def test_bad_config_key_exits_1(tmp_path, workspace):
    (tmp_path / "bad.cfg").write_text("learning_rate=0.1\n")
    assert run("pretrain", "--data", workspace / "data", "--config", tmp_path / "bad.cfg",
               "--out", tmp_path / "o") == 1


def test_overwrite_protection(tmp_path):
    out = tmp_path / "net"
    assert run("gen-network", "--reaches", 5, "--out", out) == 0
    assert run("gen-network", "--reaches", 5, "--out", out) == 1
    assert run("gen-network", "--reaches", 7, "--refine", 2, "--out", out, "--overwrite") == 0
    assert json.loads((out / "graph_fine.json").read_text())["n_reaches"] == 14
    assert (out / "coarse_to_fine.json").exists()


def test_config_parsing(tmp_path):
    (tmp_path / "c.json").write_text('{"d_hidden": 4, "ft.base_lr": 0.001}')
    model, train, ft = cli.split_config(cli.parse_config(tmp_path / "c.json"))
    assert model == {"d_hidden": 4} and ft == {"base_lr": 0.001} and train == {}
    (tmp_path / "c.txt").write_text("# comment\nlr = 3e-3\nmax_batches=none\nablate_topo=true\n")
    assert cli.parse_config(tmp_path / "c.txt") == {"lr": 3e-3, "max_batches": None, "ablate_topo": True}


def test_checkpoint_layout(workspace):
    ck = workspace / "ckpt"
    for name in ("params.json", "norm.json", "train_log.csv", cli.MANIFEST):
        assert (ck / name).exists()
    rows = list(csv.DictReader(open(ck / "train_log.csv")))
    assert len(rows) == 2


def test_ablate_writes_eight_variants(tmp_path, workspace):
    out = tmp_path / "abl"
    assert run("ablate", "--data", workspace / "data", "--config", workspace / "small.cfg", "--epochs", 1,
               "--max-batches", 1, "--out", out) == 0
    assert len(list(out.glob("variant_*/params.json"))) == 8
    rows = list(csv.DictReader(open(out / "ablation_matrix.csv")))
    assert len(rows) == 8 and {"stat", "temp", "topo", "nse"} <= set(rows[0])


def test_finetune_sweep_eval_report(tmp_path, workspace):
    obs = workspace / "data" / "obs"
    ft = tmp_path / "ft"
    assert run("finetune", "--checkpoint", workspace / "ckpt", "--data", obs, "--config", workspace / "small.cfg",
               "--gauges", 6, "--ft-epochs", 1, "--out", ft) == 0
    rows = list(csv.DictReader(open(ft / "finetune.csv")))
    assert {(r["model"], r["group"]) for r in rows} == {(m, g) for m in ("pretrained", "finetuned")
                                                        for g in ("supervised", "unsupervised")}

    sweep = tmp_path / "sweep"
    assert run("sweep", "--checkpoint", workspace / "ckpt", "--data", obs, "--config", workspace / "small.cfg",
               "--gauges", 6, "--ratios", "0.5,1.0", "--ft-epochs", 1, "--scratch", "--epochs", 1,
               "--max-batches", 1, "--out", sweep) == 0
    sets = json.loads((sweep / "gauge_sets.json").read_text())
    assert set(sets[0]["supervised"]) <= set(sets[1]["supervised"]) and sets[1]["unsupervised"] == []

    run_dir = tmp_path / "run"
    assert run("eval", "--checkpoint", workspace / "ckpt", "--data", workspace / "data", "--name", "full",
               "--spinup", 6, "--out", run_dir) == 0
    assert run("eval", "--checkpoint", workspace / "ckpt", "--data", workspace / "data", "--name", "full",
               "--out", run_dir) == 1
    (run_dir / "sweep.csv").write_bytes((sweep / "sweep.csv").read_bytes())
    assert run("report", "--run", run_dir) == 0
    summary = json.loads((run_dir / "summary.json").read_text())
    assert "full" in summary["experiments"] and summary["experiments"]["_extras"]["spinup"]
    rows = list(csv.DictReader(open(run_dir / "metrics.csv")))
    assert len(rows) == 12 * 3 * 7
    for png in ("leadtime_nse.png", "nse_cdf.png", "spinup.png", "sweep.png"):
        assert (run_dir / png).exists()
    first = (run_dir / "metrics.csv").read_bytes()
    assert run("report", "--run", run_dir, "--no-figures") == 0
    assert (run_dir / "metrics.csv").read_bytes() == first
