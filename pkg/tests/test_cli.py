import json
import shutil
import subprocess
import sys

import pytest

from ganmem import cli
from ganmem.training import NumericalError

TINY_YAML = """\
arch: {noise_dim: 16, image_size: 8, n_blocks: 1, block_channel_schedule: [8]}
train: {lr: 0.001, steps: 5, batch_size: 8}
data: {domain: source, n: 64}
eval: {n_samples: 64, digest_samples: 16}
energy: {keep: {B0: 80}}
stream: {n_tasks: 2, classes_per_task: 2, n_train: 10, n_test: 5}
classifier: {steps_per_task: 5, batch_per_task: 4, width: 4}
"""


def tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "tiny.yaml").write_text(TINY_YAML)
    return d


@pytest.fixture(scope="module")
def trained(workdir):
    cfg = str(workdir / "tiny.yaml")
    ck = workdir / "ck"
    assert cli.main(["pretrain-base", "--config", cfg, "--out", str(ck)]) == 0
    assert cli.main(["train-task", "--config", cfg, "--checkpoint", str(ck), "--domain", "rings"]) == 0
    assert cli.main(["train-task", "--config", cfg, "--checkpoint", str(ck), "--domain", "stripes",
                     "--compressed", "--log", str(workdir / "t2.ndjson")]) == 0
    return ck


def run(*argv):
    return cli.main([str(a) for a in argv])


def test_pretrain_is_deterministic(workdir, trained):
    again = workdir / "ck_again"
    cfg = workdir / "tiny.yaml"
    assert run("pretrain-base", "--config", cfg, "--out", again) == 0
    for dom, extra in (("rings", []), ("stripes", ["--compressed", "--log", workdir / "t2b.ndjson"])):
        assert run("train-task", "--config", cfg, "--checkpoint", again, "--domain", dom, *extra) == 0
    assert tree_bytes(again) == tree_bytes(trained)
    assert (workdir / "t2.ndjson").read_bytes() == (workdir / "t2b.ndjson").read_bytes()


def test_checkpoint_records_history(trained):
    meta = json.loads((trained / "manifest.json").read_text())["meta"]
    assert [(h["task"], h["after"]) for h in meta["history"]] == [(1, 1), (1, 2), (2, 2)]
    first = [h for h in meta["history"] if h["task"] == 1]
    assert first[0]["sample_sha256"] == first[1]["sample_sha256"]
    assert meta["tasks"]["2"]["compressed"] is True
    assert meta["runs"][0]["command"] == "pretrain-base"


def test_sample_is_deterministic(trained, tmp_path):
    for name in ("a", "b"):
        assert run("sample", "--checkpoint", trained, "--task", 1, "--n", 6, "--seed", 3, "--out", tmp_path / name) == 0
    assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")
    assert (tmp_path / "a" / "grid.png").exists()
    assert len(list((tmp_path / "a").glob("sample_*.png"))) == 6


def test_interpolation_endpoint_matches_task(trained, tmp_path):
    run("sample", "--checkpoint", trained, "--task", 1, "--n", 4, "--out", tmp_path / "t")
    run("sample", "--checkpoint", trained, "--interpolate", 1, 2, 0, "--n", 4, "--out", tmp_path / "i")
    assert (tmp_path / "t" / "grid.png").read_bytes() == (tmp_path / "i" / "grid.png").read_bytes()


def test_groups_none_is_source(trained, tmp_path):
    run("sample", "--checkpoint", trained, "--task", 1, "--groups", "none", "--n", 4, "--out", tmp_path / "n")
    run("sample", "--checkpoint", trained, "--task", 0, "--n", 4, "--out", tmp_path / "s")
    run("sample", "--checkpoint", trained, "--task", 1, "--n", 4, "--out", tmp_path / "t")
    grid = lambda d: (tmp_path / d / "grid.png").read_bytes()  # noqa: E731
    assert grid("n") == grid("s") != grid("t")


def test_evaluate_and_plot(trained, workdir, tmp_path):
    cfg = workdir / "tiny.yaml"
    assert run("evaluate", "--config", cfg, "--checkpoint", trained, "--out", tmp_path / "ev") == 0
    tsv = (tmp_path / "ev" / "forgetting.tsv").read_text().splitlines()
    assert tsv[1].split("\t")[1] == tsv[1].split("\t")[2]
    current = [json.loads(x) for x in (tmp_path / "ev" / "current.ndjson").read_text().splitlines()]
    assert all(c["identical_to_after_own_task"] for c in current)
    for name in ("p1", "p2"):
        assert run("plot", tmp_path / "ev" / "forgetting.ndjson", "--out", tmp_path / name) == 0
    assert tree_bytes(tmp_path / "p1") == tree_bytes(tmp_path / "p2")


def test_lifelong_classify_naive(workdir, tmp_path):
    out = tmp_path / "lc"
    assert run("lifelong-classify", "--config", workdir / "tiny.yaml", "--mode", "naive", "--out", out) == 0
    assert (out / "accuracy_naive.tsv").read_text().startswith("after\\task")
    assert run("plot", out / "accuracy_naive.ndjson", "--out", tmp_path / "fig") == 0
    assert (tmp_path / "fig" / "accuracy.png").exists()


def test_exit_code_config_errors(workdir, trained, tmp_path, capsys):
    cfg = workdir / "tiny.yaml"
    assert run("pretrain-base", "--config", cfg, "--set", "train.lr=-1", "--out", tmp_path / "x") == 2
    assert run("pretrain-base", "--config", cfg, "--set", "nosuch.key=1", "--out", tmp_path / "x") == 2
    assert run("pretrain-base", "--config", cfg, "--set", "broken", "--out", tmp_path / "x") == 2
    assert run("train-task", "--config", cfg, "--checkpoint", trained, "--task-id", 1) == 2
    assert run("sample", "--checkpoint", trained, "--task", 1, "--class-id", 5, "--out", tmp_path / "x") == 2
    assert run("lifelong-classify", "--config", cfg, "--mode", "replay", "--out", tmp_path / "x") == 2
    bad = tmp_path / "bad.yaml"
    bad.write_text("arch: {noise_dim: 16, colour: 3}\n")
    assert run("pretrain-base", "--config", bad, "--out", tmp_path / "x") == 2
    assert "config error" in capsys.readouterr().err


def test_exit_code_missing_artifacts(trained, workdir, tmp_path):
    assert run("sample", "--checkpoint", tmp_path / "nope", "--out", tmp_path / "x") == 4
    assert run("sample", "--checkpoint", trained, "--task", 9, "--out", tmp_path / "x") == 4
    assert run("plot", tmp_path / "none.ndjson", "--out", tmp_path / "x") == 4
    broken = tmp_path / "broken"
    shutil.copytree(trained, broken)
    next((broken / "blobs").rglob("*.f32")).write_bytes(b"\0\0\0\0")
    assert run("sample", "--checkpoint", broken, "--task", 1, "--out", tmp_path / "x") == 4


def test_exit_code_numeric_failure(trained, workdir, tmp_path, monkeypatch):
    ck = tmp_path / "ck"
    shutil.copytree(trained, ck)

    def diverge(*a, **k):
        raise NumericalError("non-finite discriminator loss at step 1")

    monkeypatch.setattr(cli, "train_task", diverge)
    assert run("train-task", "--config", workdir / "tiny.yaml", "--checkpoint", ck, "--domain", "dots") == 3
    # the failed run leaves the checkpoint untouched
    assert tree_bytes(ck) == tree_bytes(trained)


def test_console_script_entry(trained, tmp_path):
    exe = shutil.which("ganmem")
    cmd = [exe] if exe else [sys.executable, "-m", "ganmem.cli"]
    out = subprocess.run(cmd + ["sample", "--checkpoint", str(trained), "--n", "2", "--out", str(tmp_path / "s")],
                         capture_output=True, text=True)
    assert out.returncode == 0, out.stderr
    assert json.loads(out.stdout)["n"] == 2
    missing = subprocess.run(cmd + ["sample", "--checkpoint", str(tmp_path / "none"), "--out", str(tmp_path / "s")],
                             capture_output=True, text=True)
    assert missing.returncode == 4
