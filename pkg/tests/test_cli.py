import json
import subprocess
import sys
import time

import numpy as np
import pytest

from meshpool import kernels
from meshpool.cli import main
from meshpool.mesh import load_mesh, read_manifest
from meshpool.spectral import read_embedding


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("ds") / "data"
    assert main(["gen-synthetic", "--count", "12", "--n-min", "60", "--n-max", "80",
                 "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def trained(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("tr") / "run"
    assert main(["train", "--manifest", str(dataset / "manifest.tsv"), "--epochs", "3",
                 "--grid", "3", "--out", str(out)]) == 0
    return out


def test_gen_synthetic_outputs(dataset):
    m = read_manifest(dataset / "manifest.tsv")
    assert len(m.entries) == 12
    cfg = json.loads((dataset / "config.json").read_text())
    assert cfg["command"] == "gen-synthetic" and cfg["config"]["count"] == 12
    assert (dataset / "FORMAT").read_text().startswith("meshpool-dataset")


def test_refuses_overwrite(dataset, capsys):
    rc = main(["gen-synthetic", "--count", "12", "--n-min", "60", "--n-max", "80",
               "--out", str(dataset)])
    assert rc == 1
    assert "--force" in capsys.readouterr().err


def test_usage_errors(tmp_path):
    assert main([]) == 1
    assert main(["train", "--bogus"]) == 1
    assert main(["gen-synthetic", "--count", "3", "--out", str(tmp_path / "x")]) == 1
    assert main(["gradcheck", "--size", "3"]) == 1


def test_data_errors(tmp_path):
    assert main(["embed", "--manifest", str(tmp_path / "none.tsv"),
                 "--out", str(tmp_path / "e")]) == 2
    assert main(["eval", "--checkpoint", str(tmp_path / "none.ckpt"),
                 "--manifest", str(tmp_path / "none.tsv")]) == 2
    bad = tmp_path / "bad.off"
    bad.write_text("OFF\n3 1\n")
    assert main(["subsample", "--mesh", str(bad), "--out", str(tmp_path / "s.off")]) == 2


def test_config_file_precedence(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"count": 10, "n_min": 40, "n_max": 50, "seed": 3}))
    out = tmp_path / "d"
    assert main(["gen-synthetic", "--config", str(cfg), "--seed", "4", "--out", str(out)]) == 0
    echo = json.loads((out / "config.json").read_text())["config"]
    assert echo["count"] == 10 and echo["seed"] == 4
    cfg.write_text(json.dumps({"colour": 1}))
    assert main(["gen-synthetic", "--config", str(cfg), "--out", str(tmp_path / "e")]) == 1


def test_subsample(dataset, tmp_path):
    mesh_path = dataset / read_manifest(dataset / "manifest.tsv").entries[0].path
    out = tmp_path / "small.off"
    assert main(["subsample", "--mesh", str(mesh_path), "--target-n", "30",
                 "--out", str(out)]) == 0
    assert load_mesh(out).n == 30


def test_embed_and_align(dataset, tmp_path):
    emb_dir, al_dir = tmp_path / "emb", tmp_path / "al"
    assert main(["embed", "--manifest", str(dataset / "manifest.tsv"),
                 "--out", str(emb_dir)]) == 0
    files = sorted(emb_dir.glob("*.emb.tsv"))
    assert len(files) == 12
    assert main(["align", "--embeddings", str(emb_dir), "--reference", str(files[0]),
                 "--out", str(al_dir)]) == 0
    rows = (al_dir / "alignment.tsv").read_text().splitlines()
    assert len(rows) == 13
    self_row = next(r.split("\t") for r in rows if r.startswith(files[0].name))
    R = np.array([float(x) for x in self_row[3:]]).reshape(3, 3)
    np.testing.assert_allclose(R, np.eye(3), atol=1e-6)
    emb, _ = read_embedding(al_dir / files[1].name)
    assert emb.aligned
    assert len((al_dir / (files[1].name[:-8] + ".pi.txt")).read_text().split()) == emb.n


def test_train_outputs(trained):
    rep = json.loads((trained / "report.json").read_text())
    assert rep["epochs_run"] == 3 and len(rep["train_loss"]) == 3
    assert (trained / "model.ckpt").exists()
    cfg = json.loads((trained / "config.json").read_text())
    assert cfg["config"]["model"]["kernel"]["grid"] == [3, 3, 3]


def test_eval_and_clusters(dataset, trained, tmp_path, capsys):
    pred = tmp_path / "pred.json"
    assert main(["eval", "--checkpoint", str(trained / "model.ckpt"),
                 "--manifest", str(dataset / "manifest.tsv"), "--out", str(pred)]) == 0
    line = capsys.readouterr().out.strip()
    assert line.startswith("accuracy ")
    data = json.loads(pred.read_text())
    assert data["metric"] == json.loads((trained / "report.json").read_text())["test_metric"]
    mesh_path = dataset / read_manifest(dataset / "manifest.tsv").entries[0].path
    out = tmp_path / "clusters.off"
    assert main(["clusters", "--checkpoint", str(trained / "model.ckpt"),
                 "--mesh", str(mesh_path), "--out", str(out)]) == 0
    m = load_mesh(out)
    S = np.column_stack([m.fields[f"s1_{c:02d}"] for c in range(16)])
    np.testing.assert_allclose(S.sum(axis=1), 1.0, atol=1e-9)
    np.testing.assert_array_equal(m.parcels, S.argmax(axis=1))


def test_clusters_rejects_baseline_checkpoint(dataset, tmp_path):
    out = tmp_path / "ga"
    assert main(["train", "--manifest", str(dataset / "manifest.tsv"), "--epochs", "1",
                 "--grid", "3", "--pooling", "global_average", "--out", str(out)]) == 0
    mesh_path = dataset / read_manifest(dataset / "manifest.tsv").entries[0].path
    assert main(["clusters", "--checkpoint", str(out / "model.ckpt"), "--mesh", str(mesh_path),
                 "--out", str(tmp_path / "c.off")]) == 1


@pytest.mark.parametrize("cmd", ["train", "eval", "embed"])
def test_byte_identical_reruns(dataset, trained, tmp_path, cmd):
    man = str(dataset / "manifest.tsv")
    outs = []
    for i in range(2):
        out = tmp_path / f"{cmd}{i}"
        if cmd == "train":
            args = ["train", "--manifest", man, "--epochs", "2", "--grid", "3", "--out", str(out)]
        elif cmd == "eval":
            args = ["eval", "--checkpoint", str(trained / "model.ckpt"), "--manifest", man,
                    "--out", str(out)]
        else:
            args = ["embed", "--manifest", man, "--out", str(out)]
        assert main(args) == 0
        outs.append(out)
    a, b = outs
    if a.is_file():
        assert a.read_bytes() == b.read_bytes()
    else:
        names = sorted(p.name for p in a.iterdir())
        assert names == sorted(p.name for p in b.iterdir())
        for n in names:
            assert (a / n).read_bytes() == (b / n).read_bytes(), n


def test_gradcheck_passes_quickly(capsys):
    t = time.time()
    assert main(["gradcheck", "--size", "10"]) == 0
    if kernels.BACKEND == "compiled":  # the numpy fallback needs about 8 s
        assert time.time() - t < 5
    assert capsys.readouterr().out.startswith("PASS")


def test_gradcheck_catches_wrong_backward(monkeypatch, capsys):
    real = kernels.conv_backward

    def wrong(*args):
        dY, dW, dbasis = real(*args)
        return dY, 1.1 * dW, dbasis

    monkeypatch.setattr(kernels, "conv_backward", wrong)
    assert main(["gradcheck", "--size", "10"]) == 3
    assert capsys.readouterr().out.startswith("FAIL")


def test_console_script_help():
    out = subprocess.run([sys.executable, "-m", "meshpool.cli", "--help"],
                         capture_output=True, text=True)
    assert out.returncode == 0
    for cmd in ("gen-synthetic", "train", "eval", "gradcheck", "experiment"):
        assert cmd in out.stdout
