import json
from pathlib import Path

import numpy as np
import pytest

from phgcn.cli import main
from phgcn.preprocess import read_dataset
from phgcn.tensorio import read_json, read_tensor

CONFIGS = Path(__file__).resolve().parents[1] / "configs"

FAST = {
    "preprocess": {"target_spacing": 5.6, "sax_shape": [36, 36, 3], "ch4_shape": [40, 40]},
    "model": {"encoder": {"sax_shape": [36, 36, 3], "ch4_shape": [40, 40]}},
    "train": {"epochs": 1},
    "experiment": {"per_class_test": 2},
}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "fast.json").write_text(json.dumps(FAST))
    assert main(["gen-data", "--out", str(root / "raw"), "--n-per-class", "4,4,4", "--seed", "5"]) == 0
    assert main(["preprocess", "--in", str(root / "raw"), "--out", str(root / "data"),
                 "--config", str(root / "fast.json")]) == 0
    return root


def _files(d):
    # run_metadata.json records the output path itself, so it differs between directories by design
    return {p.relative_to(d): p.read_bytes() for p in sorted(d.rglob("*"))
            if p.is_file() and p.name != "run_metadata.json"}


def test_gen_and_preprocess_outputs(workspace):
    manifest = read_json(workspace / "raw" / "manifest.json")
    assert [e["label"] for e in manifest["samples"]] == [0] * 4 + [1] * 4 + [2] * 4
    samples, _ = read_dataset(workspace / "data")
    assert len(samples) == 12 and samples[0].sax.shape == (36, 36, 3, 5)


def test_gen_data_is_byte_identical(workspace, tmp_path):
    assert main(["gen-data", "--out", str(tmp_path / "raw"), "--n-per-class", "4,4,4", "--seed", "5"]) == 0
    a, b = _files(workspace / "raw"), _files(tmp_path / "raw")
    assert a.keys() == b.keys() and all(a[k] == b[k] for k in a)


def test_train_twice_gives_identical_checkpoints(workspace, tmp_path, capsys):
    args = ["train", "--data", str(workspace / "data"), "--config", str(workspace / "fast.json"), "--seed", "1"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    a, b = _files(tmp_path / "a"), _files(tmp_path / "b")
    assert a.keys() == b.keys() and all(a[k] == b[k] for k in a)
    names = read_json(tmp_path / "a" / "params.json")
    assert "gcn.w0" in names and read_tensor(tmp_path / "a" / names["gcn.w0"]["file"]).shape == (1, 8)
    assert (tmp_path / "a" / "history.csv").read_text().startswith("epoch,mean_loss\n1,")


def test_eval_on_ids(workspace, tmp_path, capsys):
    ck = tmp_path / "ck"
    assert main(["train", "--data", str(workspace / "data"), "--config", str(workspace / "fast.json"),
                 "--out", str(ck)]) == 0
    (tmp_path / "ids.txt").write_text("s0000\ns0004\ns0008\n")
    out = tmp_path / "probs.csv"
    assert main(["eval", "--model", str(ck), "--data", str(workspace / "data"), "--ids", str(tmp_path / "ids.txt"),
                 "--out", str(out)]) == 0
    rows = out.read_text().splitlines()
    assert rows[0] == "id,label,p0,p1,p2,predicted" and len(rows) == 4
    p = np.array([[float(v) for v in r.split(",")[2:5]] for r in rows[1:]])
    assert np.allclose(p.sum(1), 1, atol=1e-8)
    assert "auc_macro=" in capsys.readouterr().out


def test_bootstrap_csv_and_jobs_determinism(workspace, tmp_path):
    base = ["bootstrap", "--data", str(workspace / "data"), "--config", str(workspace / "fast.json"),
            "--repeats", "3", "--seed", "2"]
    assert main(base + ["--out", str(tmp_path / "a.csv")]) == 0
    assert main(base + ["--jobs", "2", "--out", str(tmp_path / "b.csv")]) == 0
    a = (tmp_path / "a.csv").read_text()
    assert a == (tmp_path / "b.csv").read_text()
    assert (tmp_path / "a.csv.splits.json").read_bytes() == (tmp_path / "b.csv.splits.json").read_bytes()
    lines = a.splitlines()
    assert [l.split(",")[0] for l in lines[1:6]] == ["0", "1", "2", "mean", "std"]
    assert read_json(tmp_path / "a.csv.meta.json")["args"]["seed"] == 2


def test_sweep_and_ablate_small(workspace, tmp_path):
    common = ["--data", str(workspace / "data"), "--config", str(workspace / "fast.json"), "--repeats", "1"]
    assert main(["sweep", *common, "--min", "4", "--max", "6", "--step", "1", "--out", str(tmp_path / "s.csv"),
                 "--svg", str(tmp_path / "s.svg")]) == 0
    assert [l.split(",")[0] for l in (tmp_path / "s.csv").read_text().splitlines()[1:]] == ["4", "5", "6"]
    assert (tmp_path / "s.svg").read_text().startswith("<svg")
    assert main(["ablate", *common, "--mode", "gcn", "--out", str(tmp_path / "g.csv")]) == 0
    rows = (tmp_path / "g.csv").read_text().splitlines()
    assert rows[0].startswith("model,AUC_mean,AUC_std,ACC_mean") and [r.split(",")[0] for r in rows[1:]] == [
        "Full_model", "No_GCN"]
    # both arms read the one recorded plan file; reusing it reproduces the table
    assert main(["ablate", *common, "--mode", "gcn", "--splits", str(tmp_path / "g.csv.splits.json"),
                 "--out", str(tmp_path / "g2.csv")]) == 0
    assert (tmp_path / "g2.csv").read_bytes() == (tmp_path / "g.csv").read_bytes()


def test_gradcheck_command(capsys):
    assert main(["gradcheck", "--seed", "3"]) == 0
    out = capsys.readouterr().out
    assert out.rstrip().splitlines()[-1].startswith("PASS")


@pytest.mark.parametrize("argv", [
    [], ["frobnicate"], ["train", "--data", "x"], ["gen-data", "--out", "x", "--n-per-class", "1,b,2"],
    ["bootstrap", "--data", "x", "--out", "y", "--bogus"],
])
def test_usage_errors_exit_1(argv, capsys):
    assert main(argv) == 1
    err = capsys.readouterr().err
    assert err.startswith("error:") and len(err.strip().splitlines()) == 1


def test_validation_errors_exit_1(workspace, tmp_path, capsys):
    assert main(["gen-data", "--out", str(tmp_path / "r"), "--n-per-class", "0,0,0"]) == 1
    (tmp_path / "bad.json").write_text('{"train": {"lr": 1}}')
    assert main(["train", "--data", str(workspace / "data"), "--config", str(tmp_path / "bad.json"),
                 "--out", str(tmp_path / "c")]) == 1
    assert "unknown key" in capsys.readouterr().err
    assert main(["train", "--data", str(tmp_path / "missing"), "--out", str(tmp_path / "c")]) == 1
    # the shipped default config expects full-size inputs, which this dataset is not
    assert main(["train", "--data", str(workspace / "data"), "--config", str(CONFIGS / "default.json"),
                 "--out", str(tmp_path / "c")]) == 1
    assert "re-run preprocess" in capsys.readouterr().err


def test_corrupt_tensor_exit_1(workspace, tmp_path):
    ck = tmp_path / "ck"
    assert main(["train", "--data", str(workspace / "data"), "--config", str(workspace / "fast.json"),
                 "--out", str(ck)]) == 0
    f = ck / "gcn.w0.pht"
    f.write_bytes(b"XXXX" + f.read_bytes()[4:])
    assert main(["eval", "--model", str(ck), "--data", str(workspace / "data")]) == 1


def test_runtime_failure_exit_2(workspace, tmp_path, capsys):
    raw = tmp_path / "raw"
    assert main(["gen-data", "--out", str(raw), "--n-per-class", "1,0,0"]) == 0
    m = read_tensor(raw / "tensors" / "s0000_pa_mask_raw.pht")
    from phgcn.tensorio import write_tensor
    write_tensor(raw / "tensors" / "s0000_pa_mask_raw.pht", np.zeros_like(m))
    assert main(["preprocess", "--in", str(raw), "--out", str(tmp_path / "d"),
                 "--config", str(workspace / "fast.json")]) == 2
    assert "EmptyPaMask" in capsys.readouterr().err
