import hashlib
import json
from pathlib import Path

import numpy as np
import pytest
import yaml
from PIL import Image

from conftest import TINY
from matchinggan.cli import main


def run(*argv):
    return main([str(a) for a in argv])


def digest_tree(root: Path) -> dict:
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*.png"))}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    ws = tmp_path_factory.mktemp("cli")
    assert run("make-toy", "--out", ws / "toy", "--categories", 8, "--per-category", 20, "--size", 16) == 0
    assert run("prepare-data", "--root", ws / "toy", "--split", "4,1,3", "--out", ws / "data") == 0
    cfg = {k: list(v) if isinstance(v, tuple) else v for k, v in TINY.items()}
    cfg.update(manifest=str(ws / "data/manifest.json"), split=str(ws / "data/split.json"), epochs=3)
    (ws / "tiny.yaml").write_text(yaml.safe_dump(cfg))
    assert run("train", "--config", ws / "tiny.yaml", "--epochs", 1, "--out", ws / "run") == 0
    return ws


def test_prepare_data_outputs(workspace, tmp_path):
    split = json.loads((workspace / "data/split.json").read_text())
    assert (len(split["seen"]), len(split["validation_seen"]), len(split["unseen"])) == (4, 1, 3)
    assert run("prepare-data", "--root", workspace / "toy", "--split", "4,1,3", "--out", tmp_path) == 0
    assert (tmp_path / "split.json").read_bytes() == (workspace / "data/split.json").read_bytes()
    assert run("prepare-data", "--root", workspace / "toy", "--split", "4,1,3", "--cap", 5, "--out", tmp_path) == 0
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert all(len(c["files"]) == 5 for c in manifest["categories"])


def test_prepare_data_errors(workspace, tmp_path, capsys):
    assert run("prepare-data", "--root", workspace / "toy", "--split", "4,1,4", "--out", tmp_path) == 2
    assert "sum to 9" in capsys.readouterr().err
    assert run("prepare-data", "--root", tmp_path / "nope", "--split", "1,0,0", "--out", tmp_path) == 1


def test_train_manifest_and_precedence(workspace):
    manifest = json.loads((workspace / "run/run_manifest.json").read_text())
    assert manifest["command"] == "train"
    assert manifest["config"]["lambda_r"] == 0.1  # not in the file: default recorded
    assert manifest["config"]["epochs"] == 1  # flag beats the file's 3
    assert manifest["seed"] == 0 and "finished" in manifest
    assert (workspace / "run/checkpoints/last.pt").exists()
    assert (workspace / "run/training_curves.png").exists()
    terms = {json.loads(line)["term"] for line in (workspace / "run/metrics.jsonl").read_text().splitlines()}
    assert "val_l1" in terms and "total_g" in terms


def test_train_rejects_bad_values(workspace, tmp_path, capsys):
    code = run("train", "--config", workspace / "tiny.yaml", "--lambda-r", -1, "--k", 0, "--out", tmp_path)
    assert code == 2
    err = capsys.readouterr().err
    assert "lambda_r: must be >= 0, got -1" in err and "k: must be >= 1" in err
    with pytest.raises(SystemExit) as info:
        run("train", "--coefficient-mode", "mixed")
    assert info.value.code == 2


def test_manifest_written_before_failure(tmp_path):
    assert run("train", "--out", tmp_path / "r", "--epochs", 1) == 1  # no dataset configured
    manifest = json.loads((tmp_path / "r/run_manifest.json").read_text())
    assert manifest["command"] == "train" and "finished" not in manifest


def test_generate_layout_determinism_and_replay(workspace, tmp_path):
    ckpt = workspace / "run/checkpoints/last.pt"
    args = ["generate", "--checkpoint", ckpt, "--count", 5, "--k2", 3, "--per-row", 4, "--sheet-rows", 2, "--seed", 7]
    assert run(*args, "--out", tmp_path / "a") == 0
    assert run(*args, "--out", tmp_path / "b") == 0
    unseen = json.loads((workspace / "data/split.json").read_text())["unseen"]
    for c in unseen:
        assert len(list((tmp_path / f"a/images/{c}").glob("*.png"))) == 5
    a = digest_tree(tmp_path / "a")
    assert a == digest_tree(tmp_path / "b")
    sheet = np.asarray(Image.open(tmp_path / f"a/sheets/{unseen[0]}.png"))
    pad, sep, size, cols, rows = 2, 4, 16, 3 + 4, 2
    assert sheet.shape[:2] == (pad + rows * (size + pad), pad + cols * (size + pad) + sep)
    assert run("replay", tmp_path / "a/run_manifest.json", "--out", tmp_path / "c") == 0
    assert digest_tree(tmp_path / "c") == a


def test_generate_unknown_category(workspace, tmp_path, capsys):
    assert run("generate", "--checkpoint", workspace / "run/checkpoints/last.pt", "--categories", "0,99",
               "--out", tmp_path) == 1
    assert "unknown category ids: [99]" in capsys.readouterr().err


def test_eval_protocols(workspace, tmp_path):
    ckpt = workspace / "run/checkpoints/last.pt"
    common = ["--checkpoint", ckpt, "--backbone-epochs", 1, "--backbone", tmp_path / "bb.pt"]
    assert run("eval", *common, "--protocol", "fid-is", "--count", 8, "--out", tmp_path / "f") == 0
    reports = [json.loads(line) for line in (tmp_path / "f/reports.jsonl").read_text().splitlines()]
    assert [r["metric"] for r in reports] == ["fid", "is"]
    assert reports[0]["protocol"]["count"] == 8
    assert "| Method | FID (↓) | IS (↑) |" in (tmp_path / "f/summary.md").read_text()

    assert run("eval", *common, "--protocol", "lowdata", "--shots", "5,10,15", "--n-generated", 4,
               "--out", tmp_path / "l") == 0
    reports = [json.loads(line) for line in (tmp_path / "l/reports.jsonl").read_text().splitlines()]
    assert [(r["protocol"]["augment"], r["protocol"]["shots"]) for r in reports] == [
        (False, 5), (False, 10), (False, 15), (True, 5), (True, 10), (True, 15)]
    summary = (tmp_path / "l/summary.md").read_text().splitlines()
    assert summary[0] == "| Method | 5 | 10 | 15 |"
    assert summary[2].startswith("| Standard |") and summary[3].startswith("| Ours |")
    assert (tmp_path / "l/lowdata.png").exists()

    assert run("eval", *common, "--protocol", "fewshot", "--n-way", 2, "--c-shot", 3, "--episodes", 2,
               "--n-generated", 4, "--out", tmp_path / "s") == 0
    rep = json.loads((tmp_path / "s/reports.jsonl").read_text())
    assert len(rep["protocol"]["episode_accuracies"]) == 2


def test_eval_unknown_protocol(capsys):
    with pytest.raises(SystemExit) as info:
        run("eval", "--checkpoint", "x", "--protocol", "bogus", "--out", "y")
    assert info.value.code == 2
    err = capsys.readouterr().err
    assert all(name in err for name in ("fid-is", "lowdata", "fewshot"))


def test_ablate_empty_spec(tmp_path, capsys):
    (tmp_path / "empty.yaml").write_text("")
    assert run("ablate", "--spec", tmp_path / "empty.yaml", "--out", tmp_path / "o") == 0
    assert (tmp_path / "o/ablation.jsonl").read_text() == ""
    assert (tmp_path / "o/ablation.tsv").read_text().count("\n") == 1


def test_ablate_small_grid(workspace, tmp_path):
    base = yaml.safe_load((workspace / "tiny.yaml").read_text())
    base["epochs"] = 1
    spec = {"base": base, "evaluation": {"shots": 5, "n_generated": 4, "bank_count": 8},
            "grids": [{"name": "k", "kind": "k_grid", "k1": [2, 3], "k2": [2]},
                      {"name": "lm", "kind": "settings", "rows": [
                          {"label": "λ_m=1", "overrides": {"lambda_m": 1}},
                          {"label": "λ_m=0", "overrides": {"lambda_m": 0}}]}]}
    (tmp_path / "spec.yaml").write_text(yaml.safe_dump(spec, allow_unicode=True))
    assert run("ablate", "--spec", tmp_path / "spec.yaml", "--backbone-epochs", 1, "--out", tmp_path / "o") == 0
    rows = [line.split("\t") for line in (tmp_path / "o/ablation.tsv").read_text().splitlines()[1:]]
    assert [(r[1], r[2], r[4]) for r in rows] == [("K2=2", "K1=2", "ok"), ("K2=2", "K1=3", "ok"),
                                                  ("λ_m=1", "", "ok"), ("λ_m=0", "", "ok")]
    assert all(r[5] and r[6] and r[7] for r in rows)
    assert (tmp_path / "o/k.png").exists()


def test_ablate_bad_spec(tmp_path):
    (tmp_path / "s.yaml").write_text("grids: [nonsense]\n")
    assert run("ablate", "--spec", tmp_path / "s.yaml", "--out", tmp_path / "o") == 2
