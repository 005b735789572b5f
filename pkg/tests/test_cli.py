"""End-to-end exercise of every CLI subcommand through main()."""
import json
import os

import pytest

from conftest import tiny_train_config
from quantcount.cli import main
from quantcount.config import save_config
from quantcount.data import load_manifest
from quantcount.qdm import read_qdm


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """gen-data + train once; later commands reuse the artifacts."""
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    rc = main(["gen-data", "--out", str(data),
               "--splits", "train,val",
               "--category", "circles,squares",
               "--min-count", "1", "--max-count", "4",
               "--num-scenes", "6,3",
               "--image-size", "32", "--density-size", "16",
               "--seed", "0"])
    assert rc == 0
    cfg = tiny_train_config(k=3, epochs=1, batch_size=3, data_dir=str(data))
    cfg_path = root / "cfg.json"
    save_config(cfg, cfg_path)
    run = root / "run"
    assert main(["train", "--config", str(cfg_path), "--out", str(run)]) == 0
    return {"root": root, "data": data, "cfg_path": cfg_path, "run": run}


def test_gen_data_layout(workspace):
    data = workspace["data"]
    train = load_manifest(data / "train.json")
    val = load_manifest(data / "val.json")
    assert len(train["scenes"]) == 6 and len(val["scenes"]) == 3
    # no test split requested, so both categories appear in train
    assert {s["category"] for s in train["scenes"]} <= {"circles", "squares"}
    for s in train["scenes"]:
        assert os.path.exists(s["image_path"])
        assert read_qdm(s["density_path"]).shape == (16, 16)


def test_gen_data_split_count_mismatch(tmp_path):
    with pytest.raises(SystemExit):
        main(["gen-data", "--out", str(tmp_path), "--splits", "train,val",
              "--num-scenes", "3"])


def test_train_artifacts(workspace, capsys):
    run = workspace["run"]
    assert (run / "best.ckpt").exists()
    assert (run / "last.ckpt").exists()
    rows = [json.loads(l) for l in (run / "metrics.jsonl").open()]
    assert len(rows) == 1 and "val_mae" in rows[0]


def test_eval_command(workspace, capsys):
    rc = main(["eval", "--ckpt", str(workspace["run"] / "best.ckpt"),
               "--manifest", str(workspace["data"] / "val.json")])
    assert rc == 0
    out = json.loads(capsys.readouterr().out)
    assert set(out) == {"mae", "rmse"}
    assert out["rmse"] >= 0.0


def test_predict_command(workspace, capsys, tmp_path):
    img = workspace["data"] / "images" / "val_00000.png"
    rc = main(["predict", "--ckpt", str(workspace["run"] / "best.ckpt"),
               "--image", str(img), "--text", "a photo of circles",
               "--out", str(tmp_path)])
    assert rc == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0].startswith("count: ")
    float(lines[0].split(": ")[1])
    assert read_qdm(tmp_path / "density.qdm").shape == (16, 16)
    assert (tmp_path / "heatmap.png").exists()


def test_gradcheck_command(tmp_path, capsys):
    cfg_path = tmp_path / "gc.json"
    save_config(tiny_train_config(k=3, precision="double"), cfg_path)
    rc = main(["gradcheck", "--config", str(cfg_path), "--coords", "2"])
    out = capsys.readouterr().out
    assert rc == 0, out
    assert "prompts" in out and "FAIL" not in out


def test_missing_subcommand_exits():
    with pytest.raises(SystemExit):
        main([])
    with pytest.raises(SystemExit):
        main(["frobnicate"])
