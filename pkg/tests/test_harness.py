"""Training loop, evaluation, checkpoints, config files, and gradcheck."""
import json
import math
import os

import numpy as np
import pytest
import torch

from conftest import tiny_train_config
from oracles import mae_oracle, rmse_oracle
from quantcount.config import (config_from_dict, config_to_dict, load_config,
                               save_config)
from quantcount.data import generate_split, read_png
from quantcount.gradcheck import run_gradcheck, format_report
from quantcount.metrics import mae, rmse
from quantcount.model import build_model
from quantcount.qdm import read_qdm
from quantcount.train import (evaluate, image_to_tensor, load_checkpoint,
                              predict, save_checkpoint, state_hash, train,
                              write_heatmap)


@pytest.fixture(scope="module")
def dataset32(tmp_path_factory):
    """Tiny two-category dataset matching the unit-test model geometry."""
    root = tmp_path_factory.mktemp("data32")
    for split, n, seed in (("train", 6, 0), ("val", 4, 1)):
        generate_split(root, split, ("circles", "squares"), n,
                       min_count=1, max_count=4, seed=seed,
                       image_size=32, density_size=16)
    return root


@pytest.fixture(scope="module")
def trained(dataset32, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    cfg = tiny_train_config(k=3, epochs=2, batch_size=3,
                            data_dir=str(dataset32))
    return train(cfg, out), out


# ---------------------------------------------------------------------------
# metrics


def test_metrics_hand_values():
    assert mae([0.0, 3.0], [0.0, 0.0]) == 1.5
    assert abs(rmse([0.0, 3.0], [0.0, 0.0]) - math.sqrt(4.5)) < 1e-12
    assert mae([2.0], [2.0]) == 0.0


def test_metrics_match_oracle():
    rng = np.random.default_rng(0)
    p, a = rng.uniform(0, 50, 64), rng.uniform(0, 50, 64)
    assert abs(mae(p, a) - mae_oracle(p, a)) < 1e-12
    assert abs(rmse(p, a) - rmse_oracle(p, a)) < 1e-12


def test_metrics_validation():
    for fn in (mae, rmse):
        with pytest.raises(ValueError):
            fn([1.0], [1.0, 2.0])
        with pytest.raises(ValueError):
            fn([], [])
        with pytest.raises(ValueError):
            fn([[1.0]], [[1.0]])


# ---------------------------------------------------------------------------
# config files


def test_config_json_round_trip(tmp_path):
    cfg = tiny_train_config(lr=3e-4, shared_vg=True)
    path = tmp_path / "cfg.json"
    save_config(cfg, path)
    back = load_config(path)
    assert back == cfg
    assert isinstance(back.model.vision.skip_stages, tuple)
    assert isinstance(back.model.categories, tuple)


def test_config_rejects_unknown_keys():
    d = config_to_dict(tiny_train_config())
    d["learning_rate"] = 1e-3
    with pytest.raises(ValueError, match="unknown"):
        config_from_dict(d)
    d2 = config_to_dict(tiny_train_config())
    d2["model"]["vision"]["patches"] = 8
    with pytest.raises(ValueError, match="unknown"):
        config_from_dict(d2)


def test_config_validation_failures():
    bad = config_to_dict(tiny_train_config())
    bad["k"] = 4
    with pytest.raises(ValueError):
        config_from_dict(bad)
    bad2 = config_to_dict(tiny_train_config())
    bad2["prompt_depth"] = 99
    with pytest.raises(ValueError):
        config_from_dict(bad2)


def test_partial_config_uses_defaults():
    cfg = config_from_dict({"k": 3})
    assert cfg.k == 3
    assert cfg.model.vision.image_size == 64
    assert cfg.lambda1 == 0.1 and cfg.lambda2 == 0.05 and cfg.beta == 0.1


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_round_trip_is_bit_identical(tmp_path):
    torch.manual_seed(3)
    model = build_model(tiny_train_config())
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, model, epoch=4, history=[{"epoch": 0}], val_mae=1.25)
    back, payload = load_checkpoint(path)
    assert state_hash(back) == state_hash(model)
    assert payload["epoch"] == 4 and payload["val_mae"] == 1.25
    assert payload["history"] == [{"epoch": 0}]
    assert back.cfg == model.cfg


def test_state_hash_changes_with_weights():
    torch.manual_seed(0)
    model = build_model(tiny_train_config())
    before = state_hash(model)
    with torch.no_grad():
        model.decoder.head.bias.add_(1.0)
    assert state_hash(model) != before


def test_image_to_tensor_layout():
    img = np.zeros((4, 5, 3), dtype=np.float32)
    img[1, 2, 0] = 0.7
    t = image_to_tensor(img)
    assert t.shape == (3, 4, 5)
    assert t[0, 1, 2].item() == pytest.approx(0.7)


# ---------------------------------------------------------------------------
# training loop


def test_train_smoke_outputs(trained):
    result, out = trained
    assert result["steps"] == 4                      # ceil(6/3) batches x 2 epochs
    assert len(result["history"]) == 2
    for row in result["history"]:
        assert set(row) == {"epoch", "loss_density", "loss_enc", "loss_dec",
                            "loss_total", "val_mae", "val_rmse"}
        assert math.isfinite(row["loss_total"])
    assert os.path.exists(result["best_ckpt"])
    assert os.path.exists(result["last_ckpt"])
    with open(result["log_path"]) as f:
        rows = [json.loads(line) for line in f]
    assert rows == result["history"]


def test_train_requires_matching_geometry(dataset32, tmp_path):
    cfg = tiny_train_config(data_dir="")
    with pytest.raises(ValueError):
        train(cfg, tmp_path)
    mismatched = tiny_train_config(data_dir=str(tmp_path / "nope"))
    mismatched.model.vision.image_size = 64
    mismatched.model.vision.skip_stages = (1, 2)
    os.makedirs(tmp_path / "nope", exist_ok=True)
    generate_split(tmp_path / "nope", "train", ("circles",), 1, 1, 2, seed=0,
                   image_size=32, density_size=16)
    generate_split(tmp_path / "nope", "val", ("circles",), 1, 1, 2, seed=1,
                   image_size=32, density_size=16)
    with pytest.raises(ValueError):
        train(mismatched, tmp_path / "out")


def test_train_max_steps_cap(dataset32, tmp_path):
    cfg = tiny_train_config(k=1, lambda1=0.0, lambda2=0.0, epochs=5,
                            batch_size=2, max_steps=2, data_dir=str(dataset32))
    result = train(cfg, tmp_path)
    assert result["steps"] == 2


def test_degenerate_config_trains_pure(dataset32, tmp_path):
    """K=1 with zero auxiliary weights routes through the inference path."""
    cfg = tiny_train_config(k=1, lambda1=0.0, lambda2=0.0, epochs=1,
                            batch_size=3, data_dir=str(dataset32))
    result = train(cfg, tmp_path)
    model = result["model"]
    assert model.quantity_embedder.call_count == 0
    assert model.category_proj.call_count == 0
    for row in result["history"]:
        assert row["loss_enc"] == 0.0 and row["loss_dec"] == 0.0


def test_double_precision_training_is_bit_reproducible(dataset32, tmp_path):
    hashes = []
    for sub in ("a", "b"):
        cfg = tiny_train_config(k=3, epochs=1, batch_size=3, precision="double",
                                data_dir=str(dataset32))
        result = train(cfg, tmp_path / sub)
        hashes.append(state_hash(result["model"]))
        with open(result["log_path"]) as f:
            (tmp_path / f"{sub}.jsonl").write_text(f.read())
    assert hashes[0] == hashes[1]
    assert (tmp_path / "a.jsonl").read_text() == (tmp_path / "b.jsonl").read_text()


def test_evaluate_is_read_only(trained, dataset32):
    result, _ = trained
    model = result["model"]
    before = state_hash(model)
    metrics = evaluate(model, str(dataset32 / "val.json"))
    assert state_hash(model) == before
    assert metrics["mae"] >= 0 and metrics["rmse"] >= metrics["mae"] - 1e-12
    assert len(metrics["predicted"]) == 4
    assert model.training                            # mode restored


# ---------------------------------------------------------------------------
# prediction


def test_predict_writes_outputs(trained, dataset32, tmp_path):
    result, _ = trained
    img_path = dataset32 / "images" / "val_00000.png"
    out = predict(result["best_ckpt"], img_path, "a photo of circles", tmp_path)
    assert out["count"] >= 0.0
    assert out["density"].shape == (16, 16)
    back = read_qdm(out["qdm_path"])
    assert np.array_equal(back, out["density"])
    assert os.path.exists(out["heatmap_path"])
    assert abs(out["count"] - float(back.astype(np.float64).sum())) < 1e-9


def test_predict_rejects_bad_text(trained, dataset32, tmp_path):
    result, _ = trained
    img = dataset32 / "images" / "val_00000.png"
    with pytest.raises(ValueError):
        predict(result["best_ckpt"], img, "a photo of 3 circles", tmp_path)
    with pytest.raises(ValueError):
        predict(result["best_ckpt"], img, "a photo of stars", tmp_path)
    with pytest.raises(ValueError):
        predict(result["best_ckpt"], img, "count the circles", tmp_path)


def test_write_heatmap_normalization(tmp_path):
    d = np.zeros((8, 8), dtype=np.float32)
    d[3, 4] = 2.0
    p = tmp_path / "h.png"
    write_heatmap(p, d)
    arr = np.asarray(read_png(p) * 255, dtype=np.uint8)
    assert arr[3, 4, 0] == 255
    write_heatmap(p, np.zeros((8, 8), dtype=np.float32))
    assert read_png(p).max() == 0.0


# ---------------------------------------------------------------------------
# gradient checking


def test_gradcheck_tiny_model_passes():
    cfg = tiny_train_config(k=3)
    reports = run_gradcheck(cfg, num_coords=3, seed=0)
    names = {r.name for r in reports}
    assert {"prompts", "coupling", "category_projector", "quantity_embedder",
            "decoder", "head", "text_backbone", "vision_backbone"} == names
    for r in reports:
        assert r.passed, format_report(reports)
    text = format_report(reports)
    assert "ok" in text and "FAIL" not in text
