"""Training, evaluation, and prediction entry points.

One optimizer step per batch: each image in the batch runs all K
hypothesis passes (batched over K), per-image losses are averaged, and a
single backward/step follows. Validation MAE picks the best checkpoint.
Double precision forces single-threaded execution so repeated runs with
the same seed produce bit-identical loss curves.
"""
from __future__ import annotations

import hashlib
import json
import os

import numpy as np
import torch

from .config import TrainConfig, config_from_dict, config_to_dict
from .data import DEFAULT_SIGMA, augment, load_split, read_png
from .metrics import mae, rmse
from .model import CountingModel, build_model
from .qdm import write_qdm
from .tokenizer import inference_text


def setup_run(cfg: TrainConfig):
    torch.manual_seed(cfg.seed)
    if cfg.precision == "double":
        torch.set_num_threads(1)


def image_to_tensor(image_hwc: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(image_hwc.transpose(2, 0, 1)))


def save_checkpoint(path, model: CountingModel, epoch: int = 0, history=None,
                    val_mae: float = float("nan")):
    payload = {
        "state_dict": model.state_dict(),
        "config": config_to_dict(model.cfg),
        "epoch": epoch,
        "history": history or [],
        "val_mae": val_mae,
    }
    torch.save(payload, path)


def load_checkpoint(path):
    payload = torch.load(path, map_location="cpu", weights_only=False)
    cfg = config_from_dict(payload["config"])
    model = build_model(cfg)
    model.load_state_dict(payload["state_dict"], strict=True)
    return model, payload


def state_hash(model: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, tensor in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(tensor.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def evaluate(model: CountingModel, manifest, batch_size: int = 16):
    """Counting metrics over a split via the inference path (read-only)."""
    if isinstance(manifest, (str, os.PathLike)):
        manifest = load_split(manifest)
    scenes = manifest["scenes"]
    if not scenes:
        raise ValueError("empty manifest")
    predicted = np.zeros(len(scenes))
    actual = np.array([s["count"] for s in scenes], dtype=np.float64)
    was_training = model.training
    model.eval()
    by_category = {}
    for i, s in enumerate(scenes):
        by_category.setdefault(s["category"], []).append(i)
    with torch.no_grad():
        for category, idxs in by_category.items():
            for start in range(0, len(idxs), batch_size):
                chunk = idxs[start:start + batch_size]
                images = torch.stack([
                    image_to_tensor(scenes[i]["image_array"]) for i in chunk])
                density = model.predict_density(images, category)
                counts = density.sum(dim=(-2, -1)).cpu().numpy()
                for i, c in zip(chunk, counts):
                    predicted[i] = c
    if was_training:
        model.train()
    return {
        "mae": mae(predicted, actual),
        "rmse": rmse(predicted, actual),
        "predicted": predicted,
        "actual": actual,
    }


def _dump_diagnostics(out_dir, batch, losses, step):
    path = os.path.join(out_dir, "diagnostic_batch.pt")
    torch.save({
        "step": step,
        "images": [image_to_tensor(s["image_array"]) for s in batch],
        "counts": [s["count"] for s in batch],
        "categories": [s["category"] for s in batch],
        "losses": [float(l.total.detach()) for l in losses],
    }, path)
    return path


def train(cfg: TrainConfig, out_dir) -> dict:
    cfg.validate()
    if not cfg.data_dir:
        raise ValueError("cfg.data_dir must point at a generated dataset")
    os.makedirs(out_dir, exist_ok=True)
    setup_run(cfg)
    train_split = load_split(os.path.join(cfg.data_dir, "train.json"))
    val_split = load_split(os.path.join(cfg.data_dir, "val.json"))
    density_size = train_split["density_size"]
    image_size = train_split["image_size"]
    sigma = train_split.get("kernel_sigma", DEFAULT_SIGMA)
    if density_size != cfg.model.density_size:
        raise ValueError(
            f"manifest density_size {density_size} does not match the model's "
            f"{cfg.model.density_size}")
    if image_size != cfg.model.vision.image_size:
        raise ValueError("manifest image_size does not match the model")

    model = build_model(cfg)
    model.train()
    dtype = torch.float64 if cfg.precision == "double" else torch.float32
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)

    scenes = train_split["scenes"]
    history = []
    best = {"val_mae": float("inf"), "path": os.path.join(out_dir, "best.ckpt")}
    log_path = os.path.join(out_dir, "metrics.jsonl")
    log_file = open(log_path, "w")
    step = 0
    try:
        for epoch in range(cfg.epochs):
            order = np.random.default_rng([cfg.seed, epoch]).permutation(len(scenes))
            aug_rng = np.random.default_rng([cfg.seed, epoch, 1])
            sums = {"density": 0.0, "enc": 0.0, "dec": 0.0, "total": 0.0}
            n_images = 0
            for start in range(0, len(order), cfg.batch_size):
                if cfg.max_steps and step >= cfg.max_steps:
                    break
                idxs = order[start:start + cfg.batch_size]
                batch = [scenes[i] for i in idxs]
                losses = []
                for s in batch:
                    image, density, _ = (
                        augment(s["image_array"], s["density_array"], s["points"],
                                aug_rng, image_size, density_size, sigma)
                        if cfg.augment else
                        (s["image_array"], s["density_array"], s["points"]))
                    img = image_to_tensor(image).to(dtype)
                    gt = torch.from_numpy(np.ascontiguousarray(density)).to(dtype)
                    losses.append(model.training_loss(img, s["category"],
                                                      s["count"], gt))
                total = torch.stack([l.total for l in losses]).mean()
                if not torch.isfinite(total):
                    path = _dump_diagnostics(out_dir, batch, losses, step)
                    raise RuntimeError(
                        f"non-finite loss at step {step}; batch dumped to {path}")
                opt.zero_grad(set_to_none=True)
                total.backward()
                if cfg.grad_clip:
                    torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
                opt.step()
                step += 1
                n_images += len(batch)
                sums["density"] += sum(float(l.density.detach()) for l in losses)
                sums["enc"] += sum(float(l.enc_quantity.detach()) for l in losses)
                sums["dec"] += sum(float(l.dec_quantity.detach()) for l in losses)
                sums["total"] += float(total.detach()) * len(batch)
            if n_images == 0:
                break
            val = evaluate(model, val_split)
            row = {
                "epoch": epoch,
                "loss_density": sums["density"] / n_images,
                "loss_enc": sums["enc"] / n_images,
                "loss_dec": sums["dec"] / n_images,
                "loss_total": sums["total"] / n_images,
                "val_mae": val["mae"],
                "val_rmse": val["rmse"],
            }
            history.append(row)
            log_file.write(json.dumps(row) + "\n")
            log_file.flush()
            if val["mae"] < best["val_mae"]:
                best["val_mae"] = val["mae"]
                save_checkpoint(best["path"], model, epoch, history, val["mae"])
            if cfg.max_steps and step >= cfg.max_steps:
                break
    finally:
        log_file.close()
    last_path = os.path.join(out_dir, "last.ckpt")
    save_checkpoint(last_path, model, len(history), history,
                    history[-1]["val_mae"] if history else float("nan"))
    if not os.path.exists(best["path"]):
        save_checkpoint(best["path"], model, len(history), history,
                        history[-1]["val_mae"] if history else float("nan"))
    return {
        "history": history,
        "best_ckpt": best["path"],
        "last_ckpt": last_path,
        "log_path": log_path,
        "steps": step,
        "model": model,
    }


def predict(ckpt_path, image_path, text: str, out_dir) -> dict:
    """Predict a density map for one image from a category description."""
    model, _ = load_checkpoint(ckpt_path)
    model.eval()
    tok = model.tokenizer.tokenize(text)
    words = text.split()
    category = words[-1]
    if any(model.tokenizer.is_count_token(i) for i in tok.ids):
        raise ValueError(f"prediction text must not contain a count: {text!r}")
    if text != inference_text(category) or category not in model.tokenizer.categories:
        raise ValueError(
            f"expected 'a photo of <category>' with a known category, got {text!r}")
    image = read_png(image_path)
    with torch.no_grad():
        density = model.predict_density(image_to_tensor(image), category)
    density32 = density.cpu().numpy().astype(np.float32)
    os.makedirs(out_dir, exist_ok=True)
    qdm_path = os.path.join(out_dir, "density.qdm")
    write_qdm(qdm_path, density32)
    heatmap_path = os.path.join(out_dir, "heatmap.png")
    write_heatmap(heatmap_path, density32)
    count = float(density32.astype(np.float64).sum())
    return {"count": count, "density": density32, "qdm_path": qdm_path,
            "heatmap_path": heatmap_path}


def write_heatmap(path, density: np.ndarray):
    """8-bit grayscale PNG, max-normalized; peak maps to 255."""
    from PIL import Image
    peak = float(density.max())
    if peak > 0:
        arr = np.round(density.astype(np.float64) / peak * 255.0)
    else:
        arr = np.zeros_like(density, dtype=np.float64)
    Image.fromarray(arr.astype(np.uint8), mode="L").save(path)
