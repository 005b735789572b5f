"""Synthetic counting scenes: generation, density rendering, augmentation,
and the on-disk dataset layout (PNG images + QDM density maps + JSON
manifest per split).
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass

import numpy as np
from PIL import Image

from .qdm import read_qdm, write_qdm

DEFAULT_SIGMA = 1.5
PLACEMENT_BUDGET = 10_000
SPACING_FACTOR = 1.2
SHAPES = ("circles", "squares")


class InfeasiblePackingError(RuntimeError):
    pass


@dataclass(frozen=True)
class SceneSpec:
    category: str
    count: int
    seed: int
    image_size: int = 64
    radius_min: float = 2.0
    radius_max: float = 3.0


@dataclass
class Scene:
    image: np.ndarray        # (H, W, 3) float32 in [0, 1]
    points: list             # (y, x) exact centers
    radii: list


def _quantize(v: float) -> float:
    # eighth-pixel grid keeps horizontal flips exactly involutive
    return round(v * 8.0) / 8.0


def gen_scene(spec: SceneSpec) -> Scene:
    if spec.category not in SHAPES:
        raise ValueError(f"unknown category: {spec.category!r}")
    if spec.count < 0:
        raise ValueError("count must be >= 0")
    if not (0 < spec.radius_min <= spec.radius_max):
        raise ValueError("need 0 < radius_min <= radius_max")
    size = spec.image_size
    if 2 * spec.radius_max + 1 >= size:
        raise ValueError("instances do not fit the frame")
    rng = np.random.default_rng(spec.seed)

    gray = rng.uniform(0.0, 0.15, size=(size, size)).astype(np.float32)
    image = np.repeat(gray[:, :, None], 3, axis=2)

    radii = np.sort(rng.uniform(spec.radius_min, spec.radius_max, size=spec.count))[::-1]
    points, placed_r = [], []
    attempts = 0
    for r in radii:
        lo, hi = r + 0.2, size - 1 - r - 0.2
        while True:
            attempts += 1
            if attempts > PLACEMENT_BUDGET:
                raise InfeasiblePackingError(
                    f"gave up after {PLACEMENT_BUDGET} attempts "
                    f"(count={spec.count}, size={size})")
            cy = _quantize(rng.uniform(lo, hi))
            cx = _quantize(rng.uniform(lo, hi))
            if all((cy - py) ** 2 + (cx - px) ** 2 >= (SPACING_FACTOR * (r + pr)) ** 2
                   for (py, px), pr in zip(points, placed_r)):
                points.append((cy, cx))
                placed_r.append(float(r))
                break

    yy, xx = np.mgrid[0:size, 0:size]
    for (cy, cx), r in zip(points, placed_r):
        color = rng.uniform(0.35, 1.0, size=3).astype(np.float32)
        if spec.category == "circles":
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        else:
            mask = np.maximum(np.abs(yy - cy), np.abs(xx - cx)) <= r
        image[mask] = color
    return Scene(image=image, points=points, radii=placed_r)


def render_density(points, density_size: int, image_size: int,
                   sigma: float = DEFAULT_SIGMA) -> np.ndarray:
    """Sum of per-point truncated Gaussians on the density grid.

    Each kernel is cut at +-3 sigma (and at the map border) and renormalized
    to sum exactly 1, so the map total equals the point count.
    """
    if sigma <= 0:
        raise ValueError("sigma must be > 0")
    density = np.zeros((density_size, density_size), dtype=np.float64)
    scale = density_size / image_size
    reach = 3.0 * sigma
    for (y, x) in points:
        cy = (y + 0.5) * scale - 0.5
        cx = (x + 0.5) * scale - 0.5
        y0 = max(0, int(np.ceil(cy - reach)))
        y1 = min(density_size - 1, int(np.floor(cy + reach)))
        x0 = max(0, int(np.ceil(cx - reach)))
        x1 = min(density_size - 1, int(np.floor(cx + reach)))
        if y0 > y1 or x0 > x1:
            raise ValueError(f"point ({y}, {x}) falls outside the density grid")
        gy = np.exp(-((np.arange(y0, y1 + 1) - cy) ** 2) / (2 * sigma * sigma))
        gx = np.exp(-((np.arange(x0, x1 + 1) - cx) ** 2) / (2 * sigma * sigma))
        kernel = np.outer(gy, gx)
        density[y0:y1 + 1, x0:x1 + 1] += kernel / kernel.sum()
    return density


def augment(image: np.ndarray, density: np.ndarray, points, rng,
            image_size: int, density_size: int, sigma: float = DEFAULT_SIGMA):
    """Horizontal flip (p=0.5) and brightness jitter (+-10 percent).

    The flip is applied to the points and the density is re-rendered from
    them; a photometric-only draw returns the density unchanged.
    """
    points = list(points)
    if rng.random() < 0.5:
        image = image[:, ::-1].copy()
        points = [(y, (image_size - 1) - x) for (y, x) in points]
        density = render_density(points, density_size, image_size, sigma)
    factor = 1.0 + rng.uniform(-0.1, 0.1)
    image = np.clip(image * factor, 0.0, 1.0).astype(np.float32)
    return image, density, points


# ----------------------------------------------------------------------
# on-disk dataset

def write_png(path, image: np.ndarray):
    arr = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def read_png(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return arr / 255.0


def generate_split(out_dir, split: str, categories, num_scenes: int,
                   min_count: int, max_count: int, seed: int,
                   image_size: int = 64, density_size: int = 32,
                   sigma: float = DEFAULT_SIGMA,
                   radius_min: float = 2.0, radius_max: float = 3.0) -> str:
    """Generate one split and return the manifest path."""
    if min_count < 0 or max_count < min_count:
        raise ValueError("need 0 <= min_count <= max_count")
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "gt"), exist_ok=True)
    rng = np.random.default_rng(seed)
    scenes = []
    for i in range(num_scenes):
        category = categories[int(rng.integers(len(categories)))]
        count = int(rng.integers(min_count, max_count + 1))
        spec = SceneSpec(category=category, count=count,
                         seed=int(rng.integers(2 ** 31)),
                         image_size=image_size,
                         radius_min=radius_min, radius_max=radius_max)
        scene = gen_scene(spec)
        density = render_density(scene.points, density_size, image_size, sigma)
        image_rel = f"images/{split}_{i:05d}.png"
        density_rel = f"gt/{split}_{i:05d}.qdm"
        write_png(os.path.join(out_dir, image_rel), scene.image)
        write_qdm(os.path.join(out_dir, density_rel), density.astype(np.float32))
        record = asdict(spec)
        record.update(image=image_rel, density=density_rel,
                      points=[[y, x] for (y, x) in scene.points])
        scenes.append(record)
    manifest = {
        "split": split,
        "image_size": image_size,
        "density_size": density_size,
        "kernel_sigma": sigma,
        "scenes": scenes,
    }
    path = os.path.join(out_dir, f"{split}.json")
    with open(path, "w") as f:
        json.dump(manifest, f)
        f.write("\n")
    return path


def generate_dataset(out_dir, splits, categories, min_count: int, max_count: int,
                     seed: int, scenes_per_split=None, **kwargs) -> dict:
    """Generate all splits. With several categories the last one is held out
    for the test split; train and val draw from the others (zero-shot)."""
    categories = list(categories)
    defaults = {"train": 512, "val": 64, "test": 128}
    scenes_per_split = scenes_per_split or {}
    paths = {}
    for i, split in enumerate(splits):
        if len(categories) > 1 and "test" in splits:
            cats = categories[-1:] if split == "test" else categories[:-1]
        else:
            cats = categories
        n = scenes_per_split.get(split, defaults.get(split, 128))
        paths[split] = generate_split(
            out_dir, split, cats, n, min_count, max_count,
            seed=seed + 7919 * i, **kwargs)
    return paths


def load_manifest(path) -> dict:
    with open(path) as f:
        manifest = json.load(f)
    base = os.path.dirname(os.path.abspath(path))
    for scene in manifest["scenes"]:
        scene["image_path"] = os.path.join(base, scene["image"])
        scene["density_path"] = os.path.join(base, scene["density"])
    return manifest


def load_split(path) -> dict:
    """Load a manifest and materialize images and densities in memory."""
    manifest = load_manifest(path)
    for scene in manifest["scenes"]:
        scene["image_array"] = read_png(scene["image_path"])
        scene["density_array"] = read_qdm(scene["density_path"])
        scene["points"] = [(p[0], p[1]) for p in scene["points"]]
    return manifest
