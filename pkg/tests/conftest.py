from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from si_forge.assets import AssetManifest, ingest_backgrounds, ingest_foregrounds


def disc_rgba(n: int, radius: float, color=(200, 40, 40)) -> np.ndarray:
    yy, xx = np.mgrid[0:n, 0:n]
    c = (n - 1) / 2
    mask = (xx - c) ** 2 + (yy - c) ** 2 <= radius ** 2
    out = np.zeros((n, n, 4), dtype=np.uint8)
    out[..., :3] = color
    out[..., 3] = np.where(mask, 255, 0)
    return out


def rect_rgba(h: int, w: int, pad: int = 0, color=(30, 160, 60)) -> np.ndarray:
    out = np.zeros((h + 2 * pad, w + 2 * pad, 4), dtype=np.uint8)
    out[pad:pad + h, pad:pad + w, :3] = color
    out[pad:pad + h, pad:pad + w, 3] = 255
    return out


def triangle_rgba(n: int, color=(20, 20, 220)) -> np.ndarray:
    yy, xx = np.mgrid[0:n, 0:n]
    mask = (yy >= n // 8) & (np.abs(xx - (n - 1) / 2) <= (yy - n // 8) / 2)
    out = np.zeros((n, n, 4), dtype=np.uint8)
    out[..., :3] = color
    out[..., 3] = np.where(mask, 255, 0)
    return out


def random_blob_rgba(rng: np.random.Generator, n: int = 96) -> np.ndarray:
    """Star-shaped polygon with a random radius profile; antialiased edges."""
    k = int(rng.integers(5, 10))
    radii = rng.uniform(0.45, 1.0, k) * n * 0.42
    phases = np.linspace(0, 2 * np.pi, k, endpoint=False) + rng.uniform(0, 2 * np.pi)
    yy, xx = np.mgrid[0:n, 0:n].astype(float)
    c = (n - 1) / 2
    ang = np.arctan2(yy - c, xx - c)
    dist = np.hypot(xx - c, yy - c)
    # Smoothly interpolated radius as a function of angle.
    t = ((ang - phases[0]) % (2 * np.pi)) / (2 * np.pi) * k
    i0 = np.floor(t).astype(int) % k
    i1 = (i0 + 1) % k
    frac = t - np.floor(t)
    r = radii[i0] * (1 - frac) + radii[i1] * frac
    alpha = np.clip(r - dist + 0.5, 0, 1)
    out = np.zeros((n, n, 4), dtype=np.uint8)
    out[..., :3] = rng.integers(0, 256, 3)
    out[..., 3] = np.floor(alpha * 255 + 0.5).astype(np.uint8)
    return out


def save_png(path: Path, arr: np.ndarray) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path)
    return path


def noise_background(rng, h: int, w: int) -> np.ndarray:
    return rng.integers(0, 256, (h, w, 3), dtype=np.uint8)


@pytest.fixture
def toy_dirs(tmp_path):
    """Three foreground objects in two classes, four backgrounds, a class map."""
    rng = np.random.default_rng(7)
    fg = tmp_path / "fg"
    save_png(fg / "cat" / "disc.png", disc_rgba(40, 15))
    save_png(fg / "cat" / "square.png", rect_rgba(24, 24, pad=3))
    save_png(fg / "dog" / "tri.png", triangle_rgba(48))
    bg = tmp_path / "bg"
    for i, (h, w) in enumerate([(80, 100), (96, 96), (120, 80), (90, 110)]):
        save_png(bg / f"bg{i}.png", noise_background(rng, h, w))
    class_map = tmp_path / "classes.csv"
    class_map.write_text("class_label,label_id\ncat,281\ncat,282\ndog,207\n")
    return {"fg": fg, "bg": bg, "class_map": class_map, "root": tmp_path}


@pytest.fixture
def toy_manifest(toy_dirs) -> AssetManifest:
    from si_forge.assets import read_class_map

    fgs, errs = ingest_foregrounds(toy_dirs["fg"], read_class_map(toy_dirs["class_map"]))
    assert not errs
    bgs, errs = ingest_backgrounds(toy_dirs["bg"], min_side=64)
    assert not errs
    return AssetManifest(fgs, bgs)


def write_json(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj))
    return path


def factor_table(seed: int, strength: float = 0.5, n_models: int = 39, n_metrics: int = 23,
                 n_groups: int = 3):
    """Reference column plus metrics sharing one hidden factor beyond the reference."""
    from si_forge.meta import MetricsTable

    rng = np.random.default_rng(seed)
    ref = rng.normal(size=n_models)
    factor = rng.normal(size=n_models)
    cols = [ref] + [0.8 * ref + strength * factor + rng.normal(size=n_models) for _ in range(n_metrics - 1)]
    return MetricsTable([f"model{i:02d}" for i in range(n_models)], [f"g{i % n_groups}" for i in range(n_models)],
                        ["ref"] + [f"m{j:02d}" for j in range(n_metrics - 1)], np.column_stack(cols), "ref")
