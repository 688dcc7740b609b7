"""CSV matrices, heatmap PNGs and summary figures for grids and profiles."""

from __future__ import annotations

import csv
import io
import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from ._io import atomic_write_bytes, atomic_write_text, write_json  # noqa: E402
from .errors import DataError  # noqa: E402
from .metrics import FactorProfile, LocationGrid  # noqa: E402

SEQUENTIAL_CMAP = "viridis"
DIVERGING_CMAP = "RdBu"
MISSING_RGB = (128, 128, 128)
DEFAULT_CELL_PX = 16


def _fmt(v: float) -> str:
    return "" if not math.isfinite(v) else repr(float(v))


def write_matrix_csv(path, matrix, row_labels=None, col_labels=None, corner: str = "row") -> None:
    """Write a labelled matrix; missing (NaN) cells are left empty."""
    m = np.asarray(matrix, dtype=float)
    if m.ndim != 2:
        raise DataError("matrix must be 2-D")
    rows = row_labels if row_labels is not None else list(range(m.shape[0]))
    cols = col_labels if col_labels is not None else list(range(m.shape[1]))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([corner, *cols])
    for label, row in zip(rows, m):
        w.writerow([label, *(_fmt(v) for v in row)])
    atomic_write_text(path, buf.getvalue())


def read_matrix_csv(path) -> tuple[np.ndarray, list[str], list[str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 2:
        raise DataError(f"{path}: empty matrix")
    cols = rows[0][1:]
    labels, data = [], []
    for r in rows[1:]:
        if len(r) != len(cols) + 1:
            raise DataError(f"{path}: ragged matrix row {r[:1]}")
        labels.append(r[0])
        data.append([float(v) if v.strip() else math.nan for v in r[1:]])
    return np.array(data, dtype=float), labels, cols


def grid_labels(n: int) -> list[str]:
    parts = n - 1
    return [repr(i / parts) for i in range(n)]


def write_grid_csv(path, grid: LocationGrid) -> None:
    labels = grid_labels(grid.grid.shape[0])
    write_matrix_csv(path, grid.grid, labels, labels, corner="fy\\fx")


def read_grid_csv(path) -> LocationGrid:
    m, _, _ = read_matrix_csv(path)
    return LocationGrid(m, np.isfinite(m).astype(int))


def write_profile_csv(path, profile: FactorProfile) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([profile.factor_name, "accuracy", "support"])
    for b, a, s in zip(profile.bins, profile.accuracy, profile.support):
        w.writerow([repr(float(b)), _fmt(a), int(s)])
    atomic_write_text(path, buf.getvalue())


def read_profile_csv(path) -> FactorProfile:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 2 or len(rows[0]) != 3:
        raise DataError(f"{path}: expected columns <factor>,accuracy,support")
    body = rows[1:]
    return FactorProfile(
        factor_name=rows[0][0],
        bins=tuple(float(r[0]) for r in body),
        accuracy=np.array([float(r[1]) if r[1].strip() else math.nan for r in body]),
        support=np.array([int(r[2]) for r in body]),
    )


def color_range(matrix: np.ndarray, diverging: bool) -> tuple[float, float]:
    finite = matrix[np.isfinite(matrix)]
    if diverging:
        half = float(np.abs(finite).max()) if finite.size else 0.0
        half = half if half > 0 else 1.0
        return -half, half
    if not finite.size:
        return 0.0, 1.0
    lo, hi = min(0.0, float(finite.min())), float(finite.max())
    return (lo, hi) if hi > lo else (lo, lo + 1.0)


def heatmap_rgb(matrix, vmin: float, vmax: float, cmap: str, cell_px: int = DEFAULT_CELL_PX) -> np.ndarray:
    m = np.asarray(matrix, dtype=float)
    norm = np.clip((m - vmin) / (vmax - vmin), 0.0, 1.0)
    rgba = matplotlib.colormaps[cmap](np.nan_to_num(norm))
    rgb = np.floor(rgba[..., :3] * 255 + 0.5).astype(np.uint8)
    rgb[~np.isfinite(m)] = MISSING_RGB
    return np.repeat(np.repeat(rgb, cell_px, axis=0), cell_px, axis=1)


def render_heatmap(matrix, path, *, diverging: bool = False, vmin: float | None = None,
                   vmax: float | None = None, cell_px: int = DEFAULT_CELL_PX) -> dict:
    """Write ``matrix`` as a PNG of solid ``cell_px`` squares plus a sidecar JSON.

    Sequential data uses viridis; ``diverging`` data uses RdBu on a range
    symmetric about zero. Missing cells are neutral gray.
    """
    m = np.asarray(matrix, dtype=float)
    if m.ndim != 2 or m.size == 0:
        raise DataError("heatmap needs a non-empty 2-D matrix")
    lo, hi = color_range(m, diverging)
    if vmin is not None:
        lo = vmin
    if vmax is not None:
        hi = vmax
    if diverging:
        half = max(abs(lo), abs(hi))
        lo, hi = -half, half
    cmap = DIVERGING_CMAP if diverging else SEQUENTIAL_CMAP
    rgb = heatmap_rgb(m, lo, hi, cmap, cell_px)
    buf = io.BytesIO()
    plt.imsave(buf, rgb, format="png")
    path = Path(path)
    atomic_write_bytes(path, buf.getvalue())
    meta = {"colormap": cmap, "vmin": lo, "vmax": hi, "shape": list(m.shape), "cell_px": cell_px,
            "missing_rgb": list(MISSING_RGB), "missing_cells": int((~np.isfinite(m)).sum())}
    write_json(path.with_suffix(".json"), meta)
    return meta


def _save_figure(fig, path) -> None:
    buf = io.BytesIO()
    fig.savefig(buf, format="png", dpi=100, metadata={"Software": None})
    plt.close(fig)
    atomic_write_bytes(path, buf.getvalue())


def location_figure(normalized: list[np.ndarray], deltas: list[np.ndarray], titles: list[str], path) -> None:
    """First panel: normalized grid of the first model; remaining panels: deltas to it."""
    n = len(normalized)
    fig, axes = plt.subplots(1, n, figsize=(3 * n, 3), squeeze=False)
    first = normalized[0]
    im = axes[0, 0].imshow(np.ma.masked_invalid(first), cmap=SEQUENTIAL_CMAP, vmin=0,
                           vmax=np.nanmax(first), extent=(0, 1, 1, 0))
    axes[0, 0].set_title(titles[0])
    fig.colorbar(im, ax=axes[0, 0], fraction=0.046)
    if deltas:
        half = max(float(np.nanmax(np.abs(d))) for d in deltas) or 1.0
        for ax, d, title in zip(axes[0, 1:], deltas, titles[1:]):
            im = ax.imshow(np.ma.masked_invalid(d), cmap=DIVERGING_CMAP, vmin=-half, vmax=half,
                           extent=(0, 1, 1, 0))
            ax.set_title(f"{title} - {titles[0]}")
            fig.colorbar(im, ax=ax, fraction=0.046)
    for ax in axes[0]:
        ax.set_xlabel("x")
        ax.set_ylabel("y")
    fig.tight_layout()
    _save_figure(fig, path)


def profile_figure(normalized: list[FactorProfile], titles: list[str], path) -> None:
    fig, (top, bottom) = plt.subplots(2, 1, figsize=(6, 5), sharex=True)
    for p, t in zip(normalized, titles):
        top.plot(p.bins, p.accuracy, marker="o", ms=3, label=t)
    top.set_ylabel("accuracy / best")
    top.legend(fontsize=7)
    ref = normalized[0]
    for p, t in zip(normalized[1:], titles[1:]):
        bottom.plot(p.bins, p.accuracy - ref.accuracy, marker="o", ms=3, label=t)
    bottom.axhline(0, color="k", lw=0.5)
    bottom.set_ylabel(f"difference to {titles[0]}")
    bottom.set_xlabel(normalized[0].factor_name)
    fig.tight_layout()
    _save_figure(fig, path)


def ensure_dir(path) -> Path:
    p = Path(path)
    try:
        p.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {p}: {exc}") from None
    return p

