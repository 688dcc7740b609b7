"""Foreground/background catalog and the ``assets.jsonl`` manifest.

Foreground layout on disk::

    <dir>/<class_label>/<name>.png     RGBA cut-out
    <dir>/<class_label>/<name>.json    optional flags {"occluded": bool, "truncated": bool}

Backgrounds are any PNG files below the background directory.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from ._io import read_jsonl, write_jsonl
from .errors import DataError

DEFAULT_ALPHA_THRESHOLD = 127
MANIFEST_VERSION = 1


@dataclass(frozen=True)
class ForegroundAsset:
    asset_id: str
    class_label: str
    target_label_ids: tuple[int, ...]
    raster_path: str
    tight_bbox: tuple[int, int, int, int]  # x, y, w, h
    opaque_area_px: int
    occluded: bool = False
    truncated: bool = False

    def to_record(self, base: Path | None = None) -> dict:
        return {
            "kind": "foreground",
            "asset_id": self.asset_id,
            "class_label": self.class_label,
            "target_label_ids": list(self.target_label_ids),
            "raster_path": _relative(self.raster_path, base),
            "tight_bbox": list(self.tight_bbox),
            "opaque_area_px": self.opaque_area_px,
            "occluded": self.occluded,
            "truncated": self.truncated,
        }

    @classmethod
    def from_record(cls, rec: dict, base: Path | None = None) -> ForegroundAsset:
        return cls(
            asset_id=rec["asset_id"],
            class_label=rec["class_label"],
            target_label_ids=tuple(sorted(int(i) for i in rec["target_label_ids"])),
            raster_path=_resolve(rec["raster_path"], base),
            tight_bbox=tuple(int(v) for v in rec["tight_bbox"]),
            opaque_area_px=int(rec["opaque_area_px"]),
            occluded=bool(rec.get("occluded", False)),
            truncated=bool(rec.get("truncated", False)),
        )


@dataclass(frozen=True)
class BackgroundAsset:
    asset_id: str
    raster_path: str
    width_px: int
    height_px: int

    def to_record(self, base: Path | None = None) -> dict:
        return {
            "kind": "background",
            "asset_id": self.asset_id,
            "raster_path": _relative(self.raster_path, base),
            "width_px": self.width_px,
            "height_px": self.height_px,
        }

    @classmethod
    def from_record(cls, rec: dict, base: Path | None = None) -> BackgroundAsset:
        return cls(
            asset_id=rec["asset_id"],
            raster_path=_resolve(rec["raster_path"], base),
            width_px=int(rec["width_px"]),
            height_px=int(rec["height_px"]),
        )


@dataclass
class AssetManifest:
    foregrounds: list[ForegroundAsset] = field(default_factory=list)
    backgrounds: list[BackgroundAsset] = field(default_factory=list)
    mask_alpha_threshold: int = DEFAULT_ALPHA_THRESHOLD

    def foreground(self, asset_id: str) -> ForegroundAsset:
        for fg in self.foregrounds:
            if fg.asset_id == asset_id:
                return fg
        raise KeyError(asset_id)

    def save(self, path: str | os.PathLike) -> None:
        """Write canonical JSONL: a header line, then foregrounds and backgrounds sorted by id.

        Raster paths are stored relative to the manifest's directory.
        """
        base = Path(path).resolve().parent
        records = [{"kind": "header", "version": MANIFEST_VERSION,
                    "mask_alpha_threshold": self.mask_alpha_threshold}]
        records += [fg.to_record(base) for fg in sorted(self.foregrounds, key=lambda a: a.asset_id)]
        records += [bg.to_record(base) for bg in sorted(self.backgrounds, key=lambda a: a.asset_id)]
        write_jsonl(path, records)

    @classmethod
    def load(cls, path: str | os.PathLike) -> AssetManifest:
        base = Path(path).resolve().parent
        manifest = cls()
        for rec in read_jsonl(path):
            kind = rec.get("kind")
            if kind == "header":
                manifest.mask_alpha_threshold = int(rec["mask_alpha_threshold"])
            elif kind == "foreground":
                manifest.foregrounds.append(ForegroundAsset.from_record(rec, base))
            elif kind == "background":
                manifest.backgrounds.append(BackgroundAsset.from_record(rec, base))
            else:
                raise DataError(f"{path}: unknown record kind {kind!r}")
        return manifest


def _relative(path: str, base: Path | None) -> str:
    if base is None:
        return Path(path).as_posix()
    return Path(os.path.relpath(Path(path).resolve(), base)).as_posix()


def _resolve(path: str, base: Path | None) -> str:
    p = Path(path)
    if base is not None and not p.is_absolute():
        p = base / p
    return str(p)


def load_rgba(path: str | os.PathLike) -> np.ndarray:
    """Decode a raster with an alpha channel to an (H, W, 4) uint8 array."""
    with Image.open(path) as im:
        im.load()
        if "A" not in im.getbands() and "transparency" not in im.info:
            raise DataError("raster has no alpha channel")
        return np.asarray(im.convert("RGBA"))


def load_rgb(path: str | os.PathLike) -> np.ndarray:
    with Image.open(path) as im:
        im.load()
        return np.asarray(im.convert("RGB"))


def opaque_mask(alpha: np.ndarray, threshold: int = DEFAULT_ALPHA_THRESHOLD) -> np.ndarray:
    return np.asarray(alpha) > threshold


def mask_geometry(alpha: np.ndarray, threshold: int = DEFAULT_ALPHA_THRESHOLD):
    """Return ``(tight_bbox, opaque_area_px)`` of the pixels with alpha above threshold."""
    mask = opaque_mask(alpha, threshold)
    area = int(mask.sum())
    if area == 0:
        raise DataError("no opaque pixels")
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    y0, y1 = int(rows[0]), int(rows[-1])
    x0, x1 = int(cols[0]), int(cols[-1])
    return (x0, y0, x1 - x0 + 1, y1 - y0 + 1), area


def read_class_map(path: str | os.PathLike) -> dict[str, tuple[int, ...]]:
    """Parse ``class_label,label_id`` rows; a class may appear on several rows."""
    out: dict[str, set[int]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"class_label", "label_id"} <= set(reader.fieldnames):
            raise DataError(f"{path}: class map needs columns class_label,label_id")
        for row in reader:
            try:
                label_id = int(row["label_id"])
            except ValueError:
                raise DataError(f"{path}: non-integer label_id {row['label_id']!r}") from None
            out.setdefault(row["class_label"].strip(), set()).add(label_id)
    return {k: tuple(sorted(v)) for k, v in out.items()}


def _read_flags(png: Path) -> dict:
    sidecar = png.with_suffix(".json")
    if not sidecar.exists():
        return {}
    with open(sidecar, encoding="utf-8") as fh:
        return json.load(fh)


def ingest_foregrounds(
    directory: str | os.PathLike,
    class_map: dict[str, tuple[int, ...]],
    alpha_threshold: int = DEFAULT_ALPHA_THRESHOLD,
    include_flagged: bool = False,
) -> tuple[list[ForegroundAsset], list[dict]]:
    """Catalog every ``<class>/<name>.png`` under ``directory``.

    Returns ``(assets, errors)``. Undecodable or fully transparent rasters and
    occluded/truncated objects (unless ``include_flagged``) become error records.
    A class directory with no entry in ``class_map`` raises :class:`DataError`.
    """
    if not 0 <= alpha_threshold <= 255:
        raise DataError(f"alpha_threshold must be in [0, 255], got {alpha_threshold}")
    root = Path(directory)
    if not root.is_dir():
        raise DataError(f"foreground directory not found: {root}")
    files = sorted(root.rglob("*.png"))
    classes = {f.parent.relative_to(root).as_posix() for f in files if f.parent != root}
    unmapped = sorted(c for c in classes if not class_map.get(c))
    if unmapped:
        raise DataError(f"class {unmapped[0]!r} has no label mapping")

    assets, errors = [], []
    for f in files:
        rel = f.relative_to(root).as_posix()
        if f.parent == root:
            errors.append({"path": rel, "error": "foreground not inside a class directory"})
            continue
        label = f.parent.relative_to(root).as_posix()
        try:
            rgba = load_rgba(f)
            bbox, area = mask_geometry(rgba[..., 3], alpha_threshold)
            flags = _read_flags(f)
        except (OSError, ValueError) as exc:
            errors.append({"path": rel, "error": str(exc)})
            continue
        occluded = bool(flags.get("occluded", False))
        truncated = bool(flags.get("truncated", False))
        if (occluded or truncated) and not include_flagged:
            tag = "occluded" if occluded else "truncated"
            errors.append({"path": rel, "error": f"excluded: flagged {tag}"})
            continue
        assets.append(ForegroundAsset(
            asset_id=f"{label}/{f.stem}",
            class_label=label,
            target_label_ids=tuple(class_map[label]),
            raster_path=str(f),
            tight_bbox=bbox,
            opaque_area_px=area,
            occluded=occluded,
            truncated=truncated,
        ))
    assets.sort(key=lambda a: a.asset_id)
    return assets, errors


def ingest_backgrounds(
    directory: str | os.PathLike, min_side: int = 224
) -> tuple[list[BackgroundAsset], list[dict]]:
    root = Path(directory)
    if not root.is_dir():
        raise DataError(f"background directory not found: {root}")
    assets, errors = [], []
    for f in sorted(root.rglob("*.png")):
        rel = f.relative_to(root).as_posix()
        try:
            with Image.open(f) as im:
                im.load()
                w, h = im.size
        except OSError as exc:
            errors.append({"path": rel, "error": f"undecodable raster: {exc}"})
            continue
        if min(w, h) < min_side:
            errors.append({"path": rel, "error": f"too small: {w}x{h} < min_side {min_side}"})
            continue
        assets.append(BackgroundAsset(
            asset_id=Path(rel).with_suffix("").as_posix(),
            raster_path=str(f),
            width_px=w,
            height_px=h,
        ))
    return assets, errors


def validate_manifest(manifest: AssetManifest, min_side: int | None = None) -> list[dict]:
    """Check manifest invariants against the rasters on disk. Empty list means consistent."""
    findings: list[dict] = []

    def note(kind, asset_id, detail):
        findings.append({"kind": kind, "asset_id": asset_id, "detail": detail})

    for assets in (manifest.foregrounds, manifest.backgrounds):
        seen = set()
        for a in assets:
            if a.asset_id in seen:
                note("duplicate_id", a.asset_id, "asset_id appears more than once")
            seen.add(a.asset_id)

    for fg in manifest.foregrounds:
        if not fg.target_label_ids:
            note("no_labels", fg.asset_id, "target_label_ids is empty")
        x, y, w, h = fg.tight_bbox
        if fg.opaque_area_px < 1 or fg.opaque_area_px > w * h:
            note("area_out_of_bbox", fg.asset_id,
                 f"opaque_area_px={fg.opaque_area_px} not in [1, {w * h}]")
        if not os.path.exists(fg.raster_path):
            note("missing_file", fg.asset_id, fg.raster_path)
            continue
        try:
            alpha = load_rgba(fg.raster_path)[..., 3]
            bbox, area = mask_geometry(alpha, manifest.mask_alpha_threshold)
        except (OSError, ValueError) as exc:
            note("undecodable", fg.asset_id, str(exc))
            continue
        if bbox != tuple(fg.tight_bbox):
            note("bbox_mismatch", fg.asset_id, f"stored {list(fg.tight_bbox)}, recomputed {list(bbox)}")
        if area != fg.opaque_area_px:
            note("area_mismatch", fg.asset_id, f"stored {fg.opaque_area_px}, recomputed {area}")

    for bg in manifest.backgrounds:
        if not os.path.exists(bg.raster_path):
            note("missing_file", bg.asset_id, bg.raster_path)
            continue
        try:
            with Image.open(bg.raster_path) as im:
                im.load()
                size = im.size
        except OSError as exc:
            note("undecodable", bg.asset_id, str(exc))
            continue
        if size != (bg.width_px, bg.height_px):
            note("size_mismatch", bg.asset_id, f"stored {bg.width_px}x{bg.height_px}, actual {size[0]}x{size[1]}")
        if min_side is not None and min(size) < min_side:
            note("too_small", bg.asset_id, f"{size[0]}x{size[1]} < {min_side}")
    return findings
