"""Expand factor-of-variation sweeps into rendered samples and a dataset manifest.

Every (object, background, size, location, rotation) tuple of the cross product
is rendered. A sample is kept when no in-image threshold is configured or when
its in-image fraction reaches the threshold; rejected samples are counted, not
written.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

from . import __version__
from ._io import atomic_write_bytes, canonical_json, read_jsonl, write_json, write_jsonl
from .assets import AssetManifest
from .compositor import DEFAULT_CANVAS_PX, blend, load_background, rotate_object, scale_to_area
from .errors import DataError

DEFAULT_SEED = 0
PRESETS = ("size", "location", "rotation")
CENTER = (0.5, 0.5)


@dataclass(frozen=True)
class SweepConfig:
    name: str
    size_fractions: tuple[float, ...]
    locations: tuple[tuple[float, float], ...]
    rotations_deg: tuple[float, ...]
    backgrounds_per_object: int = 2
    in_image_threshold: float | None = None
    canvas_px: int = DEFAULT_CANVAS_PX
    seed: int = DEFAULT_SEED

    def __post_init__(self):
        if not (self.size_fractions and self.locations and self.rotations_deg):
            raise DataError("every factor list must be non-empty")
        if self.backgrounds_per_object < 1:
            raise DataError("backgrounds_per_object must be positive")
        t = self.in_image_threshold
        if t is not None and not 0 <= t <= 1:
            raise DataError(f"in_image_threshold must be in [0, 1], got {t}")

    @property
    def combinations(self) -> int:
        return len(self.size_fractions) * len(self.locations) * len(self.rotations_deg)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["size_fractions"] = list(self.size_fractions)
        d["locations"] = [list(loc) for loc in self.locations]
        d["rotations_deg"] = list(self.rotations_deg)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> SweepConfig:
        return cls(
            name=d["name"],
            size_fractions=tuple(float(v) for v in d["size_fractions"]),
            locations=tuple((float(x), float(y)) for x, y in d["locations"]),
            rotations_deg=tuple(float(v) for v in d["rotations_deg"]),
            backgrounds_per_object=int(d.get("backgrounds_per_object", 2)),
            in_image_threshold=None if d.get("in_image_threshold") is None else float(d["in_image_threshold"]),
            canvas_px=int(d.get("canvas_px", DEFAULT_CANVAS_PX)),
            seed=int(d.get("seed", DEFAULT_SEED)),
        )


def location_grid(parts: int = 20) -> tuple[tuple[float, float], ...]:
    """``(parts + 1)``² fractional locations, endpoints included, row-major in y."""
    return tuple((i / parts, j / parts) for j in range(parts + 1) for i in range(parts + 1))


def preset_config(kind: str, seed: int = DEFAULT_SEED, canvas_px: int = DEFAULT_CANVAS_PX) -> SweepConfig:
    if kind == "size":
        return SweepConfig("size", tuple(i / 100 for i in range(1, 101)), (CENTER,), (0.0,),
                           in_image_threshold=0.95, canvas_px=canvas_px, seed=seed)
    if kind == "location":
        return SweepConfig("location", (0.20,), location_grid(20), (0.0,),
                           in_image_threshold=None, canvas_px=canvas_px, seed=seed)
    if kind == "rotation":
        return SweepConfig("rotation", (0.20, 0.50, 0.80, 1.00), (CENTER,),
                           tuple(float(a) for a in range(1, 342, 20)),
                           in_image_threshold=0.95, canvas_px=canvas_px, seed=seed)
    raise DataError(f"unknown preset {kind!r}; expected one of {', '.join(PRESETS)}")


@dataclass(frozen=True)
class SampleRecord:
    image_id: str
    foreground_id: str
    background_id: str
    class_label: str
    target_label_ids: tuple[int, ...]
    size_fraction: float
    fx: float
    fy: float
    rotation_deg: float
    in_image_fraction: float
    opaque_inside: int
    opaque_total: int
    image_path: str

    def to_record(self) -> dict:
        d = asdict(self)
        d["target_label_ids"] = list(self.target_label_ids)
        return d

    @classmethod
    def from_record(cls, d: dict) -> SampleRecord:
        return cls(
            image_id=d["image_id"],
            foreground_id=d["foreground_id"],
            background_id=d["background_id"],
            class_label=d["class_label"],
            target_label_ids=tuple(int(i) for i in d["target_label_ids"]),
            size_fraction=float(d["size_fraction"]),
            fx=float(d["fx"]),
            fy=float(d["fy"]),
            rotation_deg=float(d["rotation_deg"]),
            in_image_fraction=float(d["in_image_fraction"]),
            opaque_inside=int(d["opaque_inside"]),
            opaque_total=int(d["opaque_total"]),
            image_path=d["image_path"],
        )


@dataclass
class DatasetManifest:
    config: SweepConfig
    samples: list[SampleRecord]
    counts: dict = field(default_factory=dict)
    errors: list[dict] = field(default_factory=list)

    def save(self, out_dir: str | os.PathLike, provenance: dict | None = None) -> Path:
        """Write ``manifest.jsonl`` (samples sorted by image_id) and ``config.json``."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_jsonl(out / "manifest.jsonl",
                    (s.to_record() for s in sorted(self.samples, key=lambda s: s.image_id)))
        doc = {"config": self.config.to_dict(), "counts": dict(self.counts)}
        if provenance is not None:
            doc["provenance"] = provenance
        write_json(out / "config.json", doc)
        if self.errors:
            write_jsonl(out / "generate_errors.jsonl", self.errors)
        return out / "manifest.jsonl"

    @classmethod
    def load(cls, path: str | os.PathLike) -> DatasetManifest:
        """Load from a dataset directory or its ``manifest.jsonl``."""
        path = Path(path)
        if path.is_dir():
            path = path / "manifest.jsonl"
        if not path.exists():
            raise DataError(f"manifest not found: {path}")
        samples = [SampleRecord.from_record(r) for r in read_jsonl(path)]
        cfg_path = path.parent / "config.json"
        if not cfg_path.exists():
            raise DataError(f"config.json missing next to {path}")
        with open(cfg_path, encoding="utf-8") as fh:
            doc = json.load(fh)
        return cls(SweepConfig.from_dict(doc["config"]), samples, doc.get("counts", {}))

    def rebase(self, old_dir: Path, new_dir: Path) -> DatasetManifest:
        """Rewrite image paths so they stay valid from ``new_dir``."""
        samples = [replace(s, image_path=Path(os.path.relpath(old_dir / s.image_path, new_dir)).as_posix())
                   for s in self.samples]
        return replace(self, samples=samples)


def image_id_for(foreground_id: str, background_id: str, size: float, fx: float, fy: float,
                 rotation: float) -> str:
    key = canonical_json([foreground_id, background_id, f"{size:.10g}", f"{fx:.10g}",
                          f"{fy:.10g}", f"{rotation:.10g}"])
    return hashlib.sha256(key.encode("utf-8")).hexdigest()[:24]


def _object_rng(seed: int, object_id: str) -> np.random.Generator:
    digest = hashlib.sha256(f"{seed}:{object_id}".encode("utf-8")).digest()
    return np.random.Generator(np.random.PCG64(int.from_bytes(digest[:16], "little")))


def assign_backgrounds(object_ids, background_ids, n: int, seed: int = DEFAULT_SEED) -> dict[str, list[str]]:
    """Draw ``n`` distinct backgrounds per object from a PRNG keyed by ``(seed, object_id)``.

    Backgrounds are sorted first, so input order never affects the result.
    """
    pool = sorted(background_ids)
    if len(pool) < n:
        raise DataError(f"need at least {n} backgrounds, have {len(pool)}")
    out = {}
    for oid in sorted(object_ids):
        order = _object_rng(seed, oid).permutation(len(pool))[:n]
        out[oid] = [pool[i] for i in order]
    return out


def _png_bytes(image: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(image, mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def _render_unit(unit: tuple) -> tuple[list[SampleRecord], list[dict], int]:
    """Render every location/rotation of one (object, background, size) triple."""
    fg, bg, size, rotations, locations, cfg_threshold, canvas_px, alpha_threshold, out_dir = unit
    records, errors, rejected = [], [], 0

    def fail(rot, loc, exc):
        errors.append({"image_id": image_id_for(fg.asset_id, bg.asset_id, size, loc[0], loc[1], rot),
                       "foreground_id": fg.asset_id, "background_id": bg.asset_id,
                       "size_fraction": size, "fx": loc[0], "fy": loc[1], "rotation_deg": rot,
                       "error": str(exc)})

    try:
        background = load_background(bg, canvas_px)
        scaled = scale_to_area(fg, size, canvas_px, alpha_threshold)
    except (OSError, ValueError) as exc:
        for rot in rotations:
            for loc in locations:
                fail(rot, loc, exc)
        return records, errors, 0

    for rot in rotations:
        try:
            planes = scaled if rot % 360.0 == 0 else rotate_object(scaled, rot, alpha_threshold)
        except (OSError, ValueError) as exc:
            for loc in locations:
                fail(rot, loc, exc)
            continue
        for fx, fy in locations:
            image_id = image_id_for(fg.asset_id, bg.asset_id, size, fx, fy, rot)
            try:
                result = blend(planes, background, (fx, fy), alpha_threshold)
            except (OSError, ValueError) as exc:
                fail(rot, (fx, fy), exc)
                continue
            if cfg_threshold is not None and result.in_image_fraction < cfg_threshold:
                rejected += 1
                continue
            rel = f"images/{image_id}.png"
            atomic_write_bytes(Path(out_dir) / rel, _png_bytes(result.image))
            records.append(SampleRecord(
                image_id=image_id,
                foreground_id=fg.asset_id,
                background_id=bg.asset_id,
                class_label=fg.class_label,
                target_label_ids=tuple(fg.target_label_ids),
                size_fraction=size,
                fx=fx,
                fy=fy,
                rotation_deg=rot,
                in_image_fraction=result.in_image_fraction,
                opaque_inside=result.opaque_inside,
                opaque_total=result.opaque_total,
                image_path=rel,
            ))
    return records, errors, rejected


def _check_writable(out_dir: Path) -> None:
    try:
        (out_dir / "images").mkdir(parents=True, exist_ok=True)
        probe = out_dir / ".write_probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise DataError(f"output directory not writable: {out_dir} ({exc})") from None


def generate(
    manifest: AssetManifest,
    config: SweepConfig,
    out_dir: str | os.PathLike,
    jobs: int = 1,
    provenance: dict | None = None,
) -> DatasetManifest:
    """Render the full sweep into ``out_dir`` and write its manifest.

    Output is identical for any ``jobs``: work units are independent and results
    are sorted by image_id before writing.
    """
    out = Path(out_dir)
    _check_writable(out)
    fgs = sorted(manifest.foregrounds, key=lambda a: a.asset_id)
    bgs = {b.asset_id: b for b in manifest.backgrounds}
    if not fgs:
        raise DataError("asset manifest has no foregrounds")
    assignment = assign_backgrounds([f.asset_id for f in fgs], bgs, config.backgrounds_per_object, config.seed)

    units = [
        (fg, bgs[bg_id], size, config.rotations_deg, config.locations, config.in_image_threshold,
         config.canvas_px, manifest.mask_alpha_threshold, str(out))
        for fg in fgs
        for bg_id in assignment[fg.asset_id]
        for size in config.size_fractions
    ]
    if jobs > 1 and len(units) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_render_unit, units, chunksize=max(1, len(units) // (4 * jobs))))
    else:
        results = [_render_unit(u) for u in units]

    samples, errors, rejected = [], [], 0
    for recs, errs, rej in results:
        samples.extend(recs)
        errors.extend(errs)
        rejected += rej
    samples.sort(key=lambda s: s.image_id)
    errors.sort(key=lambda e: e["image_id"])
    counts = {"generated": len(samples), "filtered_out": rejected + len(errors),
              "failed": len(errors)}
    expected = len(fgs) * config.backgrounds_per_object * config.combinations
    assert counts["generated"] + counts["filtered_out"] == expected, (counts, expected)

    dataset = DatasetManifest(config, samples, counts, errors)
    if provenance is None:
        provenance = {"tool_version": __version__, "seed": config.seed}
    dataset.save(out, provenance)
    return dataset


def refilter(dataset: DatasetManifest, threshold: float) -> DatasetManifest:
    """Keep samples with ``in_image_fraction >= threshold``; nothing is re-rendered."""
    if not 0 <= threshold <= 1:
        raise DataError(f"threshold must be in [0, 1], got {threshold}")
    kept = [s for s in dataset.samples if s.in_image_fraction >= threshold]
    removed = len(dataset.samples) - len(kept)
    old = dataset.config.in_image_threshold
    config = replace(dataset.config, in_image_threshold=threshold if old is None else max(old, threshold))
    counts = dict(dataset.counts)
    counts["generated"] = len(kept)
    counts["filtered_out"] = counts.get("filtered_out", 0) + removed
    return DatasetManifest(config, kept, counts)

