"""Per-model robustness numbers computed from prediction files.

A prediction counts as correct when its rank-1 label is one of the sample's
target label ids. One dataset class may map to several classifier labels.
"""

from __future__ import annotations

import csv
import math
import os
from collections import defaultdict
from dataclasses import dataclass, replace
from typing import Iterable, Mapping

import numpy as np

from ._io import read_jsonl
from .errors import DataError
from .sweep import DatasetManifest, SampleRecord

GRID_PARTS = 20


@dataclass
class PredictionSet:
    model_id: str
    entries: dict[str, tuple[int, ...]]

    def top1(self, image_id: str) -> int:
        return self.entries[image_id][0]

    def missing(self, image_ids: Iterable[str]) -> list[str]:
        return sorted({i for i in image_ids if i not in self.entries})


@dataclass(frozen=True)
class FrameGroup:
    group_id: str
    anchor_id: str
    neighbors_before: tuple[str, ...]  # temporal order, nearest frame last
    neighbors_after: tuple[str, ...]  # temporal order, nearest frame first
    label_ids: frozenset[int]

    def __post_init__(self):
        if self.anchor_id in self.neighbor_ids:
            raise DataError(f"group {self.group_id}: anchor listed among its neighbors")
        if not self.label_ids:
            raise DataError(f"group {self.group_id}: empty label set")

    @property
    def neighbor_ids(self) -> tuple[str, ...]:
        return self.neighbors_before + self.neighbors_after

    def frames(self, k: int) -> tuple[str, ...]:
        """Anchor plus the available neighbors within distance ``k``."""
        before = self.neighbors_before[max(0, len(self.neighbors_before) - k):] if k > 0 else ()
        return before + (self.anchor_id,) + self.neighbors_after[:k]


@dataclass
class FactorProfile:
    factor_name: str
    bins: tuple[float, ...]
    accuracy: np.ndarray  # NaN where support == 0
    support: np.ndarray


@dataclass
class LocationGrid:
    grid: np.ndarray  # [row = fy index, col = fx index]; NaN where support == 0
    support: np.ndarray


# -- readers -----------------------------------------------------------------

def read_predictions(path: str | os.PathLike, model_id: str | None = None) -> PredictionSet:
    """Parse ``image_id,rank1[,rank2,...]``; blank deeper ranks are allowed."""
    entries: dict[str, tuple[int, ...]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "image_id" or len(header) < 2:
            raise DataError(f"{path}: expected header image_id,rank1[,rank2,...]")
        for lineno, row in enumerate(reader, 2):
            if not row:
                continue
            image_id, ranks = row[0], [c.strip() for c in row[1:]]
            if not ranks or not ranks[0]:
                raise DataError(f"{path}:{lineno}: missing rank1 prediction")
            if image_id in entries:
                raise DataError(f"{path}:{lineno}: duplicate image_id {image_id}")
            try:
                entries[image_id] = tuple(int(c) for c in ranks if c)
            except ValueError:
                raise DataError(f"{path}:{lineno}: label ids must be integers") from None
    if model_id is None:
        model_id = os.path.splitext(os.path.basename(path))[0]
    return PredictionSet(model_id, entries)


def read_frame_groups(path: str | os.PathLike) -> list[FrameGroup]:
    groups = []
    for rec in read_jsonl(path):
        try:
            groups.append(FrameGroup(
                group_id=str(rec["group_id"]),
                anchor_id=str(rec["anchor_id"]),
                neighbors_before=tuple(str(i) for i in rec.get("neighbors_before", [])),
                neighbors_after=tuple(str(i) for i in rec.get("neighbors_after", [])),
                label_ids=frozenset(int(i) for i in rec["label_ids"]),
            ))
        except KeyError as exc:
            raise DataError(f"{path}: frame group missing field {exc}") from None
    return groups


def read_corruption_errors(path: str | os.PathLike) -> dict[tuple[str, int], float]:
    out = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"corruption", "severity", "error"} <= set(reader.fieldnames):
            raise DataError(f"{path}: expected header corruption,severity,error")
        for row in reader:
            key = (row["corruption"], int(row["severity"]))
            if key in out:
                raise DataError(f"{path}: duplicate entry {key}")
            out[key] = float(row["error"])
    return out


# -- accuracies --------------------------------------------------------------

def _require(preds: PredictionSet, image_ids: Iterable[str]) -> None:
    missing = preds.missing(image_ids)
    if missing:
        shown = ", ".join(missing[:10]) + (" ..." if len(missing) > 10 else "")
        raise DataError(f"{len(missing)} image(s) have no prediction in {preds.model_id}: {shown}")


def _samples(manifest: DatasetManifest | Iterable[SampleRecord]) -> list[SampleRecord]:
    return list(manifest.samples if isinstance(manifest, DatasetManifest) else manifest)


def correctness(preds: PredictionSet, samples: Iterable[SampleRecord]) -> np.ndarray:
    samples = list(samples)
    _require(preds, (s.image_id for s in samples))
    return np.array([preds.top1(s.image_id) in s.target_label_ids for s in samples], dtype=bool)


def top1_accuracy(preds: PredictionSet, manifest: DatasetManifest | Iterable[SampleRecord]) -> float:
    samples = _samples(manifest)
    if not samples:
        raise DataError("manifest has no samples")
    return float(correctness(preds, samples).mean())


def anchor_accuracy(preds: PredictionSet, groups: list[FrameGroup]) -> float:
    """Top-1 accuracy on the anchor frames of ``groups``."""
    if not groups:
        raise DataError("no frame groups")
    _require(preds, (g.anchor_id for g in groups))
    return sum(preds.top1(g.anchor_id) in g.label_ids for g in groups) / len(groups)


def pm_k_accuracy(preds: PredictionSet, groups: list[FrameGroup], k: int) -> float:
    """Fraction of groups whose anchor and every neighbor within ``k`` frames is correct.

    Groups with fewer than ``k`` neighbors on a side use what they have.
    """
    if k < 0:
        raise DataError(f"k must be >= 0, got {k}")
    if not groups:
        raise DataError("no frame groups")
    _require(preds, (f for g in groups for f in g.frames(k)))
    hits = sum(all(preds.top1(f) in g.label_ids for f in g.frames(k)) for g in groups)
    return hits / len(groups)


def mean_corruption_error(
    model_err: Mapping[tuple[str, int], float],
    baseline_err: Mapping[tuple[str, int], float],
) -> float:
    """100 x mean over corruptions of (summed model error / summed baseline error)."""
    if set(model_err) != set(baseline_err):
        diff = sorted(set(model_err) ^ set(baseline_err))
        raise DataError(f"corruption/severity keys differ between tables: {diff[:5]}")
    if not model_err:
        raise DataError("empty corruption error table")
    by_corruption: dict[str, list[tuple[float, float]]] = defaultdict(list)
    for key, base in baseline_err.items():
        if not base > 0:
            raise DataError(f"baseline error must be positive, got {base} for {key}")
        by_corruption[key[0]].append((model_err[key], base))
    ratios = [sum(m for m, _ in rows) / sum(b for _, b in rows) for rows in by_corruption.values()]
    return 100.0 * sum(ratios) / len(ratios)


def relative_error_reduction(err_base, err):
    """100 (err_base - err) / err_base; accepts scalars or arrays."""
    base = np.asarray(err_base, dtype=float)
    if np.any(base == 0):
        raise DataError("baseline error is zero")
    out = 100.0 * (base - np.asarray(err, dtype=float)) / base
    return float(out) if out.ndim == 0 else out


# -- factor profiles and grids -----------------------------------------------

def location_heatmap(
    preds: PredictionSet,
    manifest: DatasetManifest | Iterable[SampleRecord],
    parts: int = GRID_PARTS,
) -> LocationGrid:
    """Mean accuracy per cell of the ``(parts + 1)``² location grid."""
    samples = _samples(manifest)
    hits = correctness(preds, samples)
    total = np.zeros((parts + 1, parts + 1))
    support = np.zeros((parts + 1, parts + 1), dtype=int)
    for s, ok in zip(samples, hits):
        col, row = s.fx * parts, s.fy * parts
        ci, ri = round(col), round(row)
        if abs(col - ci) > 1e-6 or abs(row - ri) > 1e-6 or not (0 <= ci <= parts and 0 <= ri <= parts):
            raise DataError(f"sample {s.image_id} at ({s.fx}, {s.fy}) is off the location grid")
        total[ri, ci] += ok
        support[ri, ci] += 1
    with np.errstate(invalid="ignore", divide="ignore"):
        grid = np.where(support > 0, total / np.maximum(support, 1), np.nan)
    return LocationGrid(grid, support)


_FACTORS = ("size_fraction", "rotation_deg", "fx", "fy")


def factor_profile(
    preds: PredictionSet,
    manifest: DatasetManifest | Iterable[SampleRecord],
    factor: str,
    bins: Iterable[float] | None = None,
) -> FactorProfile:
    """Mean accuracy per value of ``factor``.

    ``bins`` defaults to the factor values listed in the manifest's config (so
    values that were filtered out entirely show up with zero support), or to the
    values present in the samples.
    """
    if factor not in _FACTORS:
        raise DataError(f"unknown factor {factor!r}; expected one of {_FACTORS}")
    samples = _samples(manifest)
    if bins is None and isinstance(manifest, DatasetManifest):
        cfg = manifest.config
        bins = {"size_fraction": cfg.size_fractions, "rotation_deg": cfg.rotations_deg,
                "fx": [x for x, _ in cfg.locations], "fy": [y for _, y in cfg.locations]}[factor]
    if bins is None:
        bins = [getattr(s, factor) for s in samples]
    bins = tuple(sorted(set(float(b) for b in bins)))
    index = {b: i for i, b in enumerate(bins)}
    hits = correctness(preds, samples)
    total = np.zeros(len(bins))
    support = np.zeros(len(bins), dtype=int)
    for s, ok in zip(samples, hits):
        value = float(getattr(s, factor))
        if value not in index:
            raise DataError(f"sample {s.image_id}: {factor}={value} not among the bins")
        total[index[value]] += ok
        support[index[value]] += 1
    with np.errstate(invalid="ignore", divide="ignore"):
        acc = np.where(support > 0, total / np.maximum(support, 1), np.nan)
    return FactorProfile(factor, bins, acc, support)


def percentile(values, q: float) -> float:
    """Linear interpolation between order statistics at index (n - 1) q."""
    xs = sorted(float(v) for v in values)
    if not xs:
        raise DataError("percentile of an empty set")
    if not 0 <= q <= 1:
        raise DataError(f"q must be in [0, 1], got {q}")
    pos = (len(xs) - 1) * q
    lo = math.floor(pos)
    hi = min(lo + 1, len(xs) - 1)
    return xs[lo] + (pos - lo) * (xs[hi] - xs[lo])


def _supported(values: np.ndarray, support: np.ndarray | None) -> np.ndarray:
    ok = np.isfinite(values)
    if support is not None:
        ok &= support > 0
    return ok


def normalize_p95(grid: LocationGrid, q: float = 0.95) -> LocationGrid:
    """Divide every cell by the 95th percentile of the supported cells."""
    ok = _supported(grid.grid, grid.support)
    if not ok.any():
        raise DataError("grid has no supported cells")
    ref = percentile(grid.grid[ok], q)
    if ref <= 0:
        raise DataError("95th percentile of the grid is zero; cannot normalize")
    return LocationGrid(np.where(ok, grid.grid / ref, np.nan), grid.support.copy())


def normalize_best(profile: FactorProfile) -> FactorProfile:
    """Divide every bin by the best bin."""
    ok = _supported(profile.accuracy, profile.support)
    if not ok.any() or not profile.accuracy[ok].max() > 0:
        raise DataError("profile has no positive accuracy; cannot normalize")
    best = profile.accuracy[ok].max()
    return replace(profile, accuracy=np.where(ok, profile.accuracy / best, np.nan),
                   support=profile.support.copy())


def delta_map(reference, other):
    """Elementwise ``other - reference`` for grids, profiles, or plain arrays."""
    if isinstance(other, LocationGrid):
        ref = reference.grid if isinstance(reference, LocationGrid) else np.asarray(reference)
        _same_shape(ref, other.grid)
        support = np.minimum(reference.support, other.support) if isinstance(reference, LocationGrid) \
            else other.support.copy()
        return LocationGrid(other.grid - ref, support)
    if isinstance(other, FactorProfile):
        ref = reference.accuracy if isinstance(reference, FactorProfile) else np.asarray(reference)
        _same_shape(ref, other.accuracy)
        if isinstance(reference, FactorProfile) and reference.bins != other.bins:
            raise DataError("profiles have different bins")
        support = np.minimum(reference.support, other.support) if isinstance(reference, FactorProfile) \
            else other.support.copy()
        return replace(other, accuracy=other.accuracy - ref, support=support)
    ref, oth = np.asarray(reference, dtype=float), np.asarray(other, dtype=float)
    _same_shape(ref, oth)
    return oth - ref


def _same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise DataError(f"shape mismatch: {a.shape} vs {b.shape}")
