"""Patch-grid planning, patch extraction and overlap-averaged reassembly."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CoverageError, ValidationError
from .volume import Volume3D


def _axis_origins(size, patch, k):
    slack = size - patch
    if k == 1:
        # round-half-up of slack / 2
        return [(slack + 1) // 2]
    # round-half-up of i * slack / (k - 1), in exact integer arithmetic
    return [(2 * i * slack + (k - 1)) // (2 * (k - 1)) for i in range(k)]


def _first_gap(origins, patch, size):
    covered = np.zeros(size, dtype=bool)
    for o in origins:
        covered[o:o + patch] = True
    gaps = np.flatnonzero(~covered)
    return int(gaps[0]) if gaps.size else None


@dataclass(frozen=True)
class PatchGrid:
    k: int
    patch_dims: tuple
    volume_dims: tuple
    origins: tuple

    @property
    def m(self):
        return len(self.origins)

    def slices(self, loc):
        if not 0 <= loc < self.m:
            raise ValidationError(f"location {loc} outside [0, {self.m})")
        return tuple(slice(o, o + p) for o, p in zip(self.origins[loc], self.patch_dims))

    def cover_count(self):
        counts = np.zeros(self.volume_dims, dtype=np.int64)
        for loc in range(self.m):
            counts[self.slices(loc)] += 1
        return counts

    def to_dict(self):
        return {
            "k": self.k,
            "patch_dims": list(self.patch_dims),
            "volume_dims": list(self.volume_dims),
            "origins": [list(o) for o in self.origins],
        }

    @classmethod
    def from_dict(cls, d):
        grid = plan_grid(d["volume_dims"], d["patch_dims"], d["k"])
        if [list(o) for o in grid.origins] != [list(o) for o in d["origins"]]:
            raise ValidationError("stored origins disagree with the planning rule")
        return grid


def plan_grid(volume_dims, patch_dims, k) -> PatchGrid:
    """Lay out ``k**3`` patch origins with rounded linear spacing on each axis.

    Both extreme positions are always used (for ``k >= 2``), so the first patch
    touches the low border and the last one the high border.  Locations are
    enumerated x-slowest: ``loc = (ix * k + iy) * k + iz``.
    """
    volume_dims = tuple(int(d) for d in volume_dims)
    patch_dims = tuple(int(p) for p in patch_dims)
    k = int(k)
    if k < 1:
        raise ValidationError(f"k must be >= 1, got {k}")
    if len(volume_dims) != 3 or len(patch_dims) != 3:
        raise ValidationError("volume_dims and patch_dims must have three entries")
    if any(p < 1 or p > d for p, d in zip(patch_dims, volume_dims)):
        raise ValidationError(f"patch {patch_dims} does not fit in volume {volume_dims}")
    per_axis = []
    for axis, (d, p) in enumerate(zip(volume_dims, patch_dims)):
        origins = _axis_origins(d, p, k)
        gap = _first_gap(origins, p, d)
        if gap is not None:
            raise CoverageError(axis, gap)
        per_axis.append(origins)
    origins = tuple((x, y, z) for x in per_axis[0] for y in per_axis[1] for z in per_axis[2])
    return PatchGrid(k, patch_dims, volume_dims, origins)


def extract_patch(v: Volume3D, grid: PatchGrid, loc: int) -> Volume3D:
    if v.dims != grid.volume_dims:
        raise ValidationError(f"volume dims {v.dims} != grid dims {grid.volume_dims}")
    return Volume3D(v.data[grid.slices(loc)], v.spacing)


def assemble(predictions, grid: PatchGrid, spacing=(1.0, 1.0, 1.0)) -> Volume3D:
    """Average overlapping patch predictions into one map.

    ``predictions`` maps location index to a ``Volume3D`` (or array) of
    ``patch_dims``.  Sums run in float64 in ascending location order, so the
    result does not depend on how the predictions were produced.
    """
    total = np.zeros(grid.volume_dims, dtype=np.float64)
    for loc in range(grid.m):
        if loc not in predictions:
            raise ValidationError(f"missing prediction for location {loc}")
        pred = predictions[loc]
        arr = pred.data if isinstance(pred, Volume3D) else np.asarray(pred)
        if tuple(arr.shape) != grid.patch_dims:
            raise ValidationError(f"location {loc}: shape {arr.shape} != {grid.patch_dims}")
        total[grid.slices(loc)] += arr
    return Volume3D((total / grid.cover_count()).astype(np.float32), spacing)
