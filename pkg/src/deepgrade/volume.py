"""3D grids, label maps, cohort manifests and their on-disk formats.

Volumes are held as ``float32`` arrays indexed ``[x, y, z]``.  On disk the
payload is written x-fastest (Fortran order) after a 28-byte header::

    magic (4s) | nx ny nz (3 x u32) | sx sy sz (3 x f32) | payload

``GVL1`` carries ``float32`` intensities, ``GSG1`` carries ``uint16`` labels.
Everything is little-endian.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DegenerateInputError, FormatError, IoError, ValidationError

VOLUME_MAGIC = b"GVL1"
LABEL_MAGIC = b"GSG1"
_HEADER = struct.Struct("<4s3I3f")

DIAGNOSES = ("CN", "AD", "FTD")
SPLITS = ("train", "val", "test")


def _check_geometry(dims, spacing):
    dims = tuple(int(d) for d in dims)
    spacing = tuple(float(s) for s in spacing)
    if len(dims) != 3 or any(d <= 0 for d in dims):
        raise ValidationError(f"dims must be three positive ints, got {dims}")
    if len(spacing) != 3 or not all(math.isfinite(s) and s > 0 for s in spacing):
        raise ValidationError(f"spacing must be three positive floats, got {spacing}")
    return dims, spacing


@dataclass(frozen=True, eq=False)
class Volume3D:
    """Dense scalar grid; ``data`` has shape ``dims`` and is read-only."""

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float32, copy=True)
        if data.ndim != 3:
            raise ValidationError(f"volume data must be 3D, got shape {data.shape}")
        _, spacing = _check_geometry(data.shape, self.spacing)
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)

    @property
    def dims(self):
        return tuple(self.data.shape)

    def __eq__(self, other):
        if not isinstance(other, Volume3D):
            return NotImplemented
        return self.spacing == other.spacing and np.array_equal(self.data, other.data)


@dataclass(frozen=True, eq=False)
class LabelMap3D:
    """Integer segmentation; label 0 marks voxels outside the intracranial cavity."""

    labels: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        raw = np.asarray(self.labels)
        if raw.ndim != 3:
            raise ValidationError(f"label data must be 3D, got shape {raw.shape}")
        if raw.size and (raw.min() < 0 or raw.max() > np.iinfo(np.uint16).max):
            raise ValidationError("labels must fit in uint16")
        labels = np.array(raw, dtype=np.uint16, copy=True)
        _, spacing = _check_geometry(labels.shape, self.spacing)
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "spacing", spacing)

    @property
    def dims(self):
        return tuple(self.labels.shape)

    @property
    def icc_mask(self):
        return self.labels > 0

    def __eq__(self, other):
        if not isinstance(other, LabelMap3D):
            return NotImplemented
        return self.spacing == other.spacing and np.array_equal(self.labels, other.labels)


def _encode(magic, array, spacing, dtype):
    header = _HEADER.pack(magic, *array.shape, *spacing)
    payload = np.asarray(array, dtype=dtype).ravel(order="F").astype(dtype.newbyteorder("<"), copy=False)
    return header + payload.tobytes()


def _decode(blob, magic, dtype, path):
    if len(blob) < _HEADER.size:
        raise FormatError(f"{path}: truncated header ({len(blob)} bytes)")
    got, nx, ny, nz, sx, sy, sz = _HEADER.unpack_from(blob)
    if got != magic:
        raise FormatError(f"{path}: bad magic {got!r}, expected {magic!r}")
    count = nx * ny * nz
    expected = _HEADER.size + count * dtype.itemsize
    if len(blob) < expected:
        raise FormatError(f"{path}: truncated payload ({len(blob)} of {expected} bytes)")
    if len(blob) > expected:
        raise FormatError(f"{path}: {len(blob) - expected} trailing bytes")
    flat = np.frombuffer(blob, dtype=dtype.newbyteorder("<"), count=count, offset=_HEADER.size)
    return flat.reshape((nx, ny, nz), order="F").astype(dtype), (sx, sy, sz)


def _read_bytes(path):
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc


def _write_bytes(path, blob):
    try:
        Path(path).write_bytes(blob)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def encode_volume(v: Volume3D) -> bytes:
    if not np.all(np.isfinite(v.data)):
        raise ValidationError("volume contains non-finite values")
    return _encode(VOLUME_MAGIC, v.data, v.spacing, np.dtype(np.float32))


def decode_volume(blob: bytes, path="<bytes>") -> Volume3D:
    data, spacing = _decode(blob, VOLUME_MAGIC, np.dtype(np.float32), path)
    return Volume3D(data, spacing)


def write_volume(v: Volume3D, path) -> None:
    _write_bytes(path, encode_volume(v))


def read_volume(path) -> Volume3D:
    return decode_volume(_read_bytes(path), path)


def encode_labels(lm: LabelMap3D) -> bytes:
    return _encode(LABEL_MAGIC, lm.labels, lm.spacing, np.dtype(np.uint16))


def decode_labels(blob: bytes, path="<bytes>") -> LabelMap3D:
    labels, spacing = _decode(blob, LABEL_MAGIC, np.dtype(np.uint16), path)
    return LabelMap3D(labels, spacing)


def write_labels(lm: LabelMap3D, path) -> None:
    _write_bytes(path, encode_labels(lm))


def read_labels(path) -> LabelMap3D:
    return decode_labels(_read_bytes(path), path)


# --- resampling -----------------------------------------------------------


def downsample2(v: Volume3D) -> Volume3D:
    """Average 2x2x2 blocks; boundary blocks average only the voxels that exist."""
    data = v.data.astype(np.float64)
    pad = [(0, d % 2) for d in data.shape]
    padded = np.pad(data, pad)
    ones = np.pad(np.ones_like(data), pad)
    shape = []
    for d in padded.shape:
        shape += [d // 2, 2]
    sums = padded.reshape(shape).sum(axis=(1, 3, 5))
    counts = ones.reshape(shape).sum(axis=(1, 3, 5))
    spacing = tuple(2.0 * s for s in v.spacing)
    return Volume3D((sums / counts).astype(np.float32), spacing)


def _linear_axis(a, axis, target):
    size = a.shape[axis]
    if size == 1:
        return np.repeat(a, target, axis=axis)
    pos = np.arange(target, dtype=np.float64) * (size - 1) / (target - 1)
    lo = np.minimum(np.floor(pos).astype(np.int64), size - 2)
    frac = pos - lo
    shape = [1] * a.ndim
    shape[axis] = target
    frac = frac.reshape(shape)
    return np.take(a, lo, axis=axis) * (1.0 - frac) + np.take(a, lo + 1, axis=axis) * frac


def upsample_trilinear(v: Volume3D, target_dims) -> Volume3D:
    """Corner-aligned trilinear interpolation to ``target_dims`` (never shrinks).

    Source index ``i`` lands on target index ``i * (T - 1) / (D - 1)``; axes of
    length one are replicated.
    """
    target_dims = tuple(int(t) for t in target_dims)
    if len(target_dims) != 3 or any(t < d for t, d in zip(target_dims, v.dims)):
        raise ValidationError(f"target dims {target_dims} smaller than source {v.dims}")
    out = v.data.astype(np.float64)
    for axis, target in enumerate(target_dims):
        if target != out.shape[axis]:
            out = _linear_axis(out, axis, target)
    spacing = tuple(
        s * (d - 1) / (t - 1) if d > 1 and t > 1 else s
        for s, d, t in zip(v.spacing, v.dims, target_dims)
    )
    return Volume3D(out.astype(np.float32), spacing)


def zscore_normalize(v: Volume3D, mask: LabelMap3D) -> Volume3D:
    """Standardize in-mask voxels to zero mean / unit population std; zero the rest."""
    if v.dims != mask.dims:
        raise ValidationError(f"volume dims {v.dims} != mask dims {mask.dims}")
    inside = mask.icc_mask
    values = v.data[inside].astype(np.float64)
    if values.size < 2:
        raise DegenerateInputError("need at least two in-mask voxels")
    std = values.std()
    if std == 0.0:
        raise DegenerateInputError("in-mask intensities have zero variance")
    out = np.zeros(v.dims, dtype=np.float64)
    out[inside] = (values - values.mean()) / std
    return Volume3D(out.astype(np.float32), v.spacing)


# --- cohort manifest ------------------------------------------------------


@dataclass(frozen=True)
class ManifestEntry:
    subject_id: str
    volume: str
    labels: str
    age: float
    diagnosis: str
    split: str

    def __post_init__(self):
        if self.diagnosis not in DIAGNOSES:
            raise ValidationError(f"{self.subject_id}: unknown diagnosis {self.diagnosis!r}")
        if self.split not in SPLITS:
            raise ValidationError(f"{self.subject_id}: unknown split {self.split!r}")
        if not 18 <= float(self.age) <= 110:
            raise ValidationError(f"{self.subject_id}: age {self.age} outside [18, 110]")


@dataclass
class CohortManifest:
    entries: list
    root: Path = field(default_factory=Path)

    def __post_init__(self):
        ids = [e.subject_id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ValidationError("subject ids must be unique")
        self.root = Path(self.root)

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def by_split(self, split):
        return [e for e in self.entries if e.split == split]

    def volume_path(self, entry):
        return self.root / entry.volume

    def labels_path(self, entry):
        return self.root / entry.labels

    def load(self, entry):
        """Return ``(Volume3D, LabelMap3D)`` for one entry."""
        for p in (self.volume_path(entry), self.labels_path(entry)):
            if not p.exists():
                raise IoError(f"{entry.subject_id}: missing file {p}")
        return read_volume(self.volume_path(entry)), read_labels(self.labels_path(entry))

    def to_json(self):
        rows = [
            {
                "subject_id": e.subject_id,
                "volume": e.volume,
                "labels": e.labels,
                "age": e.age,
                "diagnosis": e.diagnosis,
                "split": e.split,
            }
            for e in self.entries
        ]
        return json.dumps(rows, indent=1)

    def save(self, path):
        path = Path(path)
        try:
            path.write_text(self.to_json() + "\n", encoding="utf-8")
        except OSError as exc:
            raise IoError(f"cannot write manifest {path}: {exc}") from exc

    @classmethod
    def read(cls, path):
        path = Path(path)
        try:
            rows = json.loads(path.read_text(encoding="utf-8"))
        except OSError as exc:
            raise IoError(f"cannot read manifest {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: invalid JSON: {exc}") from exc
        if not isinstance(rows, list):
            raise FormatError(f"{path}: manifest must be a JSON array")
        try:
            entries = [ManifestEntry(**row) for row in rows]
        except TypeError as exc:
            raise FormatError(f"{path}: bad entry keys: {exc}") from exc
        return cls(entries, root=path.parent)
