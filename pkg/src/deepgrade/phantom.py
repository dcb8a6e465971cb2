"""Synthetic cohorts with planted AD-like and FTD-like structural signatures.

Every subject shares one anatomy: an ellipsoidal intracranial cavity cut into
``s`` structures by nearest-site assignment.  Subjects differ by a smooth
intensity field, voxel noise, age and, for patients, a disease effect on the
structures affected by their diagnosis: intensity is scaled by
``1 - severity`` and the structure loses its one-voxel boundary shell to the
nearest unaffected structure.
"""

from __future__ import annotations

import functools
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import IoError, ValidationError
from .volume import DIAGNOSES, CohortManifest, LabelMap3D, ManifestEntry, Volume3D, write_labels, write_volume

DEFAULT_AGE_RANGE = {"CN": (55.0, 85.0), "AD": (60.0, 90.0), "FTD": (50.0, 80.0)}


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple = (48, 56, 48)
    s: int = 12
    affected_ad: tuple = None
    affected_ftd: tuple = None
    severity: float = 0.35
    noise_sigma: float = 0.05
    jitter_sigma: float = 0.02
    age_range: dict = field(default_factory=lambda: dict(DEFAULT_AGE_RANGE))
    seed: int = 0

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) != 3 or min(dims) < 16:
            raise ValidationError(f"phantom dims must be three values >= 16, got {dims}")
        if self.s < 1:
            raise ValidationError("s must be >= 1")
        if not 0.0 < self.severity <= 1.0:
            raise ValidationError(f"severity must lie in (0, 1], got {self.severity}")
        if self.noise_sigma < 0 or self.jitter_sigma < 0:
            raise ValidationError("noise levels must be non-negative")
        object.__setattr__(self, "dims", dims)
        ranges = {k: (float(v[0]), float(v[1])) for k, v in self.age_range.items()}
        for cls in DIAGNOSES:
            lo, hi = ranges.get(cls, DEFAULT_AGE_RANGE[cls])
            if not 18 <= lo <= hi <= 110:
                raise ValidationError(f"age range for {cls} must lie in [18, 110]")
            ranges[cls] = (lo, hi)
        object.__setattr__(self, "age_range", ranges)
        for name in ("affected_ad", "affected_ftd"):
            ids = getattr(self, name)
            if ids is not None:
                ids = tuple(sorted({int(i) for i in ids}))
                if any(not 1 <= i <= self.s for i in ids):
                    raise ValidationError(f"{name} must be a subset of 1..{self.s}")
                object.__setattr__(self, name, ids)

    def to_dict(self):
        d = asdict(self)
        d["dims"] = list(self.dims)
        d["age_range"] = {k: list(v) for k, v in self.age_range.items()}
        for name in ("affected_ad", "affected_ftd"):
            d[name] = None if d[name] is None else list(d[name])
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def affected(self, diagnosis):
        """Resolved affected structure ids for a diagnosis (empty for CN)."""
        if diagnosis == "CN":
            return ()
        anatomy = build_anatomy(self.dims, self.s, self.seed)
        if diagnosis == "AD":
            return self.affected_ad if self.affected_ad is not None else anatomy.default_ad
        if diagnosis == "FTD":
            return self.affected_ftd if self.affected_ftd is not None else anatomy.default_ftd
        raise ValidationError(f"unknown diagnosis {diagnosis!r}")


@dataclass(frozen=True)
class Anatomy:
    labels: np.ndarray
    sites: np.ndarray
    base_intensity: np.ndarray
    default_ad: tuple
    default_ftd: tuple


@dataclass(frozen=True)
class PhantomSubject:
    volume: Volume3D
    labels: LabelMap3D
    age: float
    diagnosis: str


def _icc_mask(dims):
    grids = np.meshgrid(*[np.arange(d, dtype=np.float64) for d in dims], indexing="ij")
    r2 = np.zeros(dims)
    for g, d in zip(grids, dims):
        center, radius = (d - 1) / 2.0, 0.45 * d
        r2 += ((g - center) / radius) ** 2
    return r2 <= 1.0


@functools.lru_cache(maxsize=8)
def build_anatomy(dims, s, seed) -> Anatomy:
    """Cohort-wide segmentation and per-structure base intensities."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5173]))
    icc = _icc_mask(dims)
    coords = np.argwhere(icc).astype(np.float64)
    sites = coords[rng.choice(len(coords), size=s, replace=False)]
    # Lloyd relaxation evens out structure sizes.
    for _ in range(10):
        owner = _nearest(coords, sites)
        for j in range(s):
            members = coords[owner == j]
            if len(members):
                sites[j] = members.mean(axis=0)
    owner = _nearest(coords, sites)
    labels = np.zeros(dims, dtype=np.uint16)
    labels[icc] = owner + 1
    base = rng.uniform(0.75, 1.0, size=s)
    mid_x = (dims[0] - 1) / 2.0
    ftd = tuple(j + 1 for j in range(s) if sites[j, 0] > mid_x)
    ad = tuple(j + 1 for j in range(s) if sites[j, 0] <= mid_x)
    labels.setflags(write=False)
    sites.setflags(write=False)
    return Anatomy(labels, sites, base, ad, ftd)


def _nearest(coords, sites):
    d2 = ((coords[:, None, :] - sites[None, :, :]) ** 2).sum(axis=2)
    return d2.argmin(axis=1)


def _boundary_shell(labels, structure):
    """Voxels of ``structure`` with a 6-neighbour carrying any other label (or outside the grid)."""
    inside = labels == structure
    padded = np.pad(labels, 1, constant_values=0)
    shell = np.zeros_like(inside)
    core = tuple(slice(1, -1) for _ in range(3))
    for axis in range(3):
        for step in (-1, 1):
            sl = list(core)
            sl[axis] = slice(1 + step, padded.shape[axis] - 1 + step)
            shell |= padded[tuple(sl)] != structure
    return inside & shell


def atrophy(labels, affected):
    """Erode each affected structure by one voxel; shells go to the nearest unaffected structure."""
    if not affected:
        return labels.copy()
    affected_mask = np.isin(labels, affected)
    receivers = (labels > 0) & ~affected_mask
    if not receivers.any():
        raise ValidationError("affected structures cover the whole cavity; nothing can absorb atrophy")
    shell = np.zeros(labels.shape, dtype=bool)
    for j in affected:
        shell |= _boundary_shell(labels, j)
    _, nearest = ndimage.distance_transform_edt(~receivers, return_indices=True)
    out = labels.copy()
    idx = tuple(n[shell] for n in nearest)
    out[shell] = labels[idx]
    return out


def generate_subject(spec: PhantomSpec, diagnosis, subject_seed) -> PhantomSubject:
    if diagnosis not in DIAGNOSES:
        raise ValidationError(f"unknown diagnosis {diagnosis!r}")
    affected = spec.affected(diagnosis)
    if diagnosis != "CN" and not affected:
        raise ValidationError(f"{diagnosis} subject needs a non-empty affected set")
    anatomy = build_anatomy(spec.dims, spec.s, spec.seed)
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, int(subject_seed)]))
    lo, hi = spec.age_range[diagnosis]
    age = round(float(rng.uniform(lo, hi)), 1)

    icc = anatomy.labels > 0
    jitter = ndimage.gaussian_filter(rng.standard_normal(spec.dims), sigma=4.0, mode="nearest")
    jitter *= spec.jitter_sigma / max(jitter.std(), 1e-12)
    noise = rng.standard_normal(spec.dims) * spec.noise_sigma

    signal = np.zeros(spec.dims)
    signal[icc] = anatomy.base_intensity[anatomy.labels[icc].astype(np.int64) - 1]
    signal = (signal + jitter) * icc
    if affected:
        signal[np.isin(anatomy.labels, affected)] *= 1.0 - spec.severity
    data = np.where(icc, signal + noise, 0.0)

    labels = atrophy(anatomy.labels, affected) if affected else anatomy.labels
    return PhantomSubject(Volume3D(data.astype(np.float32)), LabelMap3D(labels), age, diagnosis)


def split_counts(n, fractions):
    """Largest-remainder allocation of ``n`` items to ``fractions`` (ties go to the earlier split)."""
    raw = [n * f for f in fractions]
    counts = [int(np.floor(r + 1e-9)) for r in raw]
    order = sorted(range(len(fractions)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    return counts


def subject_seed(class_index, index):
    return class_index * 1_000_003 + index


def _write_one(args):
    spec_dict, diagnosis, seed, vol_path, lab_path = args
    subject = generate_subject(PhantomSpec.from_dict(spec_dict), diagnosis, seed)
    write_volume(subject.volume, vol_path)
    write_labels(subject.labels, lab_path)
    return subject.age


def generate_cohort(spec: PhantomSpec, n_per_class, split_fractions=(0.8, 0.2), out_dir=".", workers=1):
    """Write a cohort to ``out_dir`` and return its manifest.

    Splits are stratified: each class is divided by largest-remainder rounding
    over ``split_fractions`` (``train``, ``val`` and optionally ``test``), with
    membership drawn by a seeded shuffle.
    """
    fractions = tuple(float(f) for f in split_fractions)
    if not 2 <= len(fractions) <= 3 or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValidationError(f"split fractions must have 2-3 entries summing to 1, got {fractions}")
    out_dir = Path(out_dir)
    try:
        (out_dir / "subjects").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoError(f"cannot create {out_dir}: {exc}") from exc

    jobs, meta = [], []
    for ci, cls in enumerate(DIAGNOSES):
        n = int(n_per_class.get(cls, 0))
        if cls in n_per_class and n < 1:
            raise ValidationError(f"class {cls} needs at least one subject")
        if n == 0:
            continue
        counts = split_counts(n, fractions)
        perm = np.random.default_rng(np.random.SeedSequence([spec.seed, 0x5B17, ci])).permutation(n)
        split_of = np.empty(n, dtype=object)
        start = 0
        for name, c in zip(("train", "val", "test"), counts):
            split_of[perm[start:start + c]] = name
            start += c
        for idx in range(n):
            sid = f"{cls}{idx:03d}"
            vol, lab = f"subjects/{sid}.gvl", f"subjects/{sid}.gsg"
            jobs.append((spec.to_dict(), cls, subject_seed(ci, idx), out_dir / vol, out_dir / lab))
            meta.append((sid, vol, lab, cls, split_of[idx]))
    if not jobs:
        raise ValidationError("no subjects requested")

    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            ages = list(pool.map(_write_one, jobs))
    else:
        ages = [_write_one(job) for job in jobs]

    entries = [
        ManifestEntry(sid, vol, lab, age, cls, split)
        for (sid, vol, lab, cls, split), age in zip(meta, ages)
    ]
    manifest = CohortManifest(entries, root=out_dir)
    manifest.save(out_dir / "manifest.json")
    try:
        (out_dir / "phantom_spec.json").write_text(json.dumps(spec.to_dict(), indent=1, sort_keys=True) + "\n")
    except OSError as exc:
        raise IoError(f"cannot write phantom spec: {exc}") from exc
    return manifest
