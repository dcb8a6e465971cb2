"""Deep grading: one U-Net per patch location, whole-brain maps, structure scores."""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import EmptyStructureError, IoError, ValidationError
from .neural import tensor as T
from .neural.checkpoint import load_arrays, save_arrays
from .neural.optim import Adam
from .neural.unet import UNet, UNetConfig
from .tiler import PatchGrid, assemble, plan_grid
from .volume import DIAGNOSES, LabelMap3D, Volume3D, downsample2, upsample_trilinear

PATIENT_CLASSES = ("AD", "FTD")


@dataclass(frozen=True)
class GradingConfig:
    k: int = 3
    patch_dims: tuple = (12, 16, 12)
    unet: UNetConfig = field(default_factory=UNetConfig)
    epochs: int = 12
    batch_size: int = 6
    lr: float = 2e-3
    balance_classes: bool = True
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "patch_dims", tuple(int(p) for p in self.patch_dims))
        if isinstance(self.unet, dict):
            object.__setattr__(self, "unet", UNetConfig(**self.unet))
        if self.k < 1 or self.epochs < 1 or self.batch_size < 1 or self.lr <= 0:
            raise ValidationError(f"invalid grading config {self}")
        self.unet.check_patch(self.patch_dims)

    def to_dict(self):
        return {
            "k": self.k,
            "patch_dims": list(self.patch_dims),
            "unet": self.unet.to_dict(),
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "lr": self.lr,
            "balance_classes": self.balance_classes,
            "seed": self.seed,
        }


@dataclass
class GradingEnsemble:
    grid: PatchGrid
    models: dict
    config: GradingConfig
    input_dims: tuple
    input_mean: float = 0.0
    input_std: float = 1.0
    loss_history: dict = field(default_factory=dict)

    def normalize(self, coarse):
        return ((coarse - self.input_mean) / self.input_std).astype(np.float32)

    @property
    def m(self):
        return self.grid.m

    def save(self, directory):
        directory = Path(directory)
        try:
            directory.mkdir(parents=True, exist_ok=True)
            for loc in range(self.m):
                save_arrays(self.models[loc].arrays(), directory / f"loc_{loc}.gnn1")
            meta = {
                "grid": self.grid.to_dict(),
                "config": self.config.to_dict(),
                "input_dims": list(self.input_dims),
                "input_mean": self.input_mean,
                "input_std": self.input_std,
                "seed": self.config.seed,
            }
            (directory / "ensemble.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
        except OSError as exc:
            raise IoError(f"cannot save ensemble to {directory}: {exc}") from exc

    @classmethod
    def load(cls, directory):
        directory = Path(directory)
        try:
            meta = json.loads((directory / "ensemble.json").read_text())
        except OSError as exc:
            raise IoError(f"cannot read ensemble metadata in {directory}: {exc}") from exc
        config = GradingConfig(**{**meta["config"], "patch_dims": tuple(meta["config"]["patch_dims"])})
        grid = PatchGrid.from_dict(meta["grid"])
        models = {
            loc: UNet(config.unet, params=load_arrays(directory / f"loc_{loc}.gnn1"))
            for loc in range(grid.m)
        }
        return cls(grid, models, config, tuple(meta["input_dims"]), meta["input_mean"], meta["input_std"])


@dataclass(frozen=True)
class StructureGradingVector:
    scores: np.ndarray
    age: float
    subject_id: str = ""
    diagnosis: str = None

    @property
    def s(self):
        return len(self.scores)


def make_target(diagnosis, icc_mask_patch) -> Volume3D:
    """+1 inside the cavity for patients, -1 for controls, 0 outside."""
    if diagnosis not in DIAGNOSES:
        raise ValidationError(f"unknown diagnosis {diagnosis!r}")
    mask = np.asarray(icc_mask_patch, dtype=bool)
    value = 1.0 if diagnosis in PATIENT_CLASSES else -1.0
    return Volume3D(np.where(mask, value, 0.0))


def downsampled_inputs(volume: Volume3D, labels: LabelMap3D):
    """Halve resolution; a coarse voxel is in the cavity when most of its block is."""
    if volume.dims != labels.dims:
        raise ValidationError(f"volume {volume.dims} and labels {labels.dims} disagree")
    small = downsample2(volume).data
    icc = downsample2(Volume3D(labels.icc_mask.astype(np.float32))).data >= 0.5
    return small, icc


def plan_for(input_dims, config: GradingConfig) -> PatchGrid:
    coarse = tuple((d + 1) // 2 for d in input_dims)
    return plan_grid(coarse, config.patch_dims, config.k)


def sample_weights(diagnoses, balance=True):
    """Per-subject loss weights equalizing controls and patients when ``balance``."""
    is_patient = np.array([d in PATIENT_CLASSES for d in diagnoses])
    n, n_pat = len(is_patient), int(is_patient.sum())
    if not balance:
        return np.ones(n)
    return np.where(is_patient, n / (2.0 * n_pat), n / (2.0 * (n - n_pat)))


def train_location(loc, inputs, targets, weights, config: GradingConfig):
    """Fit the U-Net for one location; returns (parameter arrays, per-step losses)."""
    seeds = np.random.SeedSequence([config.seed, loc]).spawn(2)
    net = UNet(config.unet, seed=np.random.default_rng(seeds[0]))
    order_rng = np.random.default_rng(seeds[1])
    opt = Adam(net.params, lr=config.lr)
    x = inputs[..., None].astype(np.float32)
    t = targets[..., None].astype(np.float32)
    w = np.broadcast_to(weights.reshape(-1, 1, 1, 1, 1), t.shape).astype(np.float32)
    losses = []
    n = len(x)
    for _ in range(config.epochs):
        order = order_rng.permutation(n)
        for start in range(0, n, config.batch_size):
            batch = order[start:start + config.batch_size]
            opt.zero_grad()
            loss = T.masked_mse_loss(net.forward(x[batch]), t[batch], w[batch])
            loss.backward()
            opt.step()
            losses.append(float(loss.data))
    return net.arrays(), losses


def _train_location_job(args):
    return train_location(*args)


def train_ensemble(subjects, config: GradingConfig = GradingConfig(), workers=1) -> GradingEnsemble:
    """Train one U-Net per patch location.

    ``subjects`` is a sequence of ``(Volume3D, LabelMap3D, diagnosis)`` from the
    training split.  Patients of every disease share the +1 target.
    """
    subjects = list(subjects)
    diagnoses = [d for _, _, d in subjects]
    if not any(d == "CN" for d in diagnoses) or not any(d in PATIENT_CLASSES for d in diagnoses):
        raise ValidationError("grading training needs at least one control and one patient")
    input_dims = subjects[0][0].dims
    if any(v.dims != input_dims for v, _, _ in subjects):
        raise ValidationError("all training volumes must share dims")
    grid = plan_for(input_dims, config)
    prepared = [downsampled_inputs(v, lm) for v, lm, _ in subjects]
    small = np.stack([p[0] for p in prepared])
    icc = np.stack([p[1] for p in prepared])
    targets = np.stack([make_target(d, m).data for d, m in zip(diagnoses, icc)])
    # one affine intensity map for the whole ensemble, fit on training cavity voxels
    inside = small[icc].astype(np.float64)
    mean, std = float(inside.mean()), float(inside.std())
    if std == 0.0:
        raise ValidationError("training intensities inside the cavity have zero variance")
    small = ((small - mean) / std).astype(np.float32)
    weights = sample_weights(diagnoses, config.balance_classes)

    jobs = []
    for loc in range(grid.m):
        sl = (slice(None),) + grid.slices(loc)
        jobs.append((loc, small[sl], targets[sl], weights, config))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_train_location_job, jobs))
    else:
        results = [_train_location_job(job) for job in jobs]

    models, history = {}, {}
    for loc, (arrays, losses) in enumerate(results):
        models[loc] = UNet(config.unet, params=arrays)
        history[loc] = losses
    return GradingEnsemble(grid, models, config, input_dims, mean, std, history)


def infer_grading_maps(ensemble: GradingEnsemble, subjects, batch_size=32):
    """Grading maps for ``(Volume3D, LabelMap3D)`` pairs, batched per location."""
    subjects = list(subjects)
    for v, lm in subjects:
        if v.dims != ensemble.input_dims or lm.dims != ensemble.input_dims:
            raise ValidationError(f"subject dims {v.dims} != ensemble input dims {ensemble.input_dims}")
    if not subjects:
        return []
    small = ensemble.normalize(np.stack([downsample2(v).data for v, _ in subjects]))
    if small.shape[1:] != ensemble.grid.volume_dims:
        raise ValidationError("downsampled dims do not match the ensemble grid")
    per_subject = [dict() for _ in subjects]
    for loc in range(ensemble.m):
        patches = small[(slice(None),) + ensemble.grid.slices(loc)][..., None]
        preds = ensemble.models[loc].predict(patches, batch_size=batch_size)[..., 0]
        for i, p in enumerate(preds):
            per_subject[i][loc] = p
    maps = []
    for (v, lm), preds in zip(subjects, per_subject):
        coarse = assemble(preds, ensemble.grid)
        full = upsample_trilinear(coarse, v.dims).data
        maps.append(Volume3D(np.clip(full, -1.0, 1.0) * lm.icc_mask, v.spacing))
    return maps


def infer_grading_map(ensemble: GradingEnsemble, volume: Volume3D, labels: LabelMap3D) -> Volume3D:
    """Downsample, grade every patch, assemble, upsample and mask to the cavity."""
    return infer_grading_maps(ensemble, [(volume, labels)])[0]


def structure_means(values, labels, s):
    """Mean of ``values`` per label 1..s; raises on empty structures."""
    lab = np.asarray(labels).ravel().astype(np.int64)
    vals = np.asarray(values, dtype=np.float64).ravel()
    sums = np.bincount(lab, weights=vals, minlength=s + 1)[1:s + 1]
    counts = np.bincount(lab, minlength=s + 1)[1:s + 1]
    empty = np.flatnonzero(counts == 0)
    if empty.size:
        raise EmptyStructureError(int(empty[0]) + 1)
    return sums / counts


def aggregate_structure_scores(grading_map: Volume3D, labels: LabelMap3D, age, s=None,
                               subject_id="", diagnosis=None) -> StructureGradingVector:
    if grading_map.dims != labels.dims:
        raise ValidationError(f"map {grading_map.dims} and labels {labels.dims} disagree")
    s = int(labels.labels.max()) if s is None else int(s)
    scores = structure_means(grading_map.data, labels.labels, s)
    return StructureGradingVector(scores, float(age), subject_id, diagnosis)


def group_average_map(maps) -> Volume3D:
    maps = list(maps)
    if not maps:
        raise ValidationError("group is empty")
    total = np.zeros(maps[0].dims, dtype=np.float64)
    for m in maps:
        if m.dims != maps[0].dims:
            raise ValidationError("group maps must share dims")
        total += m.data
    return Volume3D((total / len(maps)).astype(np.float32), maps[0].spacing)


def top_n_structures(maps, labels, n, s=None):
    """Rank structures by group-mean grading, highest first (ties: lower id first).

    ``labels`` is either one reference ``LabelMap3D`` (scores are read off the
    group-average map) or one label map per member map (member scores are
    averaged).
    """
    maps = list(maps)
    if not maps:
        raise ValidationError("group is empty")
    if isinstance(labels, LabelMap3D):
        s = int(labels.labels.max()) if s is None else s
        means = structure_means(group_average_map(maps).data, labels.labels, s)
    else:
        labels = list(labels)
        if len(labels) != len(maps):
            raise ValidationError("need one label map per grading map")
        s = max(int(lm.labels.max()) for lm in labels) if s is None else s
        means = np.mean([structure_means(m.data, lm.labels, s) for m, lm in zip(maps, labels)], axis=0)
    order = sorted(range(s), key=lambda j: (-means[j], j))
    return [(j + 1, float(means[j])) for j in order[:n]]
