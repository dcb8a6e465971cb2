"""Stratified splits, GCN/SVM probability fusion and repeated end-to-end experiments."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import metrics
from .classify.features import build_graph, compute_volume_features
from .classify.gcn import GCNConfig, gcn_forward, train_gcn
from .classify.svm import KERNELS, c_grid, grid_search_svm, svm_predict_proba
from .errors import DeepGradeError, IoError, ValidationError
from .grading import GradingConfig, aggregate_structure_scores, infer_grading_maps, train_ensemble
from .phantom import split_counts
from .volume import DIAGNOSES, SPLITS, CohortManifest, LabelMap3D, Volume3D

# class groups per task, in output class order
TASKS = {
    "dementia": (("CN",), ("AD", "FTD")),
    "ad_cn": (("CN",), ("AD",)),
    "ftd_cn": (("CN",), ("FTD",)),
    "ad_ftd": (("AD",), ("FTD",)),
    "3class": (("CN",), ("AD",), ("FTD",)),
}
ALPHA_GRID = np.arange(101) / 100.0


def task_classes(task):
    if task not in TASKS:
        raise ValidationError(f"unknown task {task!r}; expected one of {sorted(TASKS)}")
    return TASKS[task]


def class_names(task):
    return ["+".join(group) for group in task_classes(task)]


def class_index(task, diagnosis):
    """Index of ``diagnosis`` in the task's class order, or None when the task ignores it."""
    for i, group in enumerate(task_classes(task)):
        if diagnosis in group:
            return i
    return None


def fuse(p_gcn, p_svm, alpha):
    """``alpha * p_gcn + (1 - alpha) * p_svm``, renormalized only if rows drift from 1 by more than 1e-9."""
    p_gcn = np.asarray(p_gcn, dtype=np.float64)
    p_svm = np.asarray(p_svm, dtype=np.float64)
    if p_gcn.shape != p_svm.shape:
        raise ValidationError(f"probability shapes differ: {p_gcn.shape} vs {p_svm.shape}")
    if not 0.0 <= alpha <= 1.0:
        raise ValidationError(f"alpha must lie in [0, 1], got {alpha}")
    out = alpha * p_gcn + (1.0 - alpha) * p_svm
    total = out.sum(axis=-1, keepdims=True)
    if np.any(np.abs(total - 1.0) > 1e-9):
        out = out / total
    return out


def fit_alpha(p_gcn, p_svm, labels, n_classes=None):
    """Grid-search alpha in {0, 0.01, ..., 1} for the best BACC of argmax fused predictions.

    Ties go to the smaller alpha.  Returns ``(alpha, bacc_at_alpha, baccs)``.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise ValidationError("fit_alpha needs at least one labelled pair")
    k = int(n_classes) if n_classes is not None else np.asarray(p_gcn).shape[-1]
    baccs = np.array([
        metrics.present_class_bacc(labels, metrics.argmax_predict(fuse(p_gcn, p_svm, a)), k)
        for a in ALPHA_GRID
    ])
    best = int(np.argmax(baccs))  # first maximum is the smallest alpha
    return float(ALPHA_GRID[best]), float(baccs[best]), baccs


def stratified_split(diagnoses, fractions, seed):
    """Assign each item to train/val(/test) so that every class follows ``fractions``.

    ``diagnoses`` is a sequence of class labels or a :class:`CohortManifest`.
    Per-class counts use largest-remainder rounding; membership is a seeded
    shuffle within each class (classes handled in sorted order).
    """
    if isinstance(diagnoses, CohortManifest):
        diagnoses = [e.diagnosis for e in diagnoses]
    diagnoses = list(diagnoses)
    fractions = tuple(float(f) for f in fractions)
    if not 1 <= len(fractions) <= len(SPLITS) or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise ValidationError(f"split fractions must be 1-3 non-negative values summing to 1, got {fractions}")
    out = np.empty(len(diagnoses), dtype=object)
    rng = np.random.default_rng(seed)
    for cls in sorted(set(diagnoses)):
        members = np.flatnonzero(np.array([d == cls for d in diagnoses]))
        counts = split_counts(len(members), fractions)
        if any(c == 0 and f > 0 for c, f in zip(counts, fractions)):
            raise ValidationError(f"class {cls} with {len(members)} samples cannot fill splits {fractions}")
        members = members[rng.permutation(len(members))]
        start = 0
        for name, c in zip(SPLITS, counts):
            out[members[start:start + c]] = name
            start += c
    return out.tolist()


@dataclass(frozen=True)
class Subject:
    subject_id: str
    volume: Volume3D
    labels: LabelMap3D
    age: float
    diagnosis: str


def load_cohort(manifest: CohortManifest):
    subjects = []
    for entry in manifest:
        volume, labels = manifest.load(entry)
        subjects.append(Subject(entry.subject_id, volume, labels, float(entry.age), entry.diagnosis))
    return subjects


@dataclass(frozen=True)
class ExperimentConfig:
    task: str = "3class"
    repetitions: int = 3
    split_fractions: tuple = (0.6, 0.2, 0.2)
    grading: GradingConfig = field(default_factory=GradingConfig)
    gcn: GCNConfig = field(default_factory=GCNConfig)
    svm_kernels: tuple = KERNELS
    svm_n_c: int = 500
    top_n: int = 10
    seed: int = 0

    def __post_init__(self):
        task_classes(self.task)
        if isinstance(self.grading, dict):
            object.__setattr__(self, "grading", GradingConfig(**self.grading))
        if isinstance(self.gcn, dict):
            object.__setattr__(self, "gcn", GCNConfig(**self.gcn))
        object.__setattr__(self, "split_fractions", tuple(float(f) for f in self.split_fractions))
        object.__setattr__(self, "svm_kernels", tuple(self.svm_kernels))
        if self.repetitions < 1:
            raise ValidationError("repetitions must be >= 1")
        if len(self.split_fractions) != 3:
            raise ValidationError("experiments need train/val/test fractions")
        if any(k not in KERNELS for k in self.svm_kernels) or not self.svm_kernels:
            raise ValidationError(f"svm kernels must be drawn from {KERNELS}")
        if self.svm_n_c < 2 or self.top_n < 1:
            raise ValidationError("svm_n_c must be >= 2 and top_n >= 1")

    def to_dict(self):
        return {
            "task": self.task,
            "repetitions": self.repetitions,
            "split_fractions": list(self.split_fractions),
            "grading": self.grading.to_dict(),
            "gcn": self.gcn.to_dict(),
            "svm_kernels": list(self.svm_kernels),
            "svm_n_c": self.svm_n_c,
            "top_n": self.top_n,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def _scores(probs, labels, k):
    cm = metrics.confusion_matrix(labels, metrics.argmax_predict(probs), k)
    auc = metrics.auc_macro_ovr(probs, labels)
    return {
        "acc": metrics.acc(cm),
        "bacc": metrics.bacc(cm),
        "auc": auc,
        "sensitivity": metrics.sensitivity(cm).tolist(),
        "confusion": cm.tolist(),
    }


def _rank(means, n):
    order = sorted(range(len(means)), key=lambda j: (-means[j], j))
    return [[j + 1, float(means[j])] for j in order[:n]]


@dataclass
class Repetition:
    """One repetition's numbers plus the in-memory artifacts needed for figures."""

    record: dict
    group_maps: dict = field(default_factory=dict)


def run_repetition(subjects, config: ExperimentConfig, rep, workers=1):
    task, seed = config.task, config.seed + rep
    k = len(task_classes(task))
    splits = stratified_split([s.diagnosis for s in subjects], config.split_fractions, seed)
    train_ids = [i for i, sp in enumerate(splits) if sp == "train"]
    grading_cfg = replace(config.grading, seed=seed)
    ensemble = train_ensemble([(subjects[i].volume, subjects[i].labels, subjects[i].diagnosis) for i in train_ids],
                              grading_cfg, workers=workers)
    maps = infer_grading_maps(ensemble, [(s.volume, s.labels) for s in subjects])
    s_count = max(int(s.labels.labels.max()) for s in subjects)
    vectors = [
        aggregate_structure_scores(m, s.labels, s.age, s_count, s.subject_id, s.diagnosis)
        for m, s in zip(maps, subjects)
    ]
    graphs = [build_graph(v) for v in vectors]
    volumes = np.array([compute_volume_features(s.labels, s_count) for s in subjects])

    def members(split):
        idx = [i for i, sp in enumerate(splits) if sp == split and class_index(task, subjects[i].diagnosis) is not None]
        return idx, np.array([class_index(task, subjects[i].diagnosis) for i in idx], dtype=np.int64)

    (tr, ytr), (va, yva), (te, yte) = members("train"), members("val"), members("test")
    gcn, gcn_hist = train_gcn([(graphs[i], y) for i, y in zip(tr, ytr)], [(graphs[i], y) for i, y in zip(va, yva)],
                              config.gcn, seed=[seed, 0x6C4], n_classes=k)
    svm = grid_search_svm(volumes[tr], ytr, volumes[va], yva, n_classes=k, kernels=config.svm_kernels,
                          c_values=c_grid(config.svm_n_c))

    def probs(idx):
        return gcn_forward(gcn, [graphs[i] for i in idx]), svm_predict_proba(svm, volumes[idx])

    g_tr, s_tr = probs(tr)
    alpha, fused_fit, _ = fit_alpha(g_tr, s_tr, ytr, k)
    g_te, s_te = probs(te)
    record = {
        "repetition": rep,
        "seed": seed,
        "alpha": alpha,
        "fit_bacc": {
            "fused": fused_fit,
            "gcn": metrics.present_class_bacc(ytr, metrics.argmax_predict(g_tr), k),
            "svm": metrics.present_class_bacc(ytr, metrics.argmax_predict(s_tr), k),
        },
        "test": {
            "fused": _scores(fuse(g_te, s_te, alpha), yte, k),
            "gcn": _scores(g_te, yte, k),
            "svm": _scores(s_te, yte, k),
        },
        "gcn_best_epoch": gcn_hist["best_epoch"],
        "svm": {"kernel": svm.kernel, "C": svm.C, "val_bacc": svm.val_bacc, "failed_cells": len(svm.failed_cells)},
        "grading_final_loss": float(np.mean([h[-1] for h in ensemble.loss_history.values()])),
        "n_train": len(tr), "n_val": len(va), "n_test": len(te),
    }

    # group structure means over held-out subjects, every diagnosis regardless of task
    group_scores, group_maps = {}, {}
    for dx in DIAGNOSES:
        idx = [i for i in range(len(subjects)) if splits[i] == "test" and subjects[i].diagnosis == dx]
        if idx:
            group_scores[dx] = np.mean([vectors[i].scores for i in idx], axis=0).tolist()
            group_maps[dx] = (np.sum([maps[i].data.astype(np.float64) for i in idx], axis=0), len(idx))
    record["group_structure_scores"] = group_scores
    return Repetition(record, group_maps)


def _mean_metrics(reps, model):
    keys = ("acc", "bacc", "auc")
    out = {key: float(np.mean([r["test"][model][key] for r in reps])) for key in keys}
    out["sensitivity"] = np.mean([r["test"][model]["sensitivity"] for r in reps], axis=0).tolist()
    out["confusion"] = np.sum([r["test"][model]["confusion"] for r in reps], axis=0).tolist()
    return out


@dataclass
class EvaluationReport:
    task: str
    classes: list
    config: dict
    repetitions: list
    summary: dict
    localization: dict
    runtime_seconds: float = field(default=0.0, compare=False)
    group_maps: dict = field(default_factory=dict, compare=False, repr=False)

    def to_dict(self):
        return {
            "task": self.task,
            "classes": self.classes,
            "config": self.config,
            "n_repetitions": len(self.repetitions),
            "repetitions": self.repetitions,
            "summary": self.summary,
            "localization": self.localization,
        }

    def to_json(self):
        """Deterministic serialization: sorted keys, no timing information."""
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    def save(self, path):
        try:
            Path(path).write_text(self.to_json())
        except OSError as exc:
            raise IoError(f"cannot write report {path}: {exc}") from exc

    def confusion_csv(self, model="fused"):
        cm = self.summary[model]["confusion"]
        lines = ["true\\pred," + ",".join(self.classes)]
        lines += [name + "," + ",".join(str(v) for v in row) for name, row in zip(self.classes, cm)]
        return "\n".join(lines) + "\n"


def run_experiment(task, subjects, config: ExperimentConfig = None, n_repetitions=None, workers=1, log=None):
    """Repeat split -> grading -> GCN/SVM -> fusion -> test evaluation ``n_repetitions`` times.

    ``subjects`` is a sequence of :class:`Subject`.  Repetition ``r`` reseeds
    splitting and training with ``config.seed + r``.
    """
    config = config or ExperimentConfig(task=task)
    if task != config.task:
        config = replace(config, task=task)
    if n_repetitions is not None:
        config = replace(config, repetitions=int(n_repetitions))
    subjects = list(subjects)
    present = {s.diagnosis for s in subjects}
    for group in task_classes(task):
        if not present & set(group):
            raise ValidationError(f"cohort has no subjects for class {'+'.join(group)}")
    start = time.perf_counter()
    reps, sums = [], {}
    for r in range(config.repetitions):
        try:
            rep = run_repetition(subjects, config, r, workers=workers)
        except ValidationError as exc:
            raise ValidationError(f"repetition {r} (seed {config.seed + r}): {exc}") from exc
        except DeepGradeError as exc:
            raise DeepGradeError(f"repetition {r} (seed {config.seed + r}): {exc}") from exc
        reps.append(rep.record)
        for dx, (total, n) in rep.group_maps.items():
            acc_total, acc_n = sums.get(dx, (0.0, 0))
            sums[dx] = (acc_total + total, acc_n + n)
        if log:
            log(f"repetition {r}: fused test BACC {rep.record['test']['fused']['bacc']:.3f}")

    summary = {model: _mean_metrics(reps, model) for model in ("fused", "gcn", "svm")}
    summary["alpha"] = [r["alpha"] for r in reps]
    localization = {}
    for dx in DIAGNOSES:
        per_rep = [r["group_structure_scores"][dx] for r in reps if dx in r["group_structure_scores"]]
        if per_rep:
            means = np.mean(per_rep, axis=0)
            localization[dx] = {
                "structure_means": means.tolist(),
                "ranking": _rank(means, len(means)),
                "top_n": _rank(means, config.top_n),
            }
    group_maps = {dx: Volume3D((total / n).astype(np.float32), subjects[0].volume.spacing)
                  for dx, (total, n) in sums.items()}
    return EvaluationReport(task, class_names(task), config.to_dict(), reps, summary, localization,
                            time.perf_counter() - start, group_maps)
