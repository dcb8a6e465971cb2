"""Command-line front end: phantom cohorts, grading, classifiers, evaluation and rankings.

Every command writes under ``<workdir>/<command>-s<seed>-<digest>/`` where the
digest hashes the configuration that determines the output, including the
digests of upstream artifacts.  Exit codes: 0 success, 1 invalid input or
configuration, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__, metrics
from .classify.features import build_graph, compute_volume_features
from .classify.gcn import gcn_forward, train_gcn
from .classify.svm import c_grid, grid_search_svm, svm_predict_proba
from .errors import DeepGradeError, IoError, ValidationError
from .evaluation import (ExperimentConfig, class_index, class_names, fit_alpha, load_cohort,
                         run_experiment, task_classes)
from .grading import (GradingEnsemble, aggregate_structure_scores, infer_grading_map, infer_grading_maps,
                      top_n_structures, train_ensemble)
from .phantom import PhantomSpec, generate_cohort
from .plotting import mid_slices, plot_grading_map, plot_group_maps, plot_repetition_bacc, plot_top_structures
from .volume import DIAGNOSES, SPLITS, CohortManifest, write_volume

log = logging.getLogger("deepgrade")

DEFAULT_N_PER_CLASS = {"CN": 30, "AD": 30, "FTD": 30}


@dataclass(frozen=True)
class RunConfig:
    workdir: str = "runs"
    manifest: str = None
    phantom: PhantomSpec = field(default_factory=PhantomSpec)
    n_per_class: dict = field(default_factory=lambda: dict(DEFAULT_N_PER_CLASS))
    experiment: ExperimentConfig = field(default_factory=ExperimentConfig)
    workers: int = 1

    def __post_init__(self):
        if self.workers < 1:
            raise ValidationError("workers must be >= 1")
        for cls, n in self.n_per_class.items():
            if cls not in DIAGNOSES or int(n) < 1:
                raise ValidationError(f"n_per_class needs classes from {DIAGNOSES} with counts >= 1")
        if self.manifest is not None and not Path(self.manifest).is_file():
            raise ValidationError(f"manifest {self.manifest} does not exist")

    @property
    def seed(self):
        return self.experiment.seed

    def to_dict(self):
        return {
            "workdir": self.workdir,
            "manifest": self.manifest,
            "phantom": self.phantom.to_dict(),
            "n_per_class": dict(self.n_per_class),
            "experiment": self.experiment.to_dict(),
            "workers": self.workers,
        }

    @classmethod
    def from_dict(cls, d):
        try:
            d = dict(d)
            if "phantom" in d:
                d["phantom"] = PhantomSpec.from_dict(d["phantom"])
            if "experiment" in d:
                exp = dict(d["experiment"])
                if "grading" in exp:
                    grading = dict(exp["grading"])
                    grading["patch_dims"] = tuple(grading.get("patch_dims", (12, 16, 12)))
                    exp["grading"] = grading
                d["experiment"] = ExperimentConfig.from_dict(exp)
            return cls(**d)
        except TypeError as exc:
            raise ValidationError(f"invalid configuration: {exc}") from exc


def _merge(base, override, path=""):
    out = copy.deepcopy(base)
    for key, value in override.items():
        if key not in out:
            raise ValidationError(f"unknown configuration key {path + key!r}")
        if isinstance(out[key], dict) and isinstance(value, dict) and key not in ("n_per_class", "age_range"):
            out[key] = _merge(out[key], value, f"{path}{key}.")
        else:
            out[key] = value
    return out


def load_config(path=None, seed=None, workers=None) -> RunConfig:
    """Defaults, overlaid by a JSON file, overlaid by command-line seed and workers."""
    data = RunConfig().to_dict()
    if path is not None:
        try:
            data = _merge(data, json.loads(Path(path).read_text()))
        except OSError as exc:
            raise ValidationError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ValidationError(f"config {path} is not valid JSON: {exc}") from exc
    if seed is not None:
        data["experiment"]["seed"] = int(seed)
    if workers is not None:
        data["workers"] = int(workers)
    return RunConfig.from_dict(data)


def _digest(payload):
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


class Layout:
    """Content-addressed output directories for every command."""

    def __init__(self, config: RunConfig):
        self.config = config
        self.root = Path(config.workdir)

    def _dir(self, command, payload, seed):
        return self.root / f"{command}-s{seed}-{_digest({'command': command, 'seed': seed, **payload})}"

    def phantom(self):
        c = self.config
        return self._dir("phantom", {"phantom": c.phantom.to_dict(), "n_per_class": c.n_per_class,
                                     "split_fractions": list(c.experiment.split_fractions)}, c.phantom.seed)

    def manifest_path(self):
        if self.config.manifest is not None:
            return Path(self.config.manifest)
        return self.phantom() / "manifest.json"

    def cohort_key(self):
        if self.config.manifest is not None:
            return {"manifest": str(Path(self.config.manifest).resolve())}
        return {"phantom": self.phantom().name}

    def train_grading(self):
        c = self.config
        return self._dir("train-grading", {**self.cohort_key(), "grading": c.experiment.grading.to_dict()}, c.seed)

    def grade(self):
        return self._dir("grade", {"ensemble": self.train_grading().name}, self.config.seed)

    def train_classifiers(self):
        e = self.config.experiment
        payload = {"ensemble": self.train_grading().name, "task": e.task, "gcn": e.gcn.to_dict(),
                   "svm_kernels": list(e.svm_kernels), "svm_n_c": e.svm_n_c}
        return self._dir("train-classifiers", payload, e.seed)

    def evaluate(self):
        return self._dir("evaluate", {**self.cohort_key(), "experiment": self.config.experiment.to_dict()},
                         self.config.seed)

    def report_topn(self):
        return self._dir("report-topn", {"ensemble": self.train_grading().name}, self.config.seed)


def _require(path, producer):
    if not Path(path).exists():
        raise ValidationError(f"missing {path}; run `deepgrade {producer}` with the same config and seed first")
    return Path(path)


def _mkdir(path):
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoError(f"cannot create {path}: {exc}") from exc
    return path


def _write_text(path, text):
    try:
        Path(path).write_text(text)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def _write_json(path, obj):
    _write_text(path, json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _manifest(layout):
    path = layout.manifest_path()
    _require(path, "phantom")
    return CohortManifest.read(path)


def encode_pgm(plane):
    """8-bit binary PGM of a 2-D grading plane, mapping [-1, 1] linearly onto [0, 255]."""
    plane = np.asarray(plane, dtype=np.float64)
    pixels = np.clip(np.rint((np.clip(plane, -1.0, 1.0) + 1.0) * 127.5), 0, 255).astype(np.uint8)
    rows, cols = pixels.shape
    return f"P5\n{cols} {rows}\n255\n".encode("ascii") + pixels.tobytes()


def structure_csv(scores):
    return "structure_id,score\n" + "".join(f"{j + 1},{float(v):.9g}\n" for j, v in enumerate(scores))


# --- commands ---------------------------------------------------------------


def cmd_phantom(config: RunConfig):
    out = _mkdir(config_layout(config).phantom())
    manifest = generate_cohort(config.phantom, config.n_per_class, config.experiment.split_fractions, out,
                               workers=config.workers)
    log.info("wrote %d subjects to %s", len(manifest), out)
    return out / "manifest.json"


def cmd_train_grading(config: RunConfig):
    layout = config_layout(config)
    manifest = _manifest(layout)
    train = [(*manifest.load(e), e.diagnosis) for e in manifest.by_split("train")]
    grading = config.experiment.grading
    if grading.seed != config.seed:
        grading = replace(grading, seed=config.seed)
    ensemble = train_ensemble(train, grading, workers=config.workers)
    out = layout.train_grading() / "ensemble"
    ensemble.save(out)
    log.info("trained %d location models into %s", ensemble.m, out)
    return out


def _load_ensemble(layout):
    return GradingEnsemble.load(_require(layout.train_grading() / "ensemble", "train-grading"))


def cmd_grade(config: RunConfig, subject_id):
    layout = config_layout(config)
    manifest = _manifest(layout)
    entries = {e.subject_id: e for e in manifest}
    if subject_id not in entries:
        raise ValidationError(f"subject {subject_id!r} is not in {layout.manifest_path()}")
    entry = entries[subject_id]
    ensemble = _load_ensemble(layout)
    volume, labels = manifest.load(entry)
    gmap = infer_grading_map(ensemble, volume, labels)
    out = _mkdir(layout.grade())
    write_volume(gmap, out / f"{subject_id}.gvl")
    vec = aggregate_structure_scores(gmap, labels, entry.age, subject_id=subject_id, diagnosis=entry.diagnosis)
    _write_text(out / f"{subject_id}_structures.csv", structure_csv(vec.scores))
    for name, plane in mid_slices(gmap.data).items():
        try:
            (out / f"{subject_id}_{name}.pgm").write_bytes(encode_pgm(plane[::-1]))
        except OSError as exc:
            raise IoError(f"cannot write slice: {exc}") from exc
    plot_grading_map(gmap, out / f"{subject_id}.png", title=f"{subject_id} ({entry.diagnosis})")
    log.info("graded %s into %s", subject_id, out)
    return out


def _features(manifest, ensemble):
    entries = list(manifest)
    pairs = [manifest.load(e) for e in entries]
    maps = infer_grading_maps(ensemble, pairs)
    s = max(int(lab.labels.max()) for _, lab in pairs)
    graphs = [build_graph(aggregate_structure_scores(m, lab, e.age, s)) for m, (_, lab), e in zip(maps, pairs, entries)]
    volumes = np.array([compute_volume_features(lab, s) for _, lab in pairs])
    return entries, graphs, volumes


def cmd_train_classifiers(config: RunConfig):
    layout = config_layout(config)
    manifest = _manifest(layout)
    ensemble = _load_ensemble(layout)
    exp = config.experiment
    k = len(task_classes(exp.task))
    entries, graphs, volumes = _features(manifest, ensemble)

    def members(split):
        idx = [i for i, e in enumerate(entries) if e.split == split and class_index(exp.task, e.diagnosis) is not None]
        return idx, np.array([class_index(exp.task, entries[i].diagnosis) for i in idx], dtype=np.int64)

    (tr, ytr), (va, yva) = members("train"), members("val")
    if not tr or not va:
        raise ValidationError("the manifest needs train and val subjects for the task's classes")
    gcn, hist = train_gcn([(graphs[i], y) for i, y in zip(tr, ytr)], [(graphs[i], y) for i, y in zip(va, yva)],
                          exp.gcn, seed=[exp.seed, 0x6C4], n_classes=k)
    svm = grid_search_svm(volumes[tr], ytr, volumes[va], yva, n_classes=k, kernels=exp.svm_kernels,
                          c_values=c_grid(exp.svm_n_c))
    p_gcn = gcn_forward(gcn, [graphs[i] for i in tr])
    p_svm = svm_predict_proba(svm, volumes[tr])
    alpha, fused_bacc, _ = fit_alpha(p_gcn, p_svm, ytr, k)
    out = _mkdir(layout.train_classifiers())
    gcn.save(out / "gcn.gnn1")
    svm.save(out / "svm.json")
    _write_json(out / "fusion.json", {
        "task": exp.task,
        "classes": class_names(exp.task),
        "alpha": alpha,
        "fit_bacc": {
            "fused": fused_bacc,
            "gcn": metrics.present_class_bacc(ytr, metrics.argmax_predict(p_gcn), k),
            "svm": metrics.present_class_bacc(ytr, metrics.argmax_predict(p_svm), k),
        },
        "gcn_best_epoch": hist["best_epoch"],
        "svm_kernel": svm.kernel,
        "svm_C": svm.C,
    })
    log.info("classifiers written to %s (alpha %.2f)", out, alpha)
    return out


def cmd_evaluate(config: RunConfig):
    layout = config_layout(config)
    manifest = _manifest(layout)
    report = run_experiment(config.experiment.task, load_cohort(manifest), config.experiment,
                            workers=config.workers, log=log.info)
    out = _mkdir(layout.evaluate())
    report.save(out / "report.json")
    for model in ("fused", "gcn", "svm"):
        _write_text(out / f"confusion_{model}.csv", report.confusion_csv(model))
    rows = ["group,rank,structure_id,score"]
    for dx, loc in report.localization.items():
        rows += [f"{dx},{r + 1},{sid},{score:.9g}" for r, (sid, score) in enumerate(loc["top_n"])]
    _write_text(out / "top_structures.csv", "\n".join(rows) + "\n")
    d = report.to_dict()
    plot_repetition_bacc(d, out / "bacc_per_repetition.png")
    if report.group_maps:
        plot_group_maps(report.group_maps, out / "group_maps.png")
    for dx, loc in report.localization.items():
        plot_top_structures(loc["top_n"], out / f"top_{dx}.png", title=f"{dx} group")
    s = report.summary["fused"]
    log.info("fused test BACC %.3f ACC %.3f AUC %.3f -> %s", s["bacc"], s["acc"], s["auc"], out)
    return out / "report.json"


def cmd_report_topn(config: RunConfig, group, n, split="test"):
    if group not in DIAGNOSES:
        raise ValidationError(f"group must be one of {DIAGNOSES}")
    if split not in SPLITS + ("all",):
        raise ValidationError(f"split must be one of {SPLITS + ('all',)}")
    layout = config_layout(config)
    manifest = _manifest(layout)
    entries = [e for e in manifest if e.diagnosis == group and (split == "all" or e.split == split)]
    if not entries:
        raise ValidationError(f"no {group} subjects in split {split!r}")
    ensemble = _load_ensemble(layout)
    pairs = [manifest.load(e) for e in entries]
    maps = infer_grading_maps(ensemble, pairs)
    s = max(int(lab.labels.max()) for _, lab in pairs)
    if not 1 <= n <= s:
        raise ValidationError(f"n must lie in [1, {s}]")
    ranking = top_n_structures(maps, [lab for _, lab in pairs], n, s)
    out = _mkdir(layout.report_topn())
    stem = f"top{n}_{group}_{split}"
    _write_text(out / f"{stem}.csv",
                "rank,structure_id,score\n" + "".join(f"{r + 1},{sid},{v:.9g}\n" for r, (sid, v) in enumerate(ranking)))
    plot_top_structures(ranking, out / f"{stem}.png", title=f"{group} ({split}, n={len(entries)})")
    log.info("top-%d structures for %s written to %s", n, group, out)
    return out / f"{stem}.csv"


def config_layout(config):
    return Layout(config)


# --- entry point --------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ValidationError(message)


def build_parser():
    parser = _Parser(prog="deepgrade", description=__doc__.splitlines()[0])
    parser.add_argument("--config", help="JSON run configuration (missing keys take defaults)")
    parser.add_argument("--seed", type=int, help="override the experiment seed")
    parser.add_argument("--workers", type=int, help="worker processes for per-location training")
    parser.add_argument("--print-default-config", action="store_true", help="print the default configuration and exit")
    parser.add_argument("-v", "--verbose", action="store_true")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.add_parser("phantom", help="generate the synthetic cohort")
    sub.add_parser("train-grading", help="train one U-Net per patch location")
    grade = sub.add_parser("grade", help="grading map, structure scores and mid-slices for one subject")
    grade.add_argument("--subject", required=True)
    sub.add_parser("train-classifiers", help="fit the GCN, the SVM and the fusion weight")
    sub.add_parser("evaluate", help="repeated end-to-end experiment and report")
    topn = sub.add_parser("report-topn", help="rank structures by group-mean grading")
    topn.add_argument("--group", required=True, choices=DIAGNOSES)
    topn.add_argument("--n", type=int, default=10)
    topn.add_argument("--split", default="test")
    return parser


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(message)s", stream=sys.stderr)
        if args.print_default_config:
            print(json.dumps(RunConfig().to_dict(), indent=1, sort_keys=True))
            return 0
        if args.command is None:
            raise ValidationError("no command given; see --help")
        config = load_config(args.config, args.seed, args.workers)
        if args.command == "phantom":
            result = cmd_phantom(config)
        elif args.command == "train-grading":
            result = cmd_train_grading(config)
        elif args.command == "grade":
            result = cmd_grade(config, args.subject)
        elif args.command == "train-classifiers":
            result = cmd_train_classifiers(config)
        elif args.command == "evaluate":
            result = cmd_evaluate(config)
        else:
            result = cmd_report_topn(config, args.group, args.n, args.split)
        print(result)
        return 0
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (DeepGradeError, OSError) as exc:
        print(f"failed: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
