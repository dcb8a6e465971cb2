"""Per-subject feature extraction: structure volumes and grading graphs."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import DegenerateInputError, ValidationError
from ..volume import LabelMap3D

AGE_OFFSET = 40.0
AGE_SCALE = 60.0


def normalize_age(age):
    """Fixed affine age map onto [0, 1]: 40 years -> 0, 100 years -> 1."""
    return float(np.clip((float(age) - AGE_OFFSET) / AGE_SCALE, 0.0, 1.0))


@dataclass(frozen=True)
class StructureGraph:
    """Node features ``(s, 2)`` = [grading score, normalized age]; the topology is the complete graph."""

    node_features: np.ndarray

    def __post_init__(self):
        f = np.asarray(self.node_features, dtype=np.float64)
        if f.ndim != 2 or f.shape[1] != 2 or f.shape[0] < 2:
            raise ValidationError(f"graph needs (s >= 2, 2) node features, got {f.shape}")
        object.__setattr__(self, "node_features", f)

    @property
    def s(self):
        return self.node_features.shape[0]


def build_graph(grading) -> StructureGraph:
    """Graph for one :class:`StructureGradingVector`; age is replicated on every node."""
    scores = np.asarray(grading.scores, dtype=np.float64)
    age = np.full_like(scores, normalize_age(grading.age))
    return StructureGraph(np.stack([scores, age], axis=1))


def compute_volume_features(labels: LabelMap3D, s=None):
    """Structure volumes as percent of the cavity volume, for labels 1..s."""
    lab = np.asarray(labels.labels if isinstance(labels, LabelMap3D) else labels).ravel().astype(np.int64)
    s = int(lab.max()) if s is None else int(s)
    counts = np.bincount(lab, minlength=s + 1)
    icc = counts[1:].sum()
    if icc == 0:
        raise DegenerateInputError("label map has an empty cavity")
    return 100.0 * counts[1:s + 1] / icc
