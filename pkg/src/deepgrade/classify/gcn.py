"""Graph convolutional classifier over complete structure graphs.

Each layer updates node features as ``ReLU(H W_self + mean(H) W_neigh + b)``:
on a complete graph the neighbourhood average is the same for every node, so
a separate self transform is what keeps nodes distinguishable.  Node features
are mean-pooled and a dense softmax head gives class probabilities.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .. import metrics
from ..errors import ShapeError, ValidationError
from ..neural import tensor as T
from ..neural.checkpoint import load_arrays, save_arrays
from ..neural.optim import Adam
from ..neural.unet import he_uniform
from .features import StructureGraph


@dataclass(frozen=True)
class GCNConfig:
    layers: int = 3
    width: int = 32
    in_features: int = 2
    epochs: int = 300
    lr: float = 1e-3

    def __post_init__(self):
        if self.layers < 1 or self.width < 1 or self.in_features < 1 or self.epochs < 1 or self.lr <= 0:
            raise ValidationError(f"invalid GCN config {self}")

    def to_dict(self):
        return asdict(self)


class GCNModel:
    def __init__(self, config: GCNConfig, n_classes, seed=0, params=None):
        if n_classes < 2:
            raise ValidationError("a classifier needs at least two classes")
        self.config = config
        self.n_classes = int(n_classes)
        shapes = self._shapes()
        if params is not None:
            missing = set(shapes) - set(params)
            if missing:
                raise ValidationError(f"checkpoint lacks parameters {sorted(missing)}")
            for name, shape in shapes.items():
                if tuple(np.shape(params[name])) != shape:
                    raise ShapeError(f"parameter {name} has shape {np.shape(params[name])}, expected {shape}")
            self.params = {k: T.Tensor(np.array(params[k], dtype=np.float32), requires_grad=True) for k in shapes}
            return
        rng = np.random.default_rng(seed)
        self.params = {}
        for name, shape in shapes.items():
            if name.endswith(".b"):
                value = np.zeros(shape, dtype=np.float32)
            else:
                value = he_uniform(rng, shape, shape[0])
            self.params[name] = T.Tensor(value, requires_grad=True)

    def _shapes(self):
        cfg = self.config
        shapes, fin = {}, cfg.in_features
        for i in range(cfg.layers):
            shapes[f"gc{i}.self"] = (fin, cfg.width)
            shapes[f"gc{i}.neigh"] = (fin, cfg.width)
            shapes[f"gc{i}.b"] = (cfg.width,)
            fin = cfg.width
        shapes["head.w"] = (fin, self.n_classes)
        shapes["head.b"] = (self.n_classes,)
        return shapes

    def arrays(self):
        return {k: t.data for k, t in self.params.items()}

    def copy_arrays(self):
        return {k: t.data.copy() for k, t in self.params.items()}

    def logits(self, features):
        """``features``: (batch, s, in_features) -> logits Tensor (batch, n_classes)."""
        h = T.as_tensor(features)
        if h.data.ndim != 3 or h.shape[2] != self.config.in_features:
            raise ShapeError(f"GCN input must be (batch, s, {self.config.in_features}), got {h.shape}")
        p = self.params
        for i in range(self.config.layers):
            local = T.dense(h, p[f"gc{i}.self"])
            pooled = T.dense(T.mean_axis(h, axis=1, keepdims=True), p[f"gc{i}.neigh"], p[f"gc{i}.b"])
            h = T.relu(T.add(local, pooled))
        return T.dense(T.mean_axis(h, axis=1), p["head.w"], p["head.b"])

    def save(self, path):
        save_arrays(self.arrays(), path)

    @classmethod
    def load(cls, path, config: GCNConfig = None):
        """Restore from GNN1; layer count and widths are read off the parameter shapes."""
        arrays = load_arrays(path)
        if "gc0.self" not in arrays or "head.w" not in arrays:
            raise ValidationError(f"{path} is not a GCN checkpoint")
        layers = sum(1 for name in arrays if name.endswith(".self"))
        fin, width = arrays["gc0.self"].shape
        base = config or GCNConfig()
        config = GCNConfig(layers=layers, width=width, in_features=fin, epochs=base.epochs, lr=base.lr)
        return cls(config, arrays["head.w"].shape[1], params=arrays)


def _stack(graphs):
    feats = [g.node_features if isinstance(g, StructureGraph) else np.asarray(g, dtype=np.float64) for g in graphs]
    if len({f.shape for f in feats}) > 1:
        raise ShapeError("all graphs in a batch must share the node count")
    return np.stack(feats).astype(np.float32)


def gcn_forward(model: GCNModel, graphs):
    """Class probabilities for one graph (1-D result) or a sequence of graphs (2-D result)."""
    single = isinstance(graphs, StructureGraph)
    x = _stack([graphs] if single else list(graphs))
    probs = T.softmax_rows(model.logits(x)).data.astype(np.float64)
    probs /= probs.sum(axis=1, keepdims=True)
    return probs[0] if single else probs


def oversample(records, seed):
    """Duplicate minority-class records at random until every class matches the majority.

    ``records`` are ``(item, label)`` pairs.  Originals come first, in input
    order, followed by the duplicates of each class in sorted label order.
    """
    records = list(records)
    if not records:
        raise ValidationError("nothing to oversample")
    labels = [r[1] for r in records]
    classes = sorted(set(labels))
    members = {c: [i for i, lab in enumerate(labels) if lab == c] for c in classes}
    target = max(len(v) for v in members.values())
    rng = np.random.default_rng(seed)
    out = list(records)
    for c in classes:
        need = target - len(members[c])
        if need:
            picks = rng.choice(members[c], size=need, replace=True)
            out.extend(records[i] for i in picks)
    return out


def train_gcn(train_records, val_records, config: GCNConfig = GCNConfig(), seed=0, n_classes=None):
    """Full-batch Adam on oversampled training graphs; keeps the epoch with the best validation BACC.

    Records are ``(StructureGraph, class_index)`` pairs.  Ties in validation
    BACC go to the lower validation loss, then to the earlier epoch.  Returns
    ``(model, history)`` where history holds per-epoch train loss, val loss
    and val BACC.
    """
    train_records, val_records = list(train_records), list(val_records)
    if not train_records or not val_records:
        raise ValidationError("GCN training needs non-empty train and validation sets")
    train_labels = {r[1] for r in train_records}
    if len(train_labels) < 2:
        raise ValidationError("GCN training needs at least two classes")
    k = int(n_classes) if n_classes is not None else max(train_labels | {r[1] for r in val_records}) + 1
    init_seed, sample_seed = np.random.SeedSequence(seed).spawn(2)
    model = GCNModel(config, k, seed=np.random.default_rng(init_seed))
    balanced = oversample(train_records, np.random.default_rng(sample_seed))
    x = _stack([g for g, _ in balanced])
    y = np.array([lab for _, lab in balanced])
    xv = _stack([g for g, _ in val_records])
    yv = np.array([lab for _, lab in val_records])

    opt = Adam(model.params, lr=config.lr)
    history = {"train_loss": [], "val_loss": [], "val_bacc": []}
    best_key, best_arrays = None, None
    for epoch in range(config.epochs):
        opt.zero_grad()
        loss = T.cross_entropy_loss(model.logits(x), y)
        loss.backward()
        opt.step()
        val_logits = model.logits(xv)
        val_loss = float(T.cross_entropy_loss(val_logits, yv).data)
        val_bacc = metrics.present_class_bacc(yv, metrics.argmax_predict(val_logits.data), k)
        history["train_loss"].append(float(loss.data))
        history["val_loss"].append(val_loss)
        history["val_bacc"].append(val_bacc)
        key = (-val_bacc, val_loss, epoch)
        if best_key is None or key < best_key:
            best_key, best_arrays = key, model.copy_arrays()
    history["best_epoch"] = best_key[2]
    return GCNModel(config, k, params=best_arrays), history
