"""Class-balanced kernel SVM on structure volumes, solved by SMO, with Platt-calibrated outputs.

The binary solver works on the dual

    max  sum(a) - 1/2 a^T Q a,   Q_ij = y_i y_j K(x_i, x_j),
    s.t. 0 <= a_i <= C_i,  y^T a = 0,

choosing the working pair by maximal violation for ``i`` and second-order
gain for ``j``.  Training stops once the maximal KKT violation drops to
``tol``.  Multi-class models are one-vs-rest; two-class models use a single
machine whose decision value is negated for class 0.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy.special import expit

from .. import metrics
from ..errors import ConvergenceError, IoError, ShapeError, ValidationError

KERNELS = ("linear", "poly", "gaussian")
POLY_DEGREE = 3
TAU = 1e-12


@dataclass(frozen=True)
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, x):
        x = np.asarray(x, dtype=np.float64)
        std = x.std(axis=0)
        return cls(x.mean(axis=0), np.where(std > 0, std, 1.0))

    def transform(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.mean.size:
            raise ShapeError(f"expected (n, {self.mean.size}) features, got {x.shape}")
        return (x - self.mean) / self.std


def default_gamma(x):
    """``1 / (n_features * var(x))`` over all entries; falls back to ``1 / n_features``."""
    x = np.asarray(x, dtype=np.float64)
    var = x.var()
    return 1.0 / (x.shape[1] * (var if var > 0 else 1.0))


def kernel_matrix(kind, a, b, gamma):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if kind == "linear":
        return a @ b.T
    if kind == "poly":
        return (gamma * (a @ b.T) + 1.0) ** POLY_DEGREE
    if kind == "gaussian":
        d2 = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * (a @ b.T)
        return np.exp(-gamma * np.maximum(d2, 0.0))
    raise ValidationError(f"unknown kernel {kind!r}; expected one of {KERNELS}")


def balanced_class_weights(labels):
    """Exact ``N / (K * N_c)`` for every class present in ``labels``."""
    labels = list(labels)
    if not labels:
        raise ValidationError("cannot weight an empty label set")
    classes, counts = np.unique(np.asarray(labels), return_counts=True)
    n, k = len(labels), len(classes)
    return {c.item(): Fraction(n, k * int(cnt)) for c, cnt in zip(classes, counts)}


def c_grid(n=500, low_exp=-5.0, high_exp=5.0):
    """``n`` log-uniform values; point i is ``10**(low + (high - low) * i / (n - 1))``."""
    if n < 2:
        raise ValidationError("the C grid needs at least two points")
    exps = low_exp + (high_exp - low_exp) * np.arange(n) / (n - 1)
    grid = 10.0 ** exps
    grid[0], grid[-1] = 10.0 ** low_exp, 10.0 ** high_exp
    return grid


@dataclass
class SMOResult:
    alpha: np.ndarray
    bias: float
    dual_history: list
    iterations: int
    kkt_gap: float


def dual_objective(alpha, q):
    return float(alpha.sum() - 0.5 * alpha @ q @ alpha)


def smo_solve(kmat, y, box, tol=1e-3, max_iter=200_000):
    """Solve the SVM dual for a precomputed kernel matrix.

    Parameters
    ----------
    kmat : (n, n) kernel matrix.
    y : labels in {-1, +1}.
    box : per-sample upper bounds ``C_i``.

    Returns
    -------
    SMOResult with the bias ``b`` of ``f(x) = sum_i a_i y_i K(x_i, x) + b``.
    """
    y = np.asarray(y, dtype=np.float64)
    box = np.asarray(box, dtype=np.float64)
    n = y.size
    if kmat.shape != (n, n) or box.shape != (n,):
        raise ShapeError("kernel matrix, labels and bounds disagree in size")
    if not (np.any(y > 0) and np.any(y < 0)):
        raise ValidationError("SVM training needs both labels")
    if np.any(box <= 0):
        raise ValidationError("box bounds must be positive")
    q = (y[:, None] * y[None, :]) * kmat
    qd = np.diag(q).copy()
    alpha = np.zeros(n)
    grad = -np.ones(n)  # gradient of 1/2 a^T Q a - sum(a)
    pos = y > 0
    history = [0.0]
    gap = np.inf
    for it in range(max_iter):
        below, above = alpha < box, alpha > 0
        up = (below & pos) | (above & ~pos)
        low = (below & ~pos) | (above & pos)
        score = -y * grad
        if not up.any() or not low.any():
            gap = 0.0
            break
        i = int(np.argmax(np.where(up, score, -np.inf)))
        gmax = score[i]
        gap = gmax - np.where(low, score, np.inf).min()
        if gap <= tol:
            break
        cand = low & (score < gmax)
        b_it = gmax - score
        a_it = qd[i] + qd - (2.0 * y[i]) * y * q[i]
        a_it[a_it <= 0] = TAU
        j = int(np.argmin(np.where(cand, -(b_it * b_it) / a_it, np.inf)))

        old_i, old_j = alpha[i], alpha[j]
        ci, cj = box[i], box[j]
        if y[i] != y[j]:
            quad = max(qd[i] + qd[j] + 2.0 * q[i, j], TAU)
            delta = (-grad[i] - grad[j]) / quad
            diff = old_i - old_j
            ai, aj = old_i + delta, old_j + delta
            if diff > 0:
                if aj < 0:
                    aj, ai = 0.0, diff
            elif ai < 0:
                ai, aj = 0.0, -diff
            if diff > ci - cj:
                if ai > ci:
                    ai, aj = ci, ci - diff
            elif aj > cj:
                aj, ai = cj, cj + diff
        else:
            quad = max(qd[i] + qd[j] - 2.0 * q[i, j], TAU)
            delta = (grad[i] - grad[j]) / quad
            total = old_i + old_j
            ai, aj = old_i - delta, old_j + delta
            if total > ci:
                if ai > ci:
                    ai, aj = ci, total - ci
            elif aj < 0:
                aj, ai = 0.0, total
            if total > cj:
                if aj > cj:
                    aj, ai = cj, total - cj
            elif ai < 0:
                ai, aj = 0.0, total
        alpha[i], alpha[j] = ai, aj
        grad += q[:, i] * (ai - old_i) + q[:, j] * (aj - old_j)
        history.append(float(0.5 * alpha.sum() - 0.5 * alpha @ grad))
    else:
        raise ConvergenceError(f"SMO did not converge in {max_iter} iterations", gap)

    free = (alpha > 0) & (alpha < box)
    yg = y * grad
    if free.any():
        rho = float(yg[free].mean())
    else:
        below, above = alpha < box, alpha > 0
        ub_set = (above & ~pos) | (below & pos)
        lb_set = (above & pos) | (below & ~pos)
        ub = yg[ub_set].min() if ub_set.any() else np.inf
        lb = yg[lb_set].max() if lb_set.any() else -np.inf
        rho = float((ub + lb) / 2.0) if np.isfinite(ub) and np.isfinite(lb) else 0.0
    return SMOResult(alpha, -rho, history, len(history) - 1, float(gap))


@dataclass
class BinaryMachine:
    """A trained binary SVM: support vectors, ``a_i * y_i`` coefficients and bias."""

    support_vectors: np.ndarray
    dual_coef: np.ndarray
    bias: float
    kernel: str
    gamma: float
    platt_a: float = -1.0
    platt_b: float = 0.0
    dual_history: list = field(default_factory=list, repr=False)
    kkt_gap: float = 0.0

    def decision(self, x):
        if len(self.dual_coef) == 0:
            return np.full(len(x), self.bias)
        return kernel_matrix(self.kernel, x, self.support_vectors, self.gamma) @ self.dual_coef + self.bias

    def to_dict(self):
        return {
            "support_vectors": self.support_vectors.tolist(),
            "dual_coef": self.dual_coef.tolist(),
            "bias": self.bias,
            "platt_a": self.platt_a,
            "platt_b": self.platt_b,
        }


def _machine_from(result, x, y, kernel, gamma):
    sv = result.alpha > 0
    return BinaryMachine(x[sv].copy(), (result.alpha * y)[sv], result.bias, kernel, gamma,
                         dual_history=result.dual_history, kkt_gap=result.kkt_gap)


def train_svm_binary(features, labels, kernel="linear", C=1.0, class_weights=None, gamma=None,
                     tol=1e-3, max_iter=200_000, kmat=None):
    """Binary SVM with per-sample bounds ``C * class_weights[label]``.

    ``labels`` are in {-1, +1}; ``class_weights`` maps each label to a weight
    (default 1).  ``kmat`` may pass a precomputed training kernel.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] != y.size:
        raise ShapeError(f"features {x.shape} and {y.size} labels disagree")
    if not np.all(np.isin(y, (-1.0, 1.0))):
        raise ValidationError("binary labels must be -1 or +1")
    if C <= 0:
        raise ValidationError("C must be positive")
    gamma = default_gamma(x) if gamma is None else float(gamma)
    weights = class_weights or {}
    box = C * np.array([float(weights.get(int(v), 1.0)) for v in y])
    kmat = kernel_matrix(kernel, x, x, gamma) if kmat is None else kmat
    result = smo_solve(kmat, y, box, tol=tol, max_iter=max_iter)
    return _machine_from(result, x, y, kernel, gamma)


def fit_platt(decision_values, positive, max_iter=100, min_step=1e-10, sigma=1e-12, eps=1e-5):
    """Platt sigmoid ``1 / (1 + exp(A f + B))`` by Newton's method with backtracking.

    Uses regularized targets ``(N+ + 1) / (N+ + 2)`` and ``1 / (N- + 2)``.
    """
    f = np.asarray(decision_values, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    n_pos, n_neg = int(positive.sum()), int((~positive).sum())
    t = np.where(positive, (n_pos + 1.0) / (n_pos + 2.0), 1.0 / (n_neg + 2.0))
    a, b = 0.0, float(np.log((n_neg + 1.0) / (n_pos + 1.0)))

    def objective(a_, b_):
        z = f * a_ + b_
        return float(np.sum(t * z + np.logaddexp(0.0, -z)))

    fval = objective(a, b)
    for _ in range(max_iter):
        p = expit(-(f * a + b))
        d2 = p * (1.0 - p)
        h11 = sigma + np.sum(f * f * d2)
        h22 = sigma + np.sum(d2)
        h21 = np.sum(f * d2)
        d1 = t - p
        g1, g2 = np.sum(f * d1), np.sum(d1)
        if abs(g1) < eps and abs(g2) < eps:
            break
        det = h11 * h22 - h21 * h21
        da = -(h22 * g1 - h21 * g2) / det
        db = -(-h21 * g1 + h11 * g2) / det
        gd = g1 * da + g2 * db
        step = 1.0
        while step >= min_step:
            new = objective(a + step * da, b + step * db)
            if new < fval + 1e-4 * step * gd:
                a, b, fval = a + step * da, b + step * db, new
                break
            step /= 2.0
        else:
            break
    return float(a), float(b)


def platt_probability(decision_values, a, b):
    return expit(-(np.asarray(decision_values, dtype=np.float64) * a + b))


@dataclass
class SVMModel:
    """Standardization, kernel choice and one machine per class (a single one for two classes)."""

    kernel: str
    C: float
    gamma: float
    n_classes: int
    standardizer: Standardizer
    machines: list
    val_bacc: float = float("nan")
    failed_cells: list = field(default_factory=list)

    def decision_values(self, features):
        """(n, n_classes) one-vs-rest decision values on raw features."""
        x = self.standardizer.transform(features)
        if self.n_classes == 2:
            f = self.machines[0].decision(x)
            return np.stack([-f, f], axis=1)
        return np.stack([m.decision(x) for m in self.machines], axis=1)

    def platt_params(self):
        if self.n_classes == 2:
            m = self.machines[0]
            # class 0 sees the negated decision value; the mirrored Platt fit is (A, -B)
            return [(m.platt_a, -m.platt_b), (m.platt_a, m.platt_b)]
        return [(m.platt_a, m.platt_b) for m in self.machines]

    def to_dict(self):
        return {
            "kernel": self.kernel,
            "C": self.C,
            "gamma": self.gamma,
            "poly_degree": POLY_DEGREE,
            "n_classes": self.n_classes,
            "standardize_mean": self.standardizer.mean.tolist(),
            "standardize_std": self.standardizer.std.tolist(),
            "machines": [m.to_dict() for m in self.machines],
            "val_bacc": self.val_bacc,
            "failed_cells": [list(c) for c in self.failed_cells],
        }

    @classmethod
    def from_dict(cls, d):
        try:
            std = Standardizer(np.array(d["standardize_mean"], dtype=np.float64),
                               np.array(d["standardize_std"], dtype=np.float64))
            machines = [
                BinaryMachine(np.array(m["support_vectors"], dtype=np.float64).reshape(-1, std.mean.size),
                              np.array(m["dual_coef"], dtype=np.float64), float(m["bias"]),
                              d["kernel"], float(d["gamma"]), float(m["platt_a"]), float(m["platt_b"]))
                for m in d["machines"]
            ]
            return cls(d["kernel"], float(d["C"]), float(d["gamma"]), int(d["n_classes"]), std, machines,
                       float(d.get("val_bacc", float("nan"))),
                       [tuple(c) for c in d.get("failed_cells", [])])
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"malformed SVM model: {exc}") from exc

    def save(self, path):
        try:
            Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")
        except OSError as exc:
            raise IoError(f"cannot write {path}: {exc}") from exc

    @classmethod
    def load(cls, path):
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except OSError as exc:
            raise IoError(f"cannot read {path}: {exc}") from exc


def svm_predict_proba(model: SVMModel, features):
    """Per-class Platt probabilities, renormalized onto the simplex."""
    f = model.decision_values(features)
    probs = np.stack([platt_probability(f[:, c], a, b) for c, (a, b) in enumerate(model.platt_params())], axis=1)
    return probs / probs.sum(axis=1, keepdims=True)


def _fit_machines(kmat, x, y, n_classes, kernel, C, gamma, weights, tol, max_iter):
    targets = [1] if n_classes == 2 else range(n_classes)
    machines = []
    for c in targets:
        yb = np.where(y == c, 1.0, -1.0)
        box = C * np.array([float(weights[int(v)]) for v in y])
        result = smo_solve(kmat, yb, box, tol=tol, max_iter=max_iter)
        machines.append(_machine_from(result, x, yb, kernel, gamma))
    return machines


def grid_search_svm(train_x, train_y, val_x, val_y, n_classes=None, kernels=KERNELS, c_values=None,
                    tol=1e-3, max_iter=200_000):
    """Pick (kernel, C) by validation BACC of argmax decision values, then Platt-calibrate on validation.

    Ties go to the smaller C, then to the earlier kernel in ``kernels``.  Grid
    cells whose solver hits the iteration cap are recorded in
    ``failed_cells`` as ``(kernel, C, residual)`` and skipped.
    """
    train_y = np.asarray(train_y, dtype=np.int64)
    val_y = np.asarray(val_y, dtype=np.int64)
    if len(train_y) == 0 or len(val_y) == 0:
        raise ValidationError("SVM grid search needs non-empty train and validation sets")
    k = int(n_classes) if n_classes is not None else int(max(train_y.max(), val_y.max())) + 1
    if len(np.unique(train_y)) < 2:
        raise ValidationError("SVM training needs at least two classes")
    if np.any(np.bincount(train_y, minlength=k) == 0):
        raise ValidationError("every class must appear in the training set")
    c_values = c_grid() if c_values is None else np.asarray(c_values, dtype=np.float64)
    std = Standardizer.fit(train_x)
    x = std.transform(train_x)
    gamma = default_gamma(x)
    weights = balanced_class_weights(train_y.tolist())
    kmats = {kind: kernel_matrix(kind, x, x, gamma) for kind in kernels}

    best, failed = None, []
    for C in sorted(c_values):
        for order, kind in enumerate(kernels):
            try:
                machines = _fit_machines(kmats[kind], x, train_y, k, kind, C, gamma, weights, tol, max_iter)
            except ConvergenceError as exc:
                failed.append((kind, float(C), float(exc.residual)))
                continue
            model = SVMModel(kind, float(C), gamma, k, std, machines)
            score = metrics.present_class_bacc(val_y, metrics.argmax_predict(model.decision_values(val_x)), k)
            if best is None or score > best[0]:
                best = (score, model)
    if best is None:
        raise ConvergenceError("every SVM grid cell failed to converge", min(c[2] for c in failed))
    score, model = best
    model.val_bacc, model.failed_cells = score, failed
    fv = model.decision_values(val_x)
    if k == 2:
        m = model.machines[0]
        m.platt_a, m.platt_b = fit_platt(fv[:, 1], val_y == 1)
    else:
        for c, m in enumerate(model.machines):
            m.platt_a, m.platt_b = fit_platt(fv[:, c], val_y == c)
    return model
