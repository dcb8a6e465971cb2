from collections import Counter
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import dual_projected_gradient
from deepgrade.classify.features import (
    StructureGraph,
    build_graph,
    compute_volume_features,
    normalize_age,
)
from deepgrade.classify.gcn import GCNConfig, GCNModel, gcn_forward, oversample, train_gcn
from deepgrade.classify.svm import (
    SVMModel,
    Standardizer,
    balanced_class_weights,
    c_grid,
    dual_objective,
    fit_platt,
    grid_search_svm,
    kernel_matrix,
    platt_probability,
    smo_solve,
    svm_predict_proba,
    train_svm_binary,
)
from deepgrade.errors import ConvergenceError, DegenerateInputError, ShapeError, ValidationError
from deepgrade.grading import StructureGradingVector
from deepgrade.phantom import PhantomSpec, generate_subject
from deepgrade.volume import LabelMap3D


# --- features ---------------------------------------------------------------


def test_age_normalization():
    assert normalize_age(40) == 0.0
    assert normalize_age(100) == 1.0
    assert normalize_age(70) == 0.5
    assert normalize_age(20) == 0.0 and normalize_age(110) == 1.0


def test_graph_passes_scores_through():
    g = build_graph(StructureGradingVector(np.array([0.1, -0.4, 0.9]), age=85.0))
    np.testing.assert_array_equal(g.node_features[:, 0], [0.1, -0.4, 0.9])
    np.testing.assert_array_equal(g.node_features[:, 1], [0.75] * 3)
    assert g.s == 3
    with pytest.raises(ValidationError):
        StructureGraph(np.zeros((1, 2)))


def test_volume_feature_examples():
    np.testing.assert_array_equal(compute_volume_features(LabelMap3D(np.ones((2, 2, 2)))), [100.0])
    labels = np.zeros((100, 1, 1), dtype=int)
    labels[:30] = 1
    labels[30:] = 2
    np.testing.assert_allclose(compute_volume_features(LabelMap3D(labels)), [30.0, 70.0])
    with pytest.raises(DegenerateInputError):
        compute_volume_features(LabelMap3D(np.zeros((2, 2, 2))))


def test_phantom_volume_features_sum_to_100():
    spec = PhantomSpec(dims=(20, 24, 20), s=6)
    for dx in ("CN", "AD", "FTD"):
        feats = compute_volume_features(generate_subject(spec, dx, 1).labels, s=6)
        assert abs(feats.sum() - 100.0) < 1e-6


# --- GCN --------------------------------------------------------------------


def _random_graphs(rng, n, s=5):
    return [StructureGraph(np.column_stack([rng.uniform(-1, 1, s), np.full(s, rng.uniform())])) for _ in range(n)]


def test_zero_weights_give_uniform_probabilities():
    model = GCNModel(GCNConfig(), n_classes=3, seed=0)
    for t in model.params.values():
        t.data[...] = 0.0
    probs = gcn_forward(model, _random_graphs(np.random.default_rng(0), 4))
    np.testing.assert_allclose(probs, np.full((4, 3), 1 / 3))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31), st.integers(2, 12))
def test_gcn_permutation_invariance_and_simplex(seed, s):
    rng = np.random.default_rng(seed)
    model = GCNModel(GCNConfig(), n_classes=3, seed=seed % 1000)
    g = _random_graphs(rng, 1, s)[0]
    perm = rng.permutation(s)
    p1 = gcn_forward(model, g)
    p2 = gcn_forward(model, StructureGraph(g.node_features[perm]))
    assert np.max(np.abs(p1 - p2)) < 1e-6
    assert abs(p1.sum() - 1.0) < 1e-6 and np.all(p1 >= 0)


def test_gcn_rejects_mixed_node_counts():
    model = GCNModel(GCNConfig(), n_classes=2)
    rng = np.random.default_rng(0)
    with pytest.raises(ShapeError):
        gcn_forward(model, _random_graphs(rng, 1, 4) + _random_graphs(rng, 1, 5))


def test_oversample_counts():
    balanced = [(i, "A") for i in range(5)] + [(i, "B") for i in range(5)]
    assert oversample(balanced, 0) == balanced
    out = oversample([(i, "A") for i in range(4)] + [(10 + i, "B") for i in range(2)], 1)
    assert Counter(lab for _, lab in out) == {"A": 4, "B": 4}
    records = [(0, "A"), (1, "A"), (2, "A"), (3, "B"), (4, "C"), (5, "C")]
    out = oversample(records, 2)
    assert Counter(lab for _, lab in out) == {"A": 3, "B": 3, "C": 3}
    assert out[: len(records)] == records
    for item in out[len(records):]:
        assert item in records


def _separable_records(rng, n, s=6):
    recs = []
    for i in range(n):
        label = i % 2
        scores = rng.uniform(0.3, 0.9, s) * (1 if label else -1)
        recs.append((StructureGraph(np.column_stack([scores, np.full(s, 0.5)])), label))
    return recs


def test_gcn_learns_separable_data():
    rng = np.random.default_rng(0)
    train, val = _separable_records(rng, 20), _separable_records(rng, 8)
    model, history = train_gcn(train, val, GCNConfig(epochs=80, lr=5e-3), seed=0)
    preds = gcn_forward(model, [g for g, _ in train]).argmax(axis=1)
    assert np.all(preds == [lab for _, lab in train])
    best = history["best_epoch"]
    assert history["val_bacc"][best] >= history["val_bacc"][-1]


def test_gcn_training_is_deterministic(tmp_path):
    rng = np.random.default_rng(1)
    train, val = _separable_records(rng, 10), _separable_records(rng, 4)
    cfg = GCNConfig(epochs=10)
    a, ha = train_gcn(train, val, cfg, seed=3)
    b, hb = train_gcn(train, val, cfg, seed=3)
    a.save(tmp_path / "a.gnn1")
    b.save(tmp_path / "b.gnn1")
    assert (tmp_path / "a.gnn1").read_bytes() == (tmp_path / "b.gnn1").read_bytes()
    assert ha == hb
    back = GCNModel.load(tmp_path / "a.gnn1")
    graphs = [g for g, _ in val]
    np.testing.assert_array_equal(gcn_forward(back, graphs), gcn_forward(a, graphs))


def test_gcn_training_validation():
    rng = np.random.default_rng(0)
    recs = _separable_records(rng, 4)
    with pytest.raises(ValidationError):
        train_gcn([r for r in recs if r[1] == 0], recs, GCNConfig(epochs=1))
    with pytest.raises(ValidationError):
        train_gcn(recs, [], GCNConfig(epochs=1))


# --- SVM --------------------------------------------------------------------


def test_two_point_separable():
    x = np.array([[0.0], [1.0]])
    m = train_svm_binary(x, [-1, 1], kernel="linear", C=1e3)
    f = m.decision(x)
    assert f[0] < 0 < f[1]


def _toy_problem(rng, n=6):
    x = rng.standard_normal((n, 2))
    y = np.where(np.arange(n) % 2 == 0, 1.0, -1.0)
    return x, y


def test_dual_objective_matches_projected_gradient_oracle():
    rng = np.random.default_rng(0)
    x, y = _toy_problem(rng)
    for kind in ("linear", "poly", "gaussian"):
        kmat = kernel_matrix(kind, x, x, 0.5)
        box = np.where(y > 0, 2.5, 0.625)
        res = smo_solve(kmat, y, box)
        _, oracle = dual_projected_gradient(kmat, y, box)
        q = np.outer(y, y) * kmat
        assert abs(dual_objective(res.alpha, q) - oracle) < 1e-6


def test_dual_history_monotone_and_feasible():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((30, 3))
    y = np.where(x[:, 0] + 0.5 * rng.standard_normal(30) > 0, 1.0, -1.0)
    box = np.where(y > 0, 3.0, 1.0)
    res = smo_solve(kernel_matrix("gaussian", x, x, 0.3), y, box)
    h = np.array(res.dual_history)
    assert np.all(np.diff(h) >= -1e-12)
    assert np.all(res.alpha >= 0) and np.all(res.alpha <= box + 1e-12)
    assert abs(res.alpha @ y) < 1e-9
    assert res.kkt_gap <= 1e-3


def test_separable_training_error_zero():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((40, 2))
    y = np.where(x[:, 0] - x[:, 1] > 0, 1, -1)
    x += 0.3 * y[:, None] * np.array([1, -1])
    m = train_svm_binary(x, y, kernel="linear", C=1e3)
    assert np.all(np.sign(m.decision(x)) == y)


def test_convergence_error_reports_residual():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((40, 2))
    y = np.where(rng.random(40) < 0.5, 1, -1)
    with pytest.raises(ConvergenceError) as info:
        train_svm_binary(x, y, kernel="gaussian", C=1e4, max_iter=5)
    assert info.value.residual > 0


def test_binary_input_validation():
    with pytest.raises(ValidationError):
        train_svm_binary(np.zeros((2, 1)), [0, 1])
    with pytest.raises(ValidationError):
        train_svm_binary(np.zeros((2, 1)), [-1, 1], C=0)
    with pytest.raises(ValidationError):
        kernel_matrix("sigmoid", np.zeros((1, 1)), np.zeros((1, 1)), 1.0)


def test_balanced_weight_example():
    w = balanced_class_weights([1] * 10 + [-1] * 40)
    assert w[1] == Fraction(5, 2) and w[-1] == Fraction(5, 8)
    assert float(w[1]) == 2.5 and float(w[-1]) == 0.625


def test_c_grid_formula():
    grid = c_grid()
    assert len(grid) == 500
    assert grid[0] == 1e-5 and grid[-1] == 1e5
    i = np.arange(500)
    np.testing.assert_allclose(grid, 10.0 ** (-5 + 10 * i / 499), rtol=1e-12)
    assert np.all(np.diff(np.log10(grid)) > 0)


def test_standardizer_uses_training_statistics_only():
    train = np.array([[1.0, 5.0], [3.0, 5.0]])
    std = Standardizer.fit(train)
    np.testing.assert_array_equal(std.transform(train), [[-1.0, 0.0], [1.0, 0.0]])
    np.testing.assert_array_equal(std.transform(np.array([[5.0, 7.0]])), [[3.0, 2.0]])


def _blobs(rng, n_per, k, d=4, sep=4.0):
    centers = sep * np.eye(k, d)
    x = np.concatenate([centers[c] + rng.standard_normal((n_per, d)) * 0.5 for c in range(k)])
    y = np.repeat(np.arange(k), n_per)
    return x, y


@pytest.mark.parametrize("k", [2, 3])
def test_grid_search_on_separable_data(k):
    rng = np.random.default_rng(k)
    tx, ty = _blobs(rng, 10, k)
    vx, vy = _blobs(rng, 5, k)
    model = grid_search_svm(tx, ty, vx, vy, c_values=c_grid(20))
    assert model.val_bacc == 1.0
    probs = svm_predict_proba(model, vx)
    assert np.all(np.abs(probs.sum(axis=1) - 1.0) < 1e-9)
    assert np.all(probs.argmax(axis=1) == vy)


def test_grid_search_prefers_smallest_c_on_ties():
    rng = np.random.default_rng(5)
    tx, ty = _blobs(rng, 10, 2, sep=8.0)
    vx, vy = _blobs(rng, 5, 2, sep=8.0)
    model = grid_search_svm(tx, ty, vx, vy, kernels=("linear",), c_values=c_grid(20))
    assert model.C == c_grid(20)[0]


def test_platt_symmetry_and_monotonicity():
    d = 1.3
    a, b = -2.0, 0.0
    p_pos = platt_probability(d, a, b)
    p_neg = platt_probability(-d, a, b)
    assert abs(p_pos + p_neg - 1.0) < 1e-12
    assert platt_probability(2.0, a, 0.3) > platt_probability(1.0, a, 0.3)


def test_two_class_probabilities_are_mirrored():
    rng = np.random.default_rng(6)
    tx, ty = _blobs(rng, 10, 2, sep=2.0)
    vx, vy = _blobs(rng, 8, 2, sep=2.0)
    model = grid_search_svm(tx, ty, vx, vy, c_values=c_grid(10))
    model.machines[0].platt_b = 0.0
    f = model.decision_values(vx)
    np.testing.assert_allclose(f[:, 0], -f[:, 1])
    probs = svm_predict_proba(model, vx)
    a = model.machines[0].platt_a
    np.testing.assert_allclose(probs[:, 1], platt_probability(f[:, 1], a, 0.0), atol=1e-12)


def test_fit_platt_orders_probabilities():
    f = np.array([-2.0, -1.0, -0.5, 0.3, 1.0, 2.5])
    a, b = fit_platt(f, f > 0)
    assert a < 0
    p = platt_probability(f, a, b)
    assert np.all(np.diff(p) > 0)


def test_svm_json_round_trip(tmp_path):
    rng = np.random.default_rng(7)
    tx, ty = _blobs(rng, 8, 3)
    vx, vy = _blobs(rng, 4, 3)
    model = grid_search_svm(tx, ty, vx, vy, c_values=c_grid(8))
    model.save(tmp_path / "svm.json")
    back = SVMModel.load(tmp_path / "svm.json")
    np.testing.assert_array_equal(svm_predict_proba(back, vx), svm_predict_proba(model, vx))
    back.save(tmp_path / "again.json")
    assert (tmp_path / "again.json").read_bytes() == (tmp_path / "svm.json").read_bytes()
    with pytest.raises(ValidationError):
        SVMModel.from_dict({"kernel": "linear"})


def test_grid_search_validation():
    x = np.zeros((4, 2))
    with pytest.raises(ValidationError):
        grid_search_svm(x, [0, 0, 0, 0], x, [0, 1, 0, 1])
    with pytest.raises(ValidationError):
        grid_search_svm(x, [0, 0, 2, 2], x, [0, 1, 2, 1], n_classes=3)
