import math

import numpy as np
import pytest

from helpers import GRADIENT_CASES, conv3d_direct, worst_gradient_error
from deepgrade.errors import DegenerateInputError, FormatError, ShapeError, ValidationError
from deepgrade.grading import downsampled_inputs, make_target
from deepgrade.neural import tensor as T
from deepgrade.neural.checkpoint import decode_arrays, encode_arrays, load_arrays, save_arrays
from deepgrade.neural.optim import Adam, OptimizerState, adam_step
from deepgrade.neural.unet import UNet, UNetConfig
from deepgrade.phantom import PhantomSpec, generate_subject


def test_identity_kernel_conv():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 4, 3, 5, 1))
    w = np.zeros((3, 3, 3, 1, 1))
    w[1, 1, 1, 0, 0] = 1.0
    out = T.conv3d(T.Tensor(x), T.Tensor(w), T.Tensor(np.zeros(1)))
    np.testing.assert_array_equal(out.data, x)


def test_conv_matches_direct_oracle():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((1, 4, 4, 4, 1)).astype(np.float32)
    w = rng.standard_normal((3, 3, 3, 1, 2)).astype(np.float32)
    b = rng.standard_normal(2).astype(np.float32)
    out = T.conv3d(T.Tensor(x), T.Tensor(w), T.Tensor(b)).data
    np.testing.assert_allclose(out, conv3d_direct(x, w, b), atol=1e-5)


def test_conv_rejects_even_kernel_and_channel_mismatch():
    with pytest.raises(ShapeError):
        T.conv3d(T.Tensor(np.zeros((1, 3, 3, 3, 1))), T.Tensor(np.zeros((2, 3, 3, 1, 1))))
    with pytest.raises(ShapeError):
        T.conv3d(T.Tensor(np.zeros((1, 3, 3, 3, 2))), T.Tensor(np.zeros((3, 3, 3, 1, 1))))


def test_softmax_uniform():
    out = T.softmax_rows(T.Tensor(np.zeros((1, 3)))).data
    np.testing.assert_allclose(out, [[1 / 3] * 3])


def test_mse_examples():
    pred = T.Tensor(np.array([1.0, -1.0]))
    assert float(T.masked_mse_loss(pred, [-1.0, -1.0], [1.0, 1.0]).data) == 2.0
    assert float(T.masked_mse_loss(pred, [1.0, -1.0], [1.0, 1.0]).data) == 0.0


def test_mse_matches_scalar_recomputation():
    rng = np.random.default_rng(2)
    for _ in range(10):
        shape = tuple(rng.integers(1, 5, size=3))
        p, t = rng.standard_normal(shape), rng.standard_normal(shape)
        w = rng.integers(0, 2, size=shape).astype(float)
        w.flat[0] = 1.0
        num = sum(float(wi) * (float(pi) - float(ti)) ** 2 for pi, ti, wi in zip(p.flat, t.flat, w.flat))
        expected = num / float(w.sum())
        assert abs(float(T.masked_mse_loss(T.Tensor(p), t, w).data) - expected) < 1e-6


def test_mse_empty_mask():
    with pytest.raises(DegenerateInputError):
        T.masked_mse_loss(T.Tensor(np.ones(3)), np.ones(3), np.zeros(3))


def test_cross_entropy_examples():
    assert abs(float(T.cross_entropy_loss(T.Tensor(np.zeros((1, 3))), [0]).data) - math.log(3)) < 1e-12
    assert float(T.cross_entropy_loss(T.Tensor(np.array([[10.0, -10.0]])), [0]).data) < 1e-4
    with pytest.raises(ValidationError):
        T.cross_entropy_loss(T.Tensor(np.zeros((1, 3))), [3])


def test_tanh_gradient_at_zero():
    x = T.Tensor(np.zeros(1), requires_grad=True)
    y = T.tanh(x)
    T.mean_axis(y, 0).backward()
    assert x.grad[0] == 1.0


def test_backward_needs_scalar():
    x = T.Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValidationError):
        T.relu(x).backward()


def test_gradients_accumulate_over_shared_inputs():
    x = T.Tensor(np.array([0.3, -0.2]), requires_grad=True)
    T.mean_axis(T.add(x, x), 0).backward()
    np.testing.assert_allclose(x.grad, [1.0, 1.0])


@pytest.mark.parametrize("op", sorted(GRADIENT_CASES))
def test_gradient_check(op):
    assert worst_gradient_error(op, n_shapes=5, seed=99) < 1e-5


def test_adam_first_step():
    params = {"p": np.zeros(1)}
    state = OptimizerState(lr=0.01)
    adam_step(params, {"p": np.ones(1)}, state)
    assert abs(params["p"][0] + 0.01) < 1e-8
    assert state.step == 1


def test_adam_skips_missing_gradients():
    params = {"a": np.zeros(2), "b": np.ones(2)}
    state = OptimizerState()
    adam_step(params, {"a": np.ones(2), "b": None}, state)
    np.testing.assert_array_equal(params["b"], np.ones(2))


def test_unet_shapes_and_range():
    net = UNet(UNetConfig(base_channels=4), seed=0)
    x = np.random.default_rng(3).standard_normal((2, 8, 4, 6, 1)).astype(np.float32)
    out = net.forward(x).data
    assert out.shape == (2, 8, 4, 6, 1)
    assert np.all(np.abs(out) < 1.0)


def test_unet_rejects_odd_patch():
    net = UNet(UNetConfig(base_channels=2), seed=0)
    with pytest.raises(ValidationError):
        net.forward(np.zeros((1, 5, 4, 4, 1), dtype=np.float32))
    with pytest.raises(ShapeError):
        net.forward(np.zeros((5, 4, 4, 1), dtype=np.float32))


@pytest.mark.parametrize("diagnosis", ["CN", "AD"])
def test_unet_overfits_single_pair(diagnosis):
    spec = PhantomSpec(dims=(24, 32, 24))
    subject = generate_subject(spec, diagnosis, 3)
    small, icc = downsampled_inputs(subject.volume, subject.labels)
    sl = (slice(0, 8), slice(4, 12), slice(0, 8))
    x = ((small[sl] - small[icc].mean()) / small[icc].std())[None, ..., None].astype(np.float32)
    target = make_target(diagnosis, icc[sl]).data[None, ..., None]
    net = UNet(UNetConfig(), seed=0)
    opt = Adam(net.params)
    losses = []
    for _ in range(500):
        opt.zero_grad()
        loss = T.masked_mse_loss(net.forward(x), target, np.ones_like(target))
        loss.backward()
        opt.step()
        losses.append(float(loss.data))
        if losses[-1] < 1e-3:
            break
    assert losses[-1] < 1e-3


def _train_steps(seed, steps=5):
    rng = np.random.default_rng(0)
    net = UNet(UNetConfig(base_channels=2), seed=seed)
    x = rng.standard_normal((2, 4, 4, 4, 1)).astype(np.float32)
    t = np.sign(rng.standard_normal(x.shape)).astype(np.float32)
    opt = Adam(net.params, lr=1e-2)
    losses = []
    for _ in range(steps):
        opt.zero_grad()
        loss = T.masked_mse_loss(net.forward(x), t, np.ones_like(t))
        loss.backward()
        opt.step()
        losses.append(float(loss.data))
    return net.arrays(), losses


def test_seeded_training_is_deterministic():
    a, la = _train_steps(7)
    b, lb = _train_steps(7)
    c, lc = _train_steps(8)
    assert la == lb
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert la != lc


def test_checkpoint_round_trip(tmp_path):
    net = UNet(UNetConfig(base_channels=2), seed=5)
    save_arrays(net.arrays(), tmp_path / "n.gnn1")
    loaded = load_arrays(tmp_path / "n.gnn1")
    assert list(loaded) == list(net.arrays())
    clone = UNet(net.config, params=loaded)
    x = np.random.default_rng(0).standard_normal((1, 4, 4, 4, 1)).astype(np.float32)
    np.testing.assert_array_equal(clone.forward(x).data, net.forward(x).data)
    assert encode_arrays(clone.arrays()) == (tmp_path / "n.gnn1").read_bytes()


def test_checkpoint_corruption():
    blob = encode_arrays({"w": np.ones((2, 3))})
    with pytest.raises(FormatError):
        decode_arrays(b"XXXX" + blob[4:])
    with pytest.raises(FormatError):
        decode_arrays(blob[:-2])
    with pytest.raises(FormatError):
        decode_arrays(blob + b"\0")
    assert decode_arrays(blob)["w"].shape == (2, 3)
