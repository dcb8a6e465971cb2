"""Brute-force oracles and checkers shared by the unit and acceptance suites."""

import numpy as np

from deepgrade.neural import tensor as T


def rel_error(a, b):
    a, b = np.ravel(a), np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-300)
    return float(np.linalg.norm(a - b) / scale)


def numeric_grad(f, x, h=1e-5):
    """Central differences of scalar ``f()`` with respect to array ``x`` (perturbed in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + h
        fp = f()
        x[idx] = orig - h
        fm = f()
        x[idx] = orig
        g[idx] = (fp - fm) / (2 * h)
    return g


def gradcheck(build, inputs, rng, h=1e-5):
    """Max relative error between analytic and numeric gradients over every input.

    ``build(*tensors)`` returns a Tensor; it is reduced to a scalar by a fixed
    random projection so every output element contributes.
    """
    tensors = [T.Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in inputs]
    out = build(*tensors)
    proj = rng.standard_normal(out.shape)

    def scalar():
        return float(np.sum(build(*tensors).data * proj))

    # analytic: seed the output gradient with the projection
    out.grad = proj.copy()
    order = _topo(out)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    worst = 0.0
    for t in tensors:
        num = numeric_grad(scalar, t.data, h)
        worst = max(worst, rel_error(t.grad, num))
    return worst


def _topo(root):
    order, seen = [], set()

    def visit(node):
        if id(node) in seen:
            return
        seen.add(id(node))
        for p in node._parents:
            if p.requires_grad:
                visit(p)
        order.append(node)

    visit(root)
    return order


def conv3d_direct(x, w, b):
    """Seven nested loops: batch, out channel, x, y, z, kernel taps with channel sum."""
    nb, nx, ny, nz, cin = x.shape
    kx, ky, kz, _, cout = w.shape
    out = np.zeros((nb, nx, ny, nz, cout))
    for n in range(nb):
        for co in range(cout):
            for i in range(nx):
                for j in range(ny):
                    for k in range(nz):
                        acc = b[co]
                        for a in range(kx):
                            for c in range(ky):
                                for d in range(kz):
                                    xi, yj, zk = i + a - kx // 2, j + c - ky // 2, k + d - kz // 2
                                    if 0 <= xi < nx and 0 <= yj < ny and 0 <= zk < nz:
                                        acc += float(np.dot(x[n, xi, yj, zk, :], w[a, c, d, :, co]))
                        out[n, i, j, k, co] = acc
    return out


def block_mean_oracle(a):
    """Mean over every existing voxel of each 2x2x2 block."""
    out_dims = tuple((d + 1) // 2 for d in a.shape)
    out = np.zeros(out_dims)
    for i, j, k in np.ndindex(*out_dims):
        vals = []
        for a0 in range(2):
            for b0 in range(2):
                for c0 in range(2):
                    x, y, z = 2 * i + a0, 2 * j + b0, 2 * k + c0
                    if x < a.shape[0] and y < a.shape[1] and z < a.shape[2]:
                        vals.append(float(a[x, y, z]))
        out[i, j, k] = sum(vals) / len(vals)
    return out


def trilinear_oracle(a, target):
    """Corner-aligned trilinear value at each target voxel from its eight weighted neighbours."""
    out = np.zeros(target)
    for idx in np.ndindex(*target):
        pos = [i * (d - 1) / (t - 1) if d > 1 else 0.0 for i, d, t in zip(idx, a.shape, target)]
        total = 0.0
        lo = [min(int(np.floor(p)), max(d - 2, 0)) for p, d in zip(pos, a.shape)]
        for corner in np.ndindex(2, 2, 2):
            w, src = 1.0, []
            for ax in range(3):
                if a.shape[ax] == 1:
                    if corner[ax]:
                        w = 0.0
                    src.append(0)
                    continue
                f = pos[ax] - lo[ax]
                w *= f if corner[ax] else 1.0 - f
                src.append(lo[ax] + corner[ax])
            total += w * a[tuple(src)]
        out[idx] = total
    return out


def assemble_oracle(predictions, grid):
    """Per-voxel scan: average every patch value covering the voxel."""
    out = np.zeros(grid.volume_dims)
    for idx in np.ndindex(*grid.volume_dims):
        vals = []
        for loc, origin in enumerate(grid.origins):
            rel = tuple(i - o for i, o in zip(idx, origin))
            if all(0 <= r < p for r, p in zip(rel, grid.patch_dims)):
                vals.append(float(np.asarray(predictions[loc].data)[rel]))
        out[idx] = sum(vals) / len(vals)
    return out


def label_means_oracle(values, labels, s):
    flat_v, flat_l = np.ravel(values), np.ravel(labels)
    out = []
    for j in range(1, s + 1):
        total, count = 0.0, 0
        for v, lab in zip(flat_v, flat_l):
            if lab == j:
                total += float(v)
                count += 1
        out.append(total / count)
    return np.array(out)


def auc_pairs(scores, labels):
    pos = [s for s, l in zip(scores, labels) if l]
    neg = [s for s, l in zip(scores, labels) if not l]
    total = 0.0
    for p in pos:
        for q in neg:
            total += 1.0 if p > q else 0.5 if p == q else 0.0
    return total / (len(pos) * len(neg))


def _project(v, y, box):
    """Euclidean projection onto {0 <= a <= box, y.a = 0} by locating the multiplier exactly."""
    knots = np.unique(np.concatenate([v / y, (v - box) / y]))
    knots = np.concatenate([[knots[0] - 1.0], knots, [knots[-1] + 1.0]])
    vals = np.clip(v[None, :] - knots[:, None] * y[None, :], 0.0, box) @ y  # non-increasing
    i = int(np.argmax(vals <= 0.0))
    k0, k1, f0, f1 = knots[i - 1], knots[i], vals[i - 1], vals[i]
    lam = k1 if f0 == f1 else k0 + (k1 - k0) * f0 / (f0 - f1)
    return np.clip(v - lam * y, 0.0, box)


def dual_projected_gradient(kmat, y, box, iters=100000, tol=1e-15):
    """Maximize sum(a) - a.Q.a/2 over the SVM dual feasible set by accelerated projected gradient.

    Stops once 200 iterations improve the objective by at most ``tol`` (relative).
    """
    y = np.asarray(y, dtype=np.float64)
    box = np.asarray(box, dtype=np.float64)
    q = (y[:, None] * y[None, :]) * kmat
    step = 1.0 / max(np.linalg.eigvalsh(q).max(), 1e-12)

    def obj(v):
        return float(v.sum() - 0.5 * v @ q @ v)

    a = np.zeros_like(y)
    z, t = a.copy(), 1.0
    last = -np.inf
    for it in range(iters):
        a_new = _project(z + step * (1.0 - q @ z), y, box)
        if obj(a_new) < obj(a):  # adaptive restart keeps the iterates monotone
            z, t = a.copy(), 1.0
        else:
            t_new = (1 + np.sqrt(1 + 4 * t * t)) / 2
            z = a_new + ((t - 1) / t_new) * (a_new - a)
            a, t = a_new, t_new
        if it % 200 == 199:
            cur = obj(a)
            if cur - last <= tol * max(1.0, abs(cur)):
                break
            last = cur
    return a, obj(a)


# --- gradient-check case generators -----------------------------------------
# Each generator draws one random small problem: ``(build, inputs)`` where
# ``build`` maps input tensors to an output tensor.  Inputs for piecewise ops
# stay away from their kinks by more than the finite-difference step.


def _away_from_zero(rng, shape, gap=0.05):
    mag = rng.uniform(gap, 1.0, size=shape)
    return mag * rng.choice([-1.0, 1.0], size=shape)


def _distinct(rng, shape, spacing=0.05):
    n = int(np.prod(shape))
    return (rng.permutation(n) * spacing - 0.5 * n * spacing).reshape(shape)


def _case_conv3d(rng):
    k = int(rng.choice([1, 3]))
    dims = tuple(int(d) for d in rng.integers(1, 4, size=3))
    nb, cin, cout = (int(v) for v in rng.integers(1, 3, size=3))
    x = rng.standard_normal((nb,) + dims + (cin,))
    w = rng.standard_normal((k, k, k, cin, cout))
    b = rng.standard_normal(cout)
    return (lambda x_, w_, b_: T.conv3d(x_, w_, b_)), [x, w, b]


def _case_maxpool2(rng):
    dims = tuple(2 * int(d) for d in rng.integers(1, 3, size=3))
    shape = (int(rng.integers(1, 3)),) + dims + (int(rng.integers(1, 3)),)
    return T.maxpool2, [_distinct(rng, shape)]


def _case_upsample(rng):
    shape = (int(rng.integers(1, 3)),) + tuple(int(d) for d in rng.integers(1, 4, size=3)) + (int(rng.integers(1, 3)),)
    return T.upsample_nn2, [rng.standard_normal(shape)]


def _case_concat(rng):
    lead = (int(rng.integers(1, 3)),) + tuple(int(d) for d in rng.integers(1, 4, size=3))
    ca, cb = (int(v) for v in rng.integers(1, 4, size=2))
    return T.concat_channels, [rng.standard_normal(lead + (ca,)), rng.standard_normal(lead + (cb,))]


def _case_dense(rng):
    lead = tuple(int(d) for d in rng.integers(1, 5, size=int(rng.integers(1, 3))))
    fin, fout = (int(v) for v in rng.integers(1, 6, size=2))
    return (lambda x, w, b: T.dense(x, w, b)), [
        rng.standard_normal(lead + (fin,)), rng.standard_normal((fin, fout)), rng.standard_normal(fout)]


def _case_relu(rng):
    shape = tuple(int(d) for d in rng.integers(1, 6, size=int(rng.integers(1, 4))))
    return T.relu, [_away_from_zero(rng, shape)]


def _case_tanh(rng):
    shape = tuple(int(d) for d in rng.integers(1, 6, size=int(rng.integers(1, 4))))
    return T.tanh, [rng.standard_normal(shape)]


def _case_softmax(rng):
    shape = tuple(int(d) for d in rng.integers(1, 6, size=int(rng.integers(1, 4))))
    return T.softmax_rows, [2.0 * rng.standard_normal(shape)]


def _case_add(rng):
    shape = tuple(int(d) for d in rng.integers(1, 5, size=3))
    other = tuple(1 if rng.random() < 0.4 else d for d in shape)[int(rng.integers(0, 3)):]
    return T.add, [rng.standard_normal(shape), rng.standard_normal(other)]


def _case_mean_axis(rng):
    shape = tuple(int(d) for d in rng.integers(1, 5, size=int(rng.integers(1, 4))))
    axis = int(rng.integers(0, len(shape)))
    keep = bool(rng.integers(0, 2))
    return (lambda x: T.mean_axis(x, axis, keepdims=keep)), [rng.standard_normal(shape)]


def _case_mse(rng):
    shape = tuple(int(d) for d in rng.integers(1, 5, size=int(rng.integers(1, 4))))
    target = rng.standard_normal(shape)
    weight = rng.uniform(0.0, 2.0, size=shape)
    weight.flat[0] = 1.0
    return (lambda p: T.masked_mse_loss(p, target, weight)), [rng.standard_normal(shape)]


def _case_cross_entropy(rng):
    n, k = int(rng.integers(1, 6)), int(rng.integers(2, 6))
    labels = rng.integers(0, k, size=n)
    return (lambda z: T.cross_entropy_loss(z, labels)), [2.0 * rng.standard_normal((n, k))]


GRADIENT_CASES = {
    "conv3d": _case_conv3d,
    "maxpool2": _case_maxpool2,
    "upsample_nn2": _case_upsample,
    "concat_channels": _case_concat,
    "dense": _case_dense,
    "relu": _case_relu,
    "tanh": _case_tanh,
    "softmax_rows": _case_softmax,
    "add": _case_add,
    "mean_axis": _case_mean_axis,
    "masked_mse_loss": _case_mse,
    "cross_entropy_loss": _case_cross_entropy,
}


def worst_gradient_error(op, n_shapes=20, seed=0, h=1e-5):
    rng = np.random.default_rng([seed, sorted(GRADIENT_CASES).index(op)])
    worst = 0.0
    for _ in range(n_shapes):
        build, inputs = GRADIENT_CASES[op](rng)
        worst = max(worst, gradcheck(build, inputs, rng, h))
    return worst
