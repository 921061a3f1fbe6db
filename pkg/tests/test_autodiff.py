import numpy as np
import pytest

from bitbudget import autodiff as ad


def fd_check(build, params, h=1e-6, tol=1e-6):
    """Central finite differences against the engine's gradients."""
    loss = build()
    loss.backward()
    grads = [p.grad.copy() for p in params]
    for p, g in zip(params, grads):
        fd = np.zeros(p.data.size)
        for i in range(p.data.size):
            orig = p.data.flat[i]
            p.data.flat[i] = orig + h
            up = float(build().data)
            p.data.flat[i] = orig - h
            down = float(build().data)
            p.data.flat[i] = orig
            fd[i] = (up - down) / (2 * h)
        denom = max(np.linalg.norm(fd), 1e-12)
        assert np.linalg.norm(fd - g.ravel()) / denom < tol, (fd, g)


def test_matmul_add_relu_grad():
    rng = np.random.default_rng(0)
    w = ad.param(rng.standard_normal((4, 3)))
    b = ad.param(rng.standard_normal(3))
    x = ad.const(rng.standard_normal((5, 4)))
    fd_check(lambda: ad.mean(ad.relu(ad.add(ad.matmul(x, w), b))), [w, b])


def test_layer_norm_grad():
    rng = np.random.default_rng(1)
    x = ad.param(rng.standard_normal((6, 8)))
    g = ad.param(rng.uniform(0.5, 1.5, 8))
    b = ad.param(rng.standard_normal(8))
    fd_check(lambda: ad.mean(ad.mul(ad.layer_norm(x, g, b), ad.layer_norm(x, g, b))), [x, g, b])


def test_rms_norm_grad():
    rng = np.random.default_rng(2)
    x = ad.param(rng.standard_normal((3, 5)))
    fd_check(lambda: ad.mean(ad.mul(ad.rms_norm(x), ad.const(np.arange(5.0)))), [x])


def test_softmax_log_softmax_grad():
    rng = np.random.default_rng(3)
    x = ad.param(rng.standard_normal((4, 6)))
    c = ad.const(rng.standard_normal((4, 6)))
    fd_check(lambda: ad.mean(ad.mul(ad.softmax(x), c)), [x])
    fd_check(lambda: ad.mean(ad.mul(ad.log_softmax(x), c)), [x])


def test_cross_entropy_grad():
    rng = np.random.default_rng(4)
    x = ad.param(rng.standard_normal((7, 5)))
    t = rng.integers(0, 5, size=7)
    fd_check(lambda: ad.cross_entropy_mean(x, t), [x])


def test_gather_select_grad():
    rng = np.random.default_rng(5)
    table = ad.param(rng.standard_normal((9, 4)))
    ids = rng.integers(0, 9, size=(3, 2))
    fd_check(lambda: ad.mean(ad.gather_rows(table, ids)), [table])
    x = ad.param(rng.standard_normal((6, 4)))
    cols = rng.integers(0, 4, size=6)
    fd_check(lambda: ad.mean(ad.select_columns(x, cols)), [x])


def test_silu_exp_minimum_clip_grad():
    rng = np.random.default_rng(6)
    x = ad.param(rng.standard_normal(10) * 0.7)
    y = ad.param(rng.standard_normal(10) * 0.7 + 0.05)
    fd_check(lambda: ad.mean(ad.silu(x)), [x])
    fd_check(lambda: ad.mean(ad.exp(x)), [x])
    fd_check(lambda: ad.mean(ad.minimum(x, y)), [x, y])
    fd_check(lambda: ad.mean(ad.clip(x, -0.4, 0.4)), [x])


def test_broadcast_add_grad():
    rng = np.random.default_rng(7)
    a = ad.param(rng.standard_normal((2, 3, 4)))
    b = ad.param(rng.standard_normal(4))
    fd_check(lambda: ad.mean(ad.mul(ad.add(a, b), ad.add(a, b))), [a, b])


def test_batched_matmul_grad():
    rng = np.random.default_rng(8)
    a = ad.param(rng.standard_normal((2, 3, 4)))
    w = ad.param(rng.standard_normal((4, 5)))
    fd_check(lambda: ad.mean(ad.matmul(a, w)), [a, w])
    q = ad.param(rng.standard_normal((2, 3, 4)))
    k = ad.param(rng.standard_normal((2, 3, 4)))
    fd_check(lambda: ad.mean(ad.matmul(q, ad.transpose(k))), [q, k])


def test_adam_matches_reference():
    p = ad.param(np.array([1.0, -2.0]))
    opt = ad.Adam([p], lr=0.1)
    g = np.array([0.5, -1.0])
    m = v = np.zeros(2)
    x = np.array([1.0, -2.0])
    for step in range(1, 4):
        p.grad = g.copy()
        opt.step()
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        mh = m / (1 - 0.9 ** step)
        vh = v / (1 - 0.999 ** step)
        x = x - 0.1 * mh / (np.sqrt(vh) + 1e-8)
        assert np.allclose(p.data, x, atol=1e-14)


def test_backward_requires_scalar():
    x = ad.param(np.ones(3))
    with pytest.raises(ValueError):
        x.backward()
