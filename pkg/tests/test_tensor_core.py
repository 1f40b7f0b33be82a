import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fpcc.errors import ConfigError, EmptyInputError, InvariantError, ShapeError
from fpcc.tensor_core import (
    ACTIVATIONS,
    AffineNorm,
    LinearLayer,
    ParamStore,
    affine_norm,
    fc_backward,
    fc_forward,
    global_average_pool,
    seeded_init,
    sigmoid,
)


def naive_matmul(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            s = 0.0
            for k in range(a.shape[1]):
                s += a[i, k] * b[k, j]
            out[i, j] = s
    return out


def test_fc_identity():
    layer = LinearLayer(np.eye(3), np.zeros(3))
    x = np.arange(6.0).reshape(2, 3)
    assert np.array_equal(fc_forward(layer, x), x)


def test_fc_sigmoid_half():
    layer = LinearLayer(np.array([[1.0], [-1.0]]), np.zeros(1), "sigmoid")
    assert fc_forward(layer, [[1.0, 1.0]])[0, 0] == 0.5


def test_fc_matches_naive_matmul(rng):
    w = seeded_init((7, 5), 3)
    b = rng.normal(size=5)
    x = rng.normal(size=(4, 7))
    ref = naive_matmul(x, w) + b
    assert np.allclose(fc_forward(LinearLayer(w, b), x), ref, rtol=0, atol=1e-13)


def test_fc_shape_error():
    layer = LinearLayer(np.zeros((3, 2)), np.zeros(2))
    with pytest.raises(ShapeError):
        fc_forward(layer, np.zeros((1, 4)))
    with pytest.raises(ShapeError):
        fc_backward(layer, np.zeros((2, 3)), np.zeros((2, 3)))


def test_bad_activation_and_bias():
    with pytest.raises(ConfigError):
        LinearLayer(np.zeros((2, 2)), np.zeros(2), "tanh")
    with pytest.raises(ShapeError):
        LinearLayer(np.zeros((2, 2)), np.zeros(3))


def test_fc_backward_linear_bias_is_row_count():
    layer = LinearLayer(seeded_init((3, 4), 0), np.zeros(4))
    _, _, gb = fc_backward(layer, np.ones((5, 3)), np.ones((5, 4)))
    assert np.array_equal(gb, np.full(4, 5.0))


def test_fc_backward_zero_grad():
    layer = LinearLayer(seeded_init((3, 4), 0), np.ones(4), "silu")
    gi, gw, gb = fc_backward(layer, np.ones((2, 3)), np.zeros((2, 4)))
    assert not gi.any() and not gw.any() and not gb.any()


def _fd_rel_err(a, b, floor=1e-7):
    return np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor))


@pytest.mark.parametrize("act", ACTIVATIONS)
def test_fc_backward_finite_difference(act, rng):
    w = rng.normal(size=(4, 3))
    b = rng.normal(size=3)
    x = rng.normal(size=(5, 4))
    # keep relu kinks away from the FD stencil
    z = x @ w + b
    x[np.abs(z).min(axis=1) < 1e-3] += 0.01
    g = rng.normal(size=(5, 3))
    layer = LinearLayer(w, b, act)
    gi, gw, gb = fc_backward(layer, x, g)

    def obj():
        return float(np.sum(fc_forward(layer, x) * g))

    h = 1e-6
    for arr, grad in ((x, gi), (w, gw), (b, gb)):
        fd = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + h
            up = obj()
            arr[idx] = old - h
            dn = obj()
            arr[idx] = old
            fd[idx] = (up - dn) / (2 * h)
        assert _fd_rel_err(grad, fd) < 1e-5


def test_sigmoid_extremes():
    s = sigmoid(np.array([-1000.0, 0.0, 1000.0]))
    assert np.array_equal(s, [0.0, 0.5, 1.0])


def test_gap():
    assert np.array_equal(global_average_pool(np.full((4, 3), 2.5)), np.full(3, 2.5))
    assert np.array_equal(global_average_pool([[1.0, 3.0], [3.0, 1.0]]), [2.0, 2.0])
    with pytest.raises(EmptyInputError):
        global_average_pool(np.zeros((0, 3)))


def test_gap_matches_fsum(rng):
    a = rng.normal(size=(100, 64))
    ref = np.array([math.fsum(a[:, c]) / 100 for c in range(64)])
    assert np.max(np.abs(global_average_pool(a) - ref)) < 1e-12


def test_affine_norm():
    n = AffineNorm(np.array([2.0]), np.array([1.0]))
    assert affine_norm(n, [[1.0]])[0, 0] == 3.0
    x = np.arange(6.0).reshape(3, 2)
    assert np.array_equal(affine_norm(AffineNorm.identity(2), x), x)
    with pytest.raises(InvariantError):
        AffineNorm(np.array([0.0]), np.array([0.0]))
    with pytest.raises(ShapeError):
        affine_norm(AffineNorm.identity(3), x)


@given(st.lists(st.floats(0.1, 10), min_size=1, max_size=6), st.integers(0, 2**31))
def test_affine_norm_inverse(scales, seed):
    r = np.random.default_rng(seed)
    c = len(scales)
    scale = np.array(scales)
    shift = r.normal(size=c)
    x = r.normal(size=(4, c))
    y = affine_norm(AffineNorm(scale, shift), x)
    back = affine_norm(AffineNorm(1 / scale, -shift / scale), y)
    assert np.max(np.abs(back - x)) < 1e-12


def test_seeded_init():
    a = seeded_init((4, 8), 7)
    assert np.array_equal(a, seeded_init((4, 8), 7))
    assert np.all(np.abs(a) <= 0.5)
    assert not np.array_equal(a, seeded_init((4, 8), 8))
    k = seeded_init((27, 16, 4), 1)
    assert np.abs(k).max() <= 1 / math.sqrt(27 * 16)
    with pytest.raises(ConfigError):
        seeded_init((2, 2), 0, "xavier")
    with pytest.raises(ConfigError):
        seeded_init((0, 2), 0)


def test_param_store_roundtrip(tmp_path):
    s = ParamStore(5)
    layer = s.linear("a", 3, 4, "relu")
    s.norm("bn", 4)
    s.declare("k", (27, 2, 2))
    p = tmp_path / "w.fpcw"
    s.save(p)
    t = ParamStore.load(p)
    assert list(t) == list(s)
    for name in s:
        assert np.array_equal(s[name], t[name])
    assert t.strict
    with pytest.raises(ConfigError):
        t.declare("missing", (2,))
    with pytest.raises(ShapeError):
        t.declare("k", (27, 2, 3))
    # biases start at zero, order of declaration does not matter
    assert not layer.bias.any()
    u = ParamStore(5)
    u.declare("k", (27, 2, 2))
    assert np.array_equal(u["k"], s["k"])


def test_param_store_in_place_update():
    s = ParamStore(0)
    layer = s.linear("fc", 2, 2)
    s["fc.w"] = np.eye(2)
    assert np.array_equal(layer.weight, np.eye(2))
    with pytest.raises(InvariantError):
        s["fc.w"] = np.full((2, 2), np.nan)


def test_param_store_corrupt():
    data = ParamStore(0).to_bytes()
    with pytest.raises(ConfigError):
        ParamStore.from_bytes(b"XXXX" + data[4:])
    s = ParamStore(0)
    s.declare("x", (3,))
    raw = s.to_bytes()
    with pytest.raises(ConfigError):
        ParamStore.from_bytes(raw[:-3])
    with pytest.raises(ConfigError):
        ParamStore.from_bytes(raw + b"\0")
