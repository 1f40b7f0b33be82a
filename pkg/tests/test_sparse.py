import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dense_oracle import dense_strided, dense_submanifold, dense_transposed
from fpcc.errors import AlignmentError, ConfigError, InvariantError, ShapeError
from fpcc.sparse import (
    SparseKernel,
    SparseVoxelTensor,
    concat_channels,
    dilated_conv,
    geometry_upscale,
    kernel_offsets,
    linear_keys,
    keys_to_coords,
    parse_tensor_text,
    format_tensor_text,
    strided_conv,
    submanifold_conv,
    transposed_conv,
    voxelize,
)


def random_tensor(rng, grid, density, channels):
    mask = rng.random(grid) < density
    coords = np.argwhere(mask)
    return SparseVoxelTensor(coords, rng.normal(size=(coords.shape[0], channels)), grid)


def random_kernel(rng, size, c_in, c_out, stride=1, dilation=1, bias=True):
    w = rng.normal(size=(size ** 3, c_in, c_out))
    b = rng.normal(size=c_out) if bias else None
    return SparseKernel(w, size, stride, dilation, b)


def test_build_sorts_and_rejects_duplicates():
    t = SparseVoxelTensor.build([[1, 0, 0], [0, 0, 1]], [[1.0], [2.0]], (2, 2, 2))
    assert t.coords.tolist() == [[0, 0, 1], [1, 0, 0]]
    assert t.attrs[:, 0].tolist() == [2.0, 1.0]
    with pytest.raises(InvariantError):
        SparseVoxelTensor.build([[0, 0, 0], [0, 0, 0]], [[1.0], [2.0]], (2, 2, 2))
    with pytest.raises(InvariantError):
        SparseVoxelTensor([[1, 0, 0], [0, 0, 1]], [[1.0], [2.0]], (2, 2, 2))
    with pytest.raises(InvariantError):
        SparseVoxelTensor.build([[2, 0, 0]], [[1.0]], (2, 2, 2))
    with pytest.raises(ShapeError):
        SparseVoxelTensor([[0, 0, 0]], np.zeros((2, 1)), (2, 2, 2))


def test_keys_roundtrip(rng):
    grid = (5, 7, 3)
    c = np.argwhere(np.ones(grid, dtype=bool))
    k = linear_keys(c, grid)
    assert np.array_equal(k, np.arange(np.prod(grid)))
    assert np.array_equal(keys_to_coords(k, grid), c)


def test_kernel_offsets():
    o = kernel_offsets(3)
    assert o.shape == (27, 3) and o[13].tolist() == [0, 0, 0]
    assert kernel_offsets(2).min() == 0 and kernel_offsets(2).max() == 1
    assert kernel_offsets(1).tolist() == [[0, 0, 0]]


def test_single_voxel_identity_center():
    t = SparseVoxelTensor([[1, 1, 1]], [[2.0, -1.0]], (3, 3, 3))
    w = np.zeros((27, 2, 2))
    w[13] = np.eye(2)
    out = submanifold_conv(t, SparseKernel(w, 3))
    assert out.equals(t)


def test_submanifold_keeps_active_set_and_empty(rng):
    t = random_tensor(rng, (6, 6, 6), 0.2, 3)
    out = submanifold_conv(t, random_kernel(rng, 3, 3, 4))
    assert out.same_active_set(t) and out.channels == 4
    e = submanifold_conv(SparseVoxelTensor.empty((4, 4, 4), 3), random_kernel(rng, 3, 3, 2))
    assert e.n == 0 and e.channels == 2


def test_channel_mismatch(rng):
    t = random_tensor(rng, (4, 4, 4), 0.5, 3)
    with pytest.raises(ShapeError):
        submanifold_conv(t, random_kernel(rng, 3, 2, 2))
    with pytest.raises(ConfigError):
        submanifold_conv(t, random_kernel(rng, 3, 3, 2, stride=2))
    with pytest.raises(ConfigError):
        strided_conv(t, random_kernel(rng, 2, 3, 2, stride=1))


def test_strided_output_set(rng):
    t = random_tensor(rng, (9, 8, 5), 0.15, 2)
    out = strided_conv(t, random_kernel(rng, 2, 2, 3, stride=2))
    assert out.grid == (5, 4, 3)
    assert np.array_equal(out.coords, np.unique(t.coords // 2, axis=0))


def test_transposed_inverts_strided_active_set(rng):
    t = random_tensor(rng, (8, 8, 8), 0.1, 2)
    down = strided_conv(t, random_kernel(rng, 2, 2, 3, stride=2))
    up = transposed_conv(down, random_kernel(rng, 2, 3, 2, stride=2), out_coords=t.coords, out_grid=t.grid)
    assert up.same_active_set(t)
    # kernel 2 stride 2: the free output set is exactly the children of each site
    free = transposed_conv(down, random_kernel(rng, 2, 3, 2, stride=2, bias=False))
    assert free.n == 8 * down.n


CASES = [(v, i) for i, v in enumerate(["sub", "sub", "dil", "strided", "transposed"] * 20)]


@pytest.mark.parametrize("variant,case", CASES)
def test_conv_matches_dense_oracle(variant, case):
    """100 randomized cases across every variant on grids up to 16^3."""
    rng = np.random.default_rng(1000 + case)
    grid = tuple(int(g) for g in rng.integers(2, 17, size=3))
    c_in, c_out = (int(c) for c in rng.integers(1, 5, size=2))
    t = random_tensor(rng, grid, rng.uniform(0.02, 0.4), c_in)
    bias = bool(rng.integers(2))
    if variant in ("sub", "dil"):
        size = int(rng.choice([1, 3, 5]))
        dil = 1 if variant == "sub" else int(rng.integers(2, 4))
        k = random_kernel(rng, size, c_in, c_out, 1, dil, bias)
        out = (submanifold_conv if variant == "sub" else dilated_conv)(t, k)
        assert out.same_active_set(t)
        assert np.allclose(out.attrs, dense_submanifold(t, k), rtol=0, atol=1e-10)
    elif variant == "strided":
        size, stride = int(rng.choice([2, 3])), int(rng.choice([2, 3]))
        k = random_kernel(rng, size, c_in, c_out, stride, 1, bias)
        out = strided_conv(t, k)
        coords, vals, g = dense_strided(t, k)
        assert out.grid == g and np.array_equal(out.coords, coords)
        assert np.allclose(out.attrs, vals, rtol=0, atol=1e-10)
    else:
        size, stride = int(rng.choice([2, 3])), int(rng.choice([2, 3]))
        k = random_kernel(rng, size, c_in, c_out, stride, 1, bias)
        out = transposed_conv(t, k)
        acc, hit = dense_transposed(t, k)
        assert np.array_equal(out.coords, np.argwhere(hit))
        assert np.allclose(out.attrs, acc[hit], rtol=0, atol=1e-10)
        # restricted to a given target set
        tgt = np.argwhere(np.random.default_rng(case).random(out.grid) < 0.1)
        r = transposed_conv(t, k, out_coords=tgt, out_grid=out.grid)
        assert np.allclose(r.attrs, acc[tuple(tgt.T)] if tgt.size else r.attrs, rtol=0, atol=1e-10)


@given(st.integers(0, 2**31), st.integers(1, 3))
def test_submanifold_linear_in_input(seed, c):
    rng = np.random.default_rng(seed)
    t = random_tensor(rng, (5, 5, 5), 0.3, c)
    k = random_kernel(rng, 3, c, 2, bias=False)
    a = submanifold_conv(t, k).attrs
    b = submanifold_conv(t.with_attrs(3 * t.attrs), k).attrs
    assert np.allclose(3 * a, b, atol=1e-10)


def test_concat_alignment(rng):
    a = random_tensor(rng, (4, 4, 4), 0.5, 2)
    assert concat_channels(a, a).channels == 4
    b = a.select(np.arange(a.n - 1))
    with pytest.raises(AlignmentError):
        concat_channels(a, b)


def test_geometry_upscale(rng):
    t = random_tensor(rng, (3, 4, 2), 0.4, 2)
    up = geometry_upscale(t)
    assert up.grid == (6, 8, 4) and up.n == 8 * t.n
    assert np.array_equal(np.unique(up.coords // 2, axis=0), t.coords)
    s = geometry_upscale(t, "scale_only")
    assert np.array_equal(s.coords, 2 * t.coords)
    with pytest.raises(ConfigError):
        geometry_upscale(t, "nearest")


def test_voxelize_mean():
    pts = np.array([[0.1, 0.1, 0.1], [0.2, 0.3, 0.1], [1.5, 0.1, 0.1]])
    t = voxelize(pts, np.array([[1.0], [3.0], [5.0]]), 1.0, extent=(2, 1, 1))
    assert t.coords.tolist() == [[0, 0, 0], [1, 0, 0]]
    assert t.attrs[:, 0].tolist() == [2.0, 5.0]


def test_text_roundtrip(rng):
    t = random_tensor(rng, (5, 6, 7), 0.2, 3)
    back = parse_tensor_text(format_tensor_text(t))
    assert back.equals(t)
    e = SparseVoxelTensor.empty((2, 2, 2), 4)
    assert parse_tensor_text(format_tensor_text(e)).grid == (2, 2, 2)
