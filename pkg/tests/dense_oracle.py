"""Dense-grid reference convolutions used by the sparse conv tests."""
import numpy as np


def to_dense(t):
    d = np.zeros(tuple(t.grid) + (t.attrs.shape[1],))
    if t.n:
        d[tuple(t.coords.T)] = t.attrs
    return d


def shifted(dense, off):
    """``out[p] = dense[p + off]`` with zeros outside the grid."""
    out = np.zeros_like(dense)
    src, dst = [], []
    for o, g in zip(off, dense.shape[:3]):
        o = int(o)
        if abs(o) >= g:
            return out
        if o >= 0:
            src.append(slice(o, g))
            dst.append(slice(0, g - o))
        else:
            src.append(slice(0, g + o))
            dst.append(slice(-o, g))
    out[tuple(dst)] = dense[tuple(src)]
    return out


def dense_submanifold(t, k):
    d = to_dense(t)
    acc = np.zeros(tuple(t.grid) + (k.c_out,))
    for j, off in enumerate(k.offsets):
        acc += shifted(d, k.dilation * off) @ k.weights[j]
    out = acc[tuple(t.coords.T)] if t.n else np.zeros((0, k.c_out))
    if k.bias is not None:
        out = out + k.bias
    return out


def dense_strided(t, k):
    s = k.stride
    out_grid = tuple(-(-g // s) for g in t.grid)
    d = to_dense(t)
    coords = np.unique(t.coords // s, axis=0)
    vals = np.zeros((coords.shape[0], k.c_out))
    for i, q in enumerate(coords):
        for j, off in enumerate(k.offsets):
            p = s * q + k.dilation * off
            if np.all(p >= 0) and np.all(p < np.array(t.grid)):
                vals[i] += d[tuple(p)] @ k.weights[j]
    if k.bias is not None:
        vals += k.bias
    return coords, vals, out_grid


def dense_transposed(t, k, out_grid=None):
    s = k.stride
    grid = tuple(out_grid) if out_grid is not None else tuple(s * g for g in t.grid)
    acc = np.zeros(grid + (k.c_out,))
    hit = np.zeros(grid, dtype=bool)
    for p, x in zip(t.coords, t.attrs):
        for j, off in enumerate(k.offsets):
            r = s * p + k.dilation * off
            if np.all(r >= 0) and np.all(r < np.array(grid)):
                acc[tuple(r)] += x @ k.weights[j]
                hit[tuple(r)] = True
    if k.bias is not None:
        acc += k.bias
    return acc, hit
