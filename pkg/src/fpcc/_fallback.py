"""Pure numpy versions of the compiled kernels in ``_core.pyx``.

Both implementations take identical arguments and must agree: bit-for-bit on
decoded bits and lookup indices, and to rounding on float outputs.
"""
import numpy as np

ATANH_CLIP = 0.999999999999


def lookup_keys(sorted_keys, query):
    """Index of each query key in ``sorted_keys``, or -1 when absent."""
    sorted_keys = np.asarray(sorted_keys, dtype=np.int64)
    query = np.asarray(query, dtype=np.int64)
    if sorted_keys.size == 0:
        return np.full(query.shape, -1, dtype=np.int64)
    pos = np.searchsorted(sorted_keys, query)
    pos_c = np.minimum(pos, sorted_keys.size - 1)
    hit = sorted_keys[pos_c] == query
    return np.where(hit, pos_c, -1).astype(np.int64)


def _syndrome_ok(hard, chk_vars, chk_mask):
    bits = np.take(hard, chk_vars, axis=1)
    bits = np.where(chk_mask, bits, 0)
    return ~np.any(bits.sum(axis=2) & 1, axis=1)


def ldpc_sum_product(llr, chk_vars, chk_mask, var_edges, max_iters):
    """Batched sum-product decoding in the LLR domain (positive means bit 0).

    Parameters
    ----------
    llr : (B, n) float64
    chk_vars : (m, dc) int64, variable index per check socket (padding points at 0)
    chk_mask : (m, dc) bool, False on padding sockets
    var_edges : (n, dv) int64, flat socket index ``c * dc + j`` per variable edge;
        padding entries equal ``m * dc`` and read a permanently zero message
    max_iters : int

    Returns
    -------
    hard bits (B, n) uint8, converged (B,) bool, iterations (B,) int64
    """
    llr = np.ascontiguousarray(llr, dtype=np.float64)
    B, n = llr.shape
    m, dc = chk_vars.shape
    n_sock = m * dc
    hard = (llr < 0).astype(np.uint8)
    converged = _syndrome_ok(hard, chk_vars, chk_mask)
    iters = np.zeros(B, dtype=np.int64)
    active = np.flatnonzero(~converged)
    if active.size == 0 or max_iters <= 0:
        return hard, converged, iters

    L = llr[active]
    c2v = np.zeros((active.size, n_sock + 1))
    flat_vars = chk_vars.reshape(-1)
    flat_mask = chk_mask.reshape(-1)
    for it in range(1, max_iters + 1):
        total = L.copy()
        for j in range(var_edges.shape[1]):
            total += c2v[:, var_edges[:, j]]
        v2c = total[:, flat_vars] - c2v[:, :n_sock]
        t = np.tanh(0.5 * v2c)
        t[:, ~flat_mask] = 1.0
        t = t.reshape(-1, m, dc)
        prefix = np.ones_like(t)
        suffix = np.ones_like(t)
        for j in range(1, dc):
            prefix[:, :, j] = prefix[:, :, j - 1] * t[:, :, j - 1]
        for j in range(dc - 2, -1, -1):
            suffix[:, :, j] = suffix[:, :, j + 1] * t[:, :, j + 1]
        excl = np.clip(prefix * suffix, -ATANH_CLIP, ATANH_CLIP)
        msg = 2.0 * np.arctanh(excl).reshape(-1, n_sock)
        msg[:, ~flat_mask] = 0.0
        c2v[:, :n_sock] = msg

        post = L.copy()
        for j in range(var_edges.shape[1]):
            post += c2v[:, var_edges[:, j]]
        h = (post < 0).astype(np.uint8)
        ok = _syndrome_ok(h, chk_vars, chk_mask)
        hard[active] = h
        iters[active] = it
        converged[active] = ok
        keep = ~ok
        if not keep.any():
            break
        active, L, c2v = active[keep], L[keep], c2v[keep]
    return hard, converged, iters
