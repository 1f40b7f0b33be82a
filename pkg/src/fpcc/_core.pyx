# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot loops: LDPC belief propagation and voxel-key lookup.

Mirrors ``_fallback`` exactly in argument layout and update order.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport tanh, atanh
from libc.stdlib cimport malloc, free
from libc.string cimport memset

cnp.import_array()

cdef double ATANH_CLIP = 0.999999999999


cdef inline unsigned long long _mix(long long key) nogil:
    cdef unsigned long long x = <unsigned long long>key
    x ^= x >> 33
    x *= 0xff51afd7ed558ccdULL
    x ^= x >> 33
    x *= 0xc4ceb9fe1a85ec53ULL
    x ^= x >> 33
    return x


def lookup_keys(sorted_keys, query):
    """Index of each query key in ``sorted_keys``, or -1 when absent.

    Open-addressing hash table; ``sorted_keys`` need only be unique here.
    """
    cdef cnp.int64_t[::1] keys = np.ascontiguousarray(sorted_keys, dtype=np.int64).reshape(-1)
    q_arr = np.ascontiguousarray(query, dtype=np.int64)
    cdef cnp.int64_t[::1] q = q_arr.reshape(-1)
    out_arr = np.empty(q.shape[0], dtype=np.int64)
    cdef cnp.int64_t[::1] out = out_arr
    cdef Py_ssize_t n = keys.shape[0], nq = q.shape[0], i
    cdef Py_ssize_t cap = 16
    while cap < 2 * n + 1:
        cap <<= 1
    cdef unsigned long long mask = cap - 1, h
    cdef long long* slot_key = <long long*>malloc(cap * sizeof(long long))
    cdef long long* slot_idx = <long long*>malloc(cap * sizeof(long long))
    if slot_key == NULL or slot_idx == NULL:
        free(slot_key)
        free(slot_idx)
        raise MemoryError()
    try:
        with nogil:
            for i in range(cap):
                slot_idx[i] = -1
            for i in range(n):
                h = _mix(keys[i]) & mask
                while slot_idx[h] != -1:
                    h = (h + 1) & mask
                slot_key[h] = keys[i]
                slot_idx[h] = i
            for i in range(nq):
                h = _mix(q[i]) & mask
                out[i] = -1
                while slot_idx[h] != -1:
                    if slot_key[h] == q[i]:
                        out[i] = slot_idx[h]
                        break
                    h = (h + 1) & mask
    finally:
        free(slot_key)
        free(slot_idx)
    return out_arr.reshape(q_arr.shape)


def ldpc_sum_product(llr, chk_vars, chk_mask, var_edges, int max_iters):
    """Batched LLR-domain sum-product decoder; see ``_fallback.ldpc_sum_product``."""
    cdef double[:, ::1] L = np.ascontiguousarray(llr, dtype=np.float64)
    cdef cnp.int64_t[:, ::1] cv = np.ascontiguousarray(chk_vars, dtype=np.int64)
    cdef cnp.uint8_t[:, ::1] cm = np.ascontiguousarray(chk_mask, dtype=np.uint8)
    cdef cnp.int64_t[:, ::1] ve = np.ascontiguousarray(var_edges, dtype=np.int64)
    cdef Py_ssize_t B = L.shape[0], n = L.shape[1]
    cdef Py_ssize_t m = cv.shape[0], dc = cv.shape[1], dv = ve.shape[1]
    cdef Py_ssize_t n_sock = m * dc

    hard_arr = np.zeros((B, n), dtype=np.uint8)
    conv_arr = np.zeros(B, dtype=np.bool_)
    iters_arr = np.zeros(B, dtype=np.int64)
    cdef cnp.uint8_t[:, ::1] hard = hard_arr
    cdef cnp.uint8_t[::1] conv = conv_arr.view(np.uint8)
    cdef cnp.int64_t[::1] iters = iters_arr

    cdef double* c2v = <double*>malloc((n_sock + 1) * sizeof(double))
    cdef double* v2c = <double*>malloc(n_sock * sizeof(double))
    cdef double* total = <double*>malloc(n * sizeof(double))
    cdef double* pre = <double*>malloc(dc * sizeof(double))
    cdef double* t = <double*>malloc(dc * sizeof(double))
    cdef Py_ssize_t b, i, j, c, s, it
    cdef int par, ok
    cdef double acc, suf, e
    if c2v == NULL or v2c == NULL or total == NULL or pre == NULL or t == NULL:
        free(c2v); free(v2c); free(total); free(pre); free(t)
        raise MemoryError()
    try:
        with nogil:
            for b in range(B):
                for i in range(n):
                    hard[b, i] = 1 if L[b, i] < 0 else 0
                ok = 1
                for c in range(m):
                    par = 0
                    for j in range(dc):
                        if cm[c, j]:
                            par ^= hard[b, cv[c, j]]
                    if par:
                        ok = 0
                        break
                if ok or max_iters <= 0:
                    conv[b] = ok
                    continue
                memset(c2v, 0, (n_sock + 1) * sizeof(double))
                for it in range(1, max_iters + 1):
                    for i in range(n):
                        acc = L[b, i]
                        for j in range(dv):
                            acc = acc + c2v[ve[i, j]]
                        total[i] = acc
                    for s in range(n_sock):
                        v2c[s] = total[cv[s // dc, s % dc]] - c2v[s]
                    for c in range(m):
                        for j in range(dc):
                            if cm[c, j]:
                                t[j] = tanh(0.5 * v2c[c * dc + j])
                            else:
                                t[j] = 1.0
                        pre[0] = 1.0
                        for j in range(1, dc):
                            pre[j] = pre[j - 1] * t[j - 1]
                        suf = 1.0
                        for j in range(dc - 1, -1, -1):
                            e = pre[j] * suf
                            if e > ATANH_CLIP:
                                e = ATANH_CLIP
                            elif e < -ATANH_CLIP:
                                e = -ATANH_CLIP
                            c2v[c * dc + j] = 2.0 * atanh(e) if cm[c, j] else 0.0
                            suf = suf * t[j]
                    for i in range(n):
                        acc = L[b, i]
                        for j in range(dv):
                            acc = acc + c2v[ve[i, j]]
                        hard[b, i] = 1 if acc < 0 else 0
                    iters[b] = it
                    ok = 1
                    for c in range(m):
                        par = 0
                        for j in range(dc):
                            if cm[c, j]:
                                par ^= hard[b, cv[c, j]]
                        if par:
                            ok = 0
                            break
                    if ok:
                        break
                conv[b] = ok
    finally:
        free(c2v); free(v2c); free(total); free(pre); free(t)
    return hard_arr, conv_arr, iters_arr
