# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled twins of the kernels in ``_pykernels``."""
import numpy as np
cimport numpy as cnp
from libc.stdint cimport int64_t

cnp.import_array()

BACKEND = "cython"


cdef inline bint _fits(int64_t v, int width) nogil:
    cdef int64_t lo = -((<int64_t>1) << (width - 1))
    cdef int64_t hi = ((<int64_t>1) << (width - 1)) - 1
    return lo <= v <= hi


def tree_sum_rows(products, int product_width):
    cdef cnp.ndarray[int64_t, ndim=2] x = np.ascontiguousarray(products, dtype=np.int64)
    if x.ndim != 2:
        raise ValueError("products must be 2-D (rows x terms)")
    cdef Py_ssize_t rows = x.shape[0]
    cdef Py_ssize_t n = x.shape[1]
    cdef cnp.ndarray[int64_t, ndim=1] out = np.zeros(rows, dtype=np.int64)
    cdef cnp.ndarray[int64_t, ndim=1] buf = np.empty(max(n, 1), dtype=np.int64)
    cdef Py_ssize_t r, i, m, half
    cdef int stage
    cdef int64_t v
    if n == 0:
        return out
    for r in range(rows):
        for i in range(n):
            v = x[r, i]
            if not _fits(v, product_width):
                raise OverflowError(f"product exceeds {product_width}-bit signed range")
            buf[i] = v
        m = n
        stage = 0
        while m > 1:
            stage += 1
            half = m // 2
            for i in range(half):
                v = buf[2 * i] + buf[2 * i + 1]
                if not _fits(v, product_width + stage):
                    raise OverflowError(
                        f"adder stage {stage} exceeds {product_width + stage}-bit signed range")
                buf[i] = v
            if m % 2:
                buf[half] = buf[m - 1]
                m = half + 1
            else:
                m = half
        out[r] = buf[0]
    return out


def tree_matvec(weights, latch, int product_width):
    cdef cnp.ndarray[int64_t, ndim=2] w = np.ascontiguousarray(weights, dtype=np.int64)
    cdef cnp.ndarray[int64_t, ndim=1] a = np.ascontiguousarray(latch, dtype=np.int64)
    cdef Py_ssize_t rows = w.shape[0]
    cdef Py_ssize_t n = w.shape[1]
    cdef cnp.ndarray[int64_t, ndim=2] prod = np.empty((rows, n), dtype=np.int64)
    cdef Py_ssize_t r, c
    for r in range(rows):
        for c in range(n):
            prod[r, c] = w[r, c] * a[c]
    return tree_sum_rows(prod, product_width)


def temporal_matvec(weights, latch, int acc_width):
    cdef cnp.ndarray[int64_t, ndim=2] w = np.ascontiguousarray(weights, dtype=np.int64)
    cdef cnp.ndarray[int64_t, ndim=1] a = np.ascontiguousarray(latch, dtype=np.int64)
    cdef Py_ssize_t rows = w.shape[0]
    cdef Py_ssize_t n = w.shape[1]
    cdef cnp.ndarray[int64_t, ndim=1] acc = np.zeros(rows, dtype=np.int64)
    cdef Py_ssize_t r, c
    cdef int64_t v
    for c in range(n):
        for r in range(rows):
            v = acc[r] + w[r, c] * a[c]
            if not _fits(v, acc_width):
                raise OverflowError(f"accumulator exceeds {acc_width} bits at input {c}")
            acc[r] = v
    return acc


def requantize(acc, int64_t mult, int shift, int64_t lo, int64_t hi):
    cdef cnp.ndarray[int64_t, ndim=1] a = np.ascontiguousarray(np.ravel(acc), dtype=np.int64)
    cdef Py_ssize_t n = a.shape[0]
    cdef cnp.ndarray[int64_t, ndim=1] out = np.empty(n, dtype=np.int64)
    cdef Py_ssize_t i
    cdef int64_t v
    cdef int64_t rnd = ((<int64_t>1) << (shift - 1)) if shift > 0 else 0
    for i in range(n):
        if shift > 0:
            v = (a[i] * mult + rnd) >> shift
        else:
            v = a[i] * mult
        if v < lo:
            v = lo
        elif v > hi:
            v = hi
        out[i] = v
    return out.reshape(np.shape(acc))


cdef bint _augment(Py_ssize_t s, int64_t[:, :] adj, int64_t[:] adj_len,
                   int64_t[:] owner, int64_t[:] seen):
    cdef Py_ssize_t k, d
    for k in range(adj_len[s]):
        d = adj[s, k]
        if seen[d]:
            continue
        seen[d] = 1
        if owner[d] < 0 or _augment(owner[d], adj, adj_len, owner, seen):
            owner[d] = s
            return True
    return False


cdef inline bint _src_before(Py_ssize_t a, Py_ssize_t b, int64_t[:] send,
                             Py_ssize_t rot, Py_ssize_t n):
    if send[a] != send[b]:
        return send[a] > send[b]
    return (a - rot + n) % n < (b - rot + n) % n


cdef inline bint _dst_before(Py_ssize_t s, Py_ssize_t a, Py_ssize_t b,
                             int64_t[:, :] real, int64_t[:] recv,
                             Py_ssize_t rot, Py_ssize_t n):
    cdef int ra = 0 if real[s, a] > 0 else 1
    cdef int rb = 0 if real[s, b] > 0 else 1
    if ra != rb:
        return ra < rb
    if real[s, a] != real[s, b]:
        return real[s, a] > real[s, b]
    if recv[a] != recv[b]:
        return recv[a] > recv[b]
    return (a - rot + n) % n < (b - rot + n) % n


def match_cycles(real_in, dummy_in, Py_ssize_t delta):
    cdef int64_t[:, :] real = np.array(real_in, dtype=np.int64)
    cdef int64_t[:, :] dummy = np.array(dummy_in, dtype=np.int64)
    cdef Py_ssize_t n = real.shape[0]
    match_arr = np.full((delta, n), -1, dtype=np.int64)
    real_arr = np.zeros((delta, n), dtype=np.bool_)
    cdef int64_t[:, :] match = match_arr
    cdef cnp.npy_bool[:, :] is_real = real_arr
    cdef int64_t[:] send = np.zeros(n, dtype=np.int64)
    cdef int64_t[:] recv = np.zeros(n, dtype=np.int64)
    cdef int64_t[:] order = np.zeros(n, dtype=np.int64)
    cdef int64_t[:, :] adj = np.zeros((n, n), dtype=np.int64)
    cdef int64_t[:] adj_len = np.zeros(n, dtype=np.int64)
    cdef int64_t[:] owner = np.zeros(n, dtype=np.int64)
    cdef int64_t[:] seen = np.zeros(n, dtype=np.int64)
    cdef Py_ssize_t t, s, d, i, j, rot, k
    cdef int64_t tmp
    for t in range(delta):
        rot = t % n
        for s in range(n):
            send[s] = 0
            recv[s] = 0
        for s in range(n):
            for d in range(n):
                send[s] += real[s, d]
                recv[d] += real[s, d]
        for i in range(n):
            order[i] = i
        for i in range(1, n):
            tmp = order[i]
            j = i - 1
            while j >= 0 and _src_before(tmp, order[j], send, rot, n):
                order[j + 1] = order[j]
                j -= 1
            order[j + 1] = tmp
        for s in range(n):
            k = 0
            for d in range(n):
                if real[s, d] + dummy[s, d] > 0:
                    adj[s, k] = d
                    k += 1
            adj_len[s] = k
            for i in range(1, k):
                tmp = adj[s, i]
                j = i - 1
                while j >= 0 and _dst_before(s, tmp, adj[s, j], real, recv, rot, n):
                    adj[s, j + 1] = adj[s, j]
                    j -= 1
                adj[s, j + 1] = tmp
        for d in range(n):
            owner[d] = -1
        for i in range(n):
            for d in range(n):
                seen[d] = 0
            if not _augment(order[i], adj, adj_len, owner, seen):
                raise RuntimeError("count matrix is not regular; no perfect matching")
        for d in range(n):
            s = owner[d]
            match[t, s] = d
            if real[s, d] > 0:
                real[s, d] -= 1
                is_real[t, s] = True
            else:
                dummy[s, d] -= 1
    return match_arr, real_arr
