"""Pure-Python/numpy implementations of the hot kernels.

Every function here has a twin in ``_ckernels.pyx`` with identical results;
``apusim.kernels`` picks one of them at import time.
"""
import numpy as np

BACKEND = "python"


def _check_width(values, width, what):
    lo = -(1 << (width - 1))
    hi = (1 << (width - 1)) - 1
    if values.size and (values.min() < lo or values.max() > hi):
        raise OverflowError(f"{what} exceeds {width}-bit signed range")


def tree_sum_rows(products, product_width):
    """Reduce every row of ``products`` through a pairwise adder tree.

    Stage ``s`` adds adjacent pairs at operand width ``product_width + s - 1``
    and produces ``product_width + s`` bit results; an odd trailing element
    passes through untouched.
    """
    x = np.ascontiguousarray(products, dtype=np.int64)
    if x.ndim != 2:
        raise ValueError("products must be 2-D (rows x terms)")
    rows, n = x.shape
    if n == 0:
        return np.zeros(rows, dtype=np.int64)
    _check_width(x, product_width, "product")
    stage = 0
    while x.shape[1] > 1:
        stage += 1
        m = x.shape[1]
        summed = x[:, 0 : m - 1 : 2] + x[:, 1:m:2]
        if m % 2:
            summed = np.concatenate([summed, x[:, m - 1 :]], axis=1)
        _check_width(summed, product_width + stage, f"adder stage {stage}")
        x = summed
    return x[:, 0].copy()


def tree_matvec(weights, latch, product_width):
    w = np.asarray(weights, dtype=np.int64)
    a = np.asarray(latch, dtype=np.int64)
    return tree_sum_rows(w * a[None, :], product_width)


def temporal_matvec(weights, latch, acc_width):
    """Stream one latch entry per step into a bank of accumulators."""
    w = np.asarray(weights, dtype=np.int64)
    a = np.asarray(latch, dtype=np.int64)
    acc = np.zeros(w.shape[0], dtype=np.int64)
    lo = -(1 << (acc_width - 1))
    hi = (1 << (acc_width - 1)) - 1
    for c in range(w.shape[1]):
        acc += w[:, c] * a[c]
        if acc.size and (acc.min() < lo or acc.max() > hi):
            raise OverflowError(f"accumulator exceeds {acc_width} bits at input {c}")
    return acc


def requantize(acc, mult, shift, lo, hi):
    """Fixed-point rescale: clamp((acc * mult + 2**(shift-1)) >> shift)."""
    a = np.asarray(acc, dtype=np.int64)
    if shift > 0:
        scaled = (a * np.int64(mult) + np.int64(1 << (shift - 1))) >> np.int64(shift)
    else:
        scaled = a * np.int64(mult)
    return np.clip(scaled, lo, hi).astype(np.int64)


def match_cycles(real, dummy, delta):
    """Peel ``delta`` perfect matchings off a regular bipartite multigraph.

    ``real + dummy`` must be a square, ``delta``-regular count matrix.  Each
    cycle's matching is found with augmenting paths, visiting sources by
    descending remaining real demand and rotating priority among ties.
    Returns ``(match, is_real)`` with ``match[t, s]`` the destination
    served by source ``s`` in cycle ``t``.
    """
    real = np.array(real, dtype=np.int64)
    dummy = np.array(dummy, dtype=np.int64)
    n = real.shape[0]
    match = np.full((delta, n), -1, dtype=np.int64)
    is_real = np.zeros((delta, n), dtype=np.bool_)
    for t in range(delta):
        rot = t % n
        send = real.sum(axis=1)
        recv = real.sum(axis=0)
        order = sorted(range(n), key=lambda s: (-send[s], (s - rot) % n))
        owner = [-1] * n

        def adjacency(s):
            cand = [d for d in range(n) if real[s, d] + dummy[s, d] > 0]
            cand.sort(
                key=lambda d: (
                    0 if real[s, d] > 0 else 1,
                    -real[s, d],
                    -recv[d],
                    (d - rot) % n,
                )
            )
            return cand

        adj = [adjacency(s) for s in range(n)]

        def augment(s, seen):
            for d in adj[s]:
                if seen[d]:
                    continue
                seen[d] = True
                if owner[d] < 0 or augment(owner[d], seen):
                    owner[d] = s
                    return True
            return False

        for s in order:
            if not augment(s, [False] * n):
                raise RuntimeError("count matrix is not regular; no perfect matching")
        for d in range(n):
            s = owner[d]
            match[t, s] = d
            if real[s, d] > 0:
                real[s, d] -= 1
                is_real[t, s] = True
            else:
                dummy[s, d] -= 1
    return match, is_real
