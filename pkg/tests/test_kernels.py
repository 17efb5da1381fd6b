import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from apusim import _pykernels, kernels

BACKENDS = kernels.backends()
IDS = [m.BACKEND for m in BACKENDS]


def test_compiled_backend_is_built():
    assert kernels.BACKEND == "cython"
    assert IDS == ["python", "cython"]


@pytest.mark.parametrize("k", BACKENDS, ids=IDS)
def test_tree_sum_rows_matches_numpy_sum(k, rng):
    x = rng.integers(-128, 128, size=(7, 37))
    assert np.array_equal(k.tree_sum_rows(x, 8), x.sum(axis=1))


@pytest.mark.parametrize("k", BACKENDS, ids=IDS)
def test_tree_sum_rows_detects_stage_overflow(k):
    x = np.full((1, 4), 7)
    # 7+7 = 14 does not fit the 4-bit stage-1 width of a 3-bit product tree
    with pytest.raises(OverflowError):
        k.tree_sum_rows(x, 3)
    with pytest.raises(OverflowError):
        k.tree_sum_rows(np.array([[8]]), 4)


@pytest.mark.parametrize("k", BACKENDS, ids=IDS)
def test_temporal_accumulator_overflow(k):
    w = np.full((2, 4), 7)
    a = np.full(4, 7)
    assert np.array_equal(k.temporal_matvec(w, a, 9), [196, 196])
    with pytest.raises(OverflowError):
        k.temporal_matvec(w, a, 8)


@pytest.mark.parametrize("k", BACKENDS, ids=IDS)
def test_requantize_rounds_half_up_and_clamps(k):
    acc = np.array([-5, -4, -3, -1, 0, 1, 3, 4, 5, 1000, -1000])
    # mult/2^shift = 1/2: floor(x/2 + 1/2)
    expect = np.clip(np.floor(acc / 2 + 0.5), -8, 7).astype(int)
    assert np.array_equal(k.requantize(acc, 1, 1, -8, 7), expect)
    assert np.array_equal(k.requantize(acc, 3, 0, -100, 100), np.clip(acc * 3, -100, 100))


@given(hnp.arrays(np.int64, st.tuples(st.integers(1, 5), st.integers(1, 40)),
                  elements=st.integers(-128, 127)))
def test_backends_agree_on_tree_sums(x):
    outs = [k.tree_sum_rows(x, 8) for k in BACKENDS]
    for o in outs[1:]:
        assert np.array_equal(o, outs[0])
    assert np.array_equal(outs[0], x.sum(axis=1))


@given(st.integers(1, 6), st.integers(1, 30), st.integers(0, 2**32 - 1))
def test_backends_agree_on_matvecs(rows, cols, seed):
    r = np.random.default_rng(seed)
    w = r.integers(-8, 8, size=(rows, cols))
    a = r.integers(-8, 8, size=cols)
    ref = w @ a
    for k in BACKENDS:
        assert np.array_equal(k.tree_matvec(w, a, 8), ref)
        assert np.array_equal(k.temporal_matvec(w, a, 8 + 5), ref)


@given(hnp.arrays(np.int64, st.integers(0, 50), elements=st.integers(-2**30, 2**30)),
       st.integers(1, 2**23 - 1), st.integers(0, 40), st.integers(2, 16))
def test_backends_agree_on_requantize(acc, mult, shift, bits):
    lo, hi = -(1 << (bits - 1)), (1 << (bits - 1)) - 1
    outs = [k.requantize(acc, mult, shift, lo, hi) for k in BACKENDS]
    for o in outs[1:]:
        assert np.array_equal(o, outs[0])
    # exact rational oracle
    from fractions import Fraction
    import math
    for v, o in zip(acc.tolist(), outs[0].tolist()):
        exact = math.floor(Fraction(v * mult, 1 << shift) + Fraction(1, 2)) if shift else v * mult
        assert o == min(max(exact, lo), hi)


def _regular(r, n, delta):
    """Random delta-regular count matrix: sum of delta random permutations."""
    c = np.zeros((n, n), dtype=np.int64)
    for _ in range(delta):
        c[np.arange(n), r.permutation(n)] += 1
    return c


@given(st.integers(1, 7), st.integers(1, 6), st.integers(0, 2**32 - 1))
def test_match_cycles_backends_agree_and_cover(n, delta, seed):
    r = np.random.default_rng(seed)
    total = _regular(r, n, delta)
    real = np.minimum(total, r.integers(0, 3, size=(n, n)))
    dummy = total - real
    outs = [k.match_cycles(real, dummy, delta) for k in BACKENDS]
    for m, ir in outs[1:]:
        assert np.array_equal(m, outs[0][0]) and np.array_equal(ir, outs[0][1])
    match, is_real = outs[0]
    used = np.zeros((n, n), dtype=np.int64)
    got_real = np.zeros((n, n), dtype=np.int64)
    for t in range(delta):
        assert sorted(match[t].tolist()) == list(range(n))  # perfect matching
        for s in range(n):
            used[s, match[t, s]] += 1
            got_real[s, match[t, s]] += int(is_real[t, s])
    assert np.array_equal(used, total)
    assert np.array_equal(got_real, real)


def test_fallback_forced_by_environment(monkeypatch):
    import importlib

    monkeypatch.setenv("APUSIM_PURE_PYTHON", "1")
    mod = importlib.reload(kernels)
    try:
        assert mod.BACKEND == "python"
        assert mod.tree_sum_rows is _pykernels.tree_sum_rows
    finally:
        monkeypatch.delenv("APUSIM_PURE_PYTHON")
        importlib.reload(kernels)
