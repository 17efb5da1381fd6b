import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from apusim import model as m
from apusim import pruner as pr
from apusim import quant as q
from apusim.errors import ApuError, MappingError, ShapeMismatchError
from apusim.mapper import (AcceleratorConfig, HostOp, Reload, Round, conv_case, dump_program,
                           fold_batchnorm, load_config, lower_batchnorm, map_model,
                           prepare_model)


def fc_model(rows, cols, nb, seed=0):
    d = {"name": "fc", "input_shape": [cols], "layers": [
        {"type": "FullyConnected", "name": "fc", "weight": {"shape": [rows, cols],
                                                            "init": {"seed": seed}}}]}
    return pr.compress_model(m.model_from_dict(d, materialize=False), nb, seed)


def rounds(prog, name=None):
    return [p for p in prog.phases if isinstance(p, Round) and (name is None or p.layer == name)]


def test_config_defaults_and_validation(tmp_path):
    cfg = AcceleratorConfig()
    assert cfg.weight_sram_bits == 400 * 400 * 4
    assert AcceleratorConfig.from_dict(cfg.to_dict()) == cfg
    for bad in ({"num_pes": 0}, {"interconnect": "bus"}, {"clock_hz": 0},
                {"reload_cycles_per_row": -1}):
        with pytest.raises(ApuError):
            AcceleratorConfig(**bad)
    with pytest.raises(ApuError, match="unknown config fields"):
        AcceleratorConfig.from_dict({"pes": 3})
    missing = tmp_path / "nope.json"
    with pytest.raises(ApuError, match="nope.json"):
        load_config(missing)
    (tmp_path / "bad.json").write_text("{")
    with pytest.raises(ApuError, match="bad.json"):
        load_config(tmp_path / "bad.json")


def test_400_cycle_layer():
    prog = map_model(fc_model(4000, 4000, 10), AcceleratorConfig())
    (r,) = rounds(prog)
    assert r.compute_cycles("spatial") == 400 == r.compute_cycles("temporal")
    assert prog.utilization("fc") == 1.0
    assert prog.layers[0].folds == 1


def test_single_weight_layer():
    prog = map_model(fc_model(1, 1, 1), AcceleratorConfig())
    (r,) = rounds(prog)
    assert r.compute_cycles("spatial") == 1


def test_folding_twenty_blocks():
    prog = map_model(fc_model(2000, 2000, 20), AcceleratorConfig())
    rs = rounds(prog)
    assert len(rs) == 2 and sum(r.compute_cycles("spatial") for r in rs) == 200
    reloads = [p for p in prog.phases if isinstance(p, Reload)]
    assert len(reloads) == 2  # the first is the free preload
    assert prog.layers[0].folds == 2


@given(st.integers(1, 40), st.integers(1, 12))
def test_fold_count_formula(nb, pes):
    prog = map_model(fc_model(40, 40, nb), AcceleratorConfig(num_pes=pes, pe_rows=40, pe_cols=40))
    folds = -(-nb // pes)
    assert prog.layers[0].folds == folds == len(rounds(prog))
    # every block is placed exactly once
    placed = [k for r in rounds(prog) for _, k, _, _ in r.shape]
    assert sorted(placed) == sorted(f"fc/b{k}" for k in range(nb))
    for r in rounds(prog):
        assert len({pe for pe, _, _, _ in r.shape}) == len(r.shape)


def test_block_too_large():
    with pytest.raises(MappingError, match="fc"):
        map_model(fc_model(100, 100, 1), AcceleratorConfig(pe_rows=50, pe_cols=50))


def conv(c_in, c_out, k, groups=1, stride=1, padding=0, seed=0):
    rng = np.random.default_rng(seed)
    return m.Conv2D("conv", rng.normal(size=(c_out, c_in // groups, k, k)),
                    rng.normal(size=c_out), stride, padding, groups)


def test_conv_cases():
    cfg = AcceleratorConfig(pe_rows=513, pe_cols=513)
    assert conv_case(conv(32, 64, 3), cfg) == "I"
    assert conv_case(conv(64, 64, 3), cfg) == "II"
    assert conv_case(conv(8, 8, 3, groups=8), cfg) == "III"


@given(st.integers(1, 6), st.integers(1, 6), st.sampled_from([1, 3]), st.integers(1, 3))
def test_case_selection_total(cin, cout, k, g):
    cfg = AcceleratorConfig(pe_rows=16, pe_cols=16)
    layer = conv(cin * g, cout * g, k, groups=g)
    case = conv_case(layer, cfg)
    assert case in ("I", "II", "III")
    assert (case == "III") == (g > 1)


def test_conv_case_recorded_in_program():
    cfg = AcceleratorConfig(num_pes=4, pe_rows=28, pe_cols=28)
    for layer, case in ((conv(3, 4, 3), "I"), (conv(4, 4, 3), "II"),
                        (conv(4, 4, 3, groups=2), "III")):
        net = m.NetworkModel("c", (layer.kernel.shape[1] * layer.groups, 6, 6), (layer,))
        prog = map_model(net, cfg)
        assert prog.layers[0].case == case
    # case II needs host partial sums
    net = m.NetworkModel("c", (4, 6, 6), (conv(4, 4, 3),))
    hosts = [p for p in map_model(net, cfg).phases if isinstance(p, HostOp)]
    assert any(dict(h.counts).get("add") for h in hosts)


def test_group_kernel_too_large():
    cfg = AcceleratorConfig(pe_rows=8, pe_cols=8)
    layer = conv(4, 4, 3, groups=2)
    with pytest.raises(MappingError):
        map_model(m.NetworkModel("c", (4, 5, 5), (layer,)), cfg)


def test_fold_batchnorm_examples():
    fc = m.FullyConnected("fc", np.array([[1.0]]), np.array([0.0]))
    ident = m.BatchNorm("bn", np.ones(1), np.zeros(1), np.zeros(1), np.ones(1), 0.0)
    f = fold_batchnorm(ident, fc)
    assert np.array_equal(f.weight, fc.weight) and np.array_equal(f.bias, fc.bias)
    bn = m.BatchNorm("bn", np.array([2.0]), np.array([1.0]), np.zeros(1), np.ones(1), 0.0)
    f = fold_batchnorm(bn, fc)
    assert m.reference_eval(m.NetworkModel("n", (1,), (f,)), np.array([3.0]))[0] == 7.0
    with pytest.raises(ShapeMismatchError):
        fold_batchnorm(m.BatchNorm("bn", *(np.ones(2),) * 4), fc)


@pytest.mark.parametrize("seed", range(100))
def test_fold_equivalence(seed):
    rng = np.random.default_rng(seed)
    c = int(rng.integers(1, 6))
    bn = m.BatchNorm("bn", rng.uniform(0.5, 2, c), rng.normal(size=c), rng.normal(size=c),
                     rng.uniform(0.5, 2, c))
    if seed % 2:
        prev = conv(3, c, 3, seed=seed)
        shape = (3, 5, 5)
    else:
        prev = m.FullyConnected("fc", rng.normal(size=(c, 4)), rng.normal(size=c))
        shape = (4,)
    x = rng.normal(size=shape)
    two = m.NetworkModel("two", shape, (prev, bn))
    one = m.NetworkModel("one", shape, (fold_batchnorm(bn, prev),))
    assert np.allclose(m.reference_eval(two, x), m.reference_eval(one, x), rtol=0, atol=1e-9)
    assert np.allclose(m.reference_eval(prepare_model(two), x), m.reference_eval(two, x),
                       rtol=0, atol=1e-9)


def test_standalone_batchnorm_lowers_to_grouped_1x1(rng):
    bn = m.BatchNorm("bn", rng.uniform(0.5, 2, 3), rng.normal(size=3), rng.normal(size=3),
                     rng.uniform(0.5, 2, 3))
    low = lower_batchnorm(bn, (3, 4, 4))
    assert isinstance(low, m.Conv2D) and low.groups == 3 and low.kernel.shape == (3, 1, 1, 1)
    x = rng.normal(size=(3, 4, 4))
    assert np.allclose(m.reference_eval(m.NetworkModel("a", (3, 4, 4), (low,)), x),
                       m.batchnorm(x, bn), atol=1e-12)
    net = m.NetworkModel("b", (3,), (bn,))
    prep = prepare_model(net)
    assert np.allclose(m.reference_eval(prep, x[:, 0, 0]), m.reference_eval(net, x[:, 0, 0]))


def attention(heads, dm=8, dk=4, seed=0):
    rng = np.random.default_rng(seed)
    w = lambda *s: rng.normal(0, 0.3, s)
    return m.MultiHeadAttention("att", heads, dm, dk, w(heads, dm, dk), w(heads, dm, dk),
                                w(heads, dm, dk), w(heads, dk, dm))


@pytest.mark.parametrize("heads,folds,busy", [(1, 1, 1), (8, 1, 8), (16, 2, 10)])
def test_attention_head_assignment(heads, folds, busy):
    net = m.NetworkModel("a", (5, 8), (attention(heads),))
    prog = map_model(net, AcceleratorConfig(pe_rows=64, pe_cols=64))
    assert prog.layers[0].folds == folds
    pes = {pe for r in rounds(prog) for pe, _, _, _ in r.shape}
    assert len(pes) == busy
    for r in rounds(prog):
        for pe, key, _, _ in r.shape:
            head = int("".join(ch for ch in key.rsplit("/", 1)[1] if ch.isdigit()))
            assert pe == head % 10
    hosts = [p for p in prog.phases if isinstance(p, HostOp)]
    assert sum(dict(h.counts).get("softmax", 0) for h in hosts) == heads * 25


def test_attention_projection_too_large():
    net = m.NetworkModel("a", (5, 8), (attention(1, dm=8, dk=4),))
    with pytest.raises(MappingError, match="att"):
        map_model(net, AcceleratorConfig(pe_rows=8, pe_cols=8))


def test_pool_host_ops():
    cfg = AcceleratorConfig()
    net = m.NetworkModel("p", (1, 4, 4), (m.MaxPool2D("pool", 2, 2),))
    (h,) = [p for p in map_model(net, cfg).phases if isinstance(p, HostOp)]
    assert dict(h.counts) == {"compare": 16} and h.cycles == 16
    net = m.NetworkModel("p", (1, 4, 4), (m.MaxPool2D("pool", 1, 1),))
    (h,) = [p for p in map_model(net, cfg).phases if isinstance(p, HostOp)]
    assert h.cycles == 0
    prog = map_model(net, cfg)
    assert prog.utilization("pool") == 0.0


def test_group_conv_utilization_beats_pool():
    cfg = AcceleratorConfig(num_pes=9, pe_rows=513, pe_cols=513)
    net = m.load_model(m.bundled_path("vgg19_group.json"), materialize=False)
    prog = map_model(net, cfg)
    for info in prog.layers:
        if info.kind == "conv":
            assert prog.utilization(info.name) >= 0.95
        if info.kind == "pool":
            assert prog.utilization(info.name) < 0.95


def test_plan_wider_than_hardware(rng):
    net = m.mlp([4, 3])
    plan = q.calibrate(net, [rng.normal(size=4)], 8, 8)
    with pytest.raises(MappingError, match="8-bit"):
        map_model(net, AcceleratorConfig(), plan)


def test_dump_program_lists_phases():
    text = dump_program(map_model(fc_model(2000, 2000, 20), AcceleratorConfig()))
    assert "layer fc: fc, blocks=20, folds=2" in text
    assert text.count("Compute cycles=100") == 2
    assert "# totals" in text and "compute=200" in text
