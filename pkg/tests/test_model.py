import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from apusim import model as m
from apusim.errors import ModelError, ModelParseError, ShapeMismatchError, UnknownLayerError


def naive_conv(x, k, stride, pad, groups):
    """Six nested loops; independent of the library's slice-based convolution."""
    c_out, cgi, kh, kw = k.shape
    c_in, h, w = x.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((c_out, ho, wo))
    cgo = c_out // groups
    for o in range(c_out):
        g = o // cgo
        for i in range(ho):
            for j in range(wo):
                s = 0.0
                for c in range(cgi):
                    for a in range(kh):
                        for b in range(kw):
                            s += k[o, c, a, b] * xp[g * cgi + c, i * stride + a, j * stride + b]
                out[o, i, j] = s
    return out


@given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 3), st.integers(0, 2),
       st.integers(1, 2), st.integers(0, 2**32 - 1))
def test_conv2d_direct_matches_loop_oracle(groups, cgi, cgo, pad, stride, seed):
    r = np.random.default_rng(seed)
    kh = int(r.integers(1, 4))
    x = r.normal(size=(groups * cgi, 5, 6))
    k = r.normal(size=(groups * cgo, cgi, kh, kh))
    got = m.conv2d_direct(x, k, stride, pad, groups)
    assert np.allclose(got, naive_conv(x, k, stride, pad, groups))


def test_maxpool_matches_loop_oracle(rng):
    x = rng.normal(size=(2, 7, 5))
    got = m.maxpool2d(x, 3, 2)
    assert got.shape == (2, 3, 2)
    for c in range(2):
        for i in range(3):
            for j in range(2):
                assert got[c, i, j] == x[c, 2 * i:2 * i + 3, 2 * j:2 * j + 3].max()


def test_attention_matches_per_row_softmax(rng):
    h, dm, dk, s = 2, 4, 3, 5
    layer = m.MultiHeadAttention("a", h, dm, dk, rng.normal(size=(h, dm, dk)),
                                 rng.normal(size=(h, dm, dk)), rng.normal(size=(h, dm, dk)),
                                 rng.normal(size=(h, dk, dm)))
    x = rng.normal(size=(s, dm))
    out, _ = m.attention_real(layer, x)
    expect = np.zeros((s, dm))
    for i in range(h):
        qh, kh, vh = x @ layer.wq[i], x @ layer.wk[i], x @ layer.wv[i]
        for r in range(s):
            z = [float(qh[r] @ kh[c]) / math.sqrt(dk) for c in range(s)]
            e = [math.exp(v) for v in z]
            p = [v / sum(e) for v in e]
            expect[r] += sum(p[c] * vh[c] for c in range(s)) @ layer.wo[i]
    assert np.allclose(out, expect)


def test_shapes_propagate_and_mismatch_names_layers():
    net = m.mlp([5, 4, 3])
    assert net.shapes() == [(5,), (4,), (4,), (3,)]
    fc = m.FullyConnected("x", np.zeros((2, 7)), np.zeros(2))
    with pytest.raises(ShapeMismatchError, match="relu1"):
        m.NetworkModel("bad", (5,), net.layers[:2] + (fc,))


def test_duplicate_layer_names_rejected():
    with pytest.raises(ModelError, match="duplicate"):
        m.NetworkModel("d", (3,), (m.ReLU("r"), m.ReLU("r")))


def test_conv_output_shape():
    c = m.Conv2D("c", np.zeros((8, 2, 3, 3)), np.zeros(8), stride=2, padding=1, groups=2)
    assert c.output_shape((4, 9, 9)) == (8, 5, 5)
    with pytest.raises(ShapeMismatchError):
        c.output_shape((3, 9, 9))
    with pytest.raises(ModelError):
        m.Conv2D("c", np.zeros((7, 2, 3, 3)), np.zeros(7), groups=2)


def test_json_round_trip(tmp_path, rng):
    net = m.NetworkModel("n", (2, 6, 6), (
        m.Conv2D("c", rng.normal(size=(4, 1, 3, 3)), rng.normal(size=4), 1, 1, 2),
        m.BatchNorm("bn", rng.uniform(0.5, 1, 4), rng.normal(size=4), rng.normal(size=4),
                    rng.uniform(0.5, 1, 4)),
        m.ReLU("r"), m.MaxPool2D("p", 2, 2), m.Flatten("f"),
        m.FullyConnected("fc", rng.normal(size=(3, 36)), rng.normal(size=3))))
    p = tmp_path / "n.json"
    m.save_model(net, p)
    back = m.load_model(p)
    x = rng.normal(size=(2, 6, 6))
    assert np.array_equal(m.reference_eval(back, x), m.reference_eval(net, x))


def test_init_tensors_are_seeded():
    d = {"name": "s", "input_shape": [3], "layers": [
        {"type": "FullyConnected", "name": "fc",
         "weight": {"shape": [2, 3], "init": {"dist": "normal", "seed": 5, "scale": 0.5}}}]}
    a = m.model_from_dict(d).layers[0].weight
    b = m.model_from_dict(d).layers[0].weight
    assert np.array_equal(a, b)
    assert np.allclose(a, np.random.default_rng(5).normal(0, 0.5, (2, 3)))
    lazy = m.model_from_dict(d, materialize=False).layers[0].weight
    assert lazy.shape == (2, 3) and lazy.strides == (0, 0)


def test_parse_errors_carry_position(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text('{"name": "x",\n "layers": [}')
    with pytest.raises(ModelParseError) as e:
        m.load_model(p)
    assert e.value.line == 2


@pytest.mark.parametrize("kind", ["Sigmoid", "GELU", "Tanh"])
def test_unsupported_activation(kind):
    with pytest.raises(UnknownLayerError, match="only ReLU"):
        m.model_from_dict({"input_shape": [2], "layers": [{"type": kind, "name": "a"}]})


def test_unknown_layer_and_missing_fields():
    with pytest.raises(UnknownLayerError):
        m.model_from_dict({"input_shape": [2], "layers": [{"type": "LSTM", "name": "a"}]})
    with pytest.raises(ModelError, match="missing 'weight'"):
        m.model_from_dict({"input_shape": [2],
                           "layers": [{"type": "FullyConnected", "name": "a"}]})
    with pytest.raises(ShapeMismatchError):
        m.model_from_dict({"input_shape": [2], "layers": [
            {"type": "FullyConnected", "name": "a",
             "weight": {"shape": [2, 2], "data": [1, 2, 3]}}]})


def test_missing_model_file_names_path(tmp_path):
    with pytest.raises(ModelError, match="nope.json"):
        m.load_model(tmp_path / "nope.json")


def test_bundled_models_load():
    for name in ("lenet300.json", "fc4000.json", "vgg19_group.json", "resnet50_group.json"):
        net = m.load_model(m.bundled_path(name), materialize=False)
        assert net.layers
    lenet = m.load_model(m.bundled_path("lenet300.json"), materialize=False)
    assert [l.weight.shape for l in lenet.layers if isinstance(l, m.FullyConnected)] == \
        [(300, 784), (100, 300), (10, 100)]


def test_reference_eval_real_mode_is_plain_algebra(rng):
    net = m.mlp([4, 6, 3], seed=2)
    x = rng.normal(size=4)
    w1, b1 = net.layers[0].weight, net.layers[0].bias
    w2, b2 = net.layers[2].weight, net.layers[2].bias
    assert np.allclose(m.reference_eval(net, x), w2 @ np.maximum(w1 @ x + b1, 0) + b2)


def test_model_json_is_plain_json(tmp_path):
    net = m.mlp([3, 2])
    text = json.dumps(m.model_to_dict(net))
    assert json.loads(text)["layers"][0]["type"] == "FullyConnected"
