"""Random model generators shared by the simulator and acceptance tests."""
import numpy as np

from apusim import model as m
from apusim import pruner as pr
from apusim import quant as q
from apusim.mapper import AcceleratorConfig, prepare_model


def _bn(name, c, rng):
    return m.BatchNorm(name, rng.uniform(0.5, 1.5, c), rng.normal(0, 0.1, c),
                       rng.normal(0, 0.1, c), rng.uniform(0.5, 1.5, c))


def random_mlp(rng, max_layers=4, max_width=64):
    n = int(rng.integers(1, max_layers + 1))
    sizes = [int(rng.integers(2, max_width + 1)) for _ in range(n + 1)]
    layers = []
    for i in range(n):
        w = rng.normal(0, 1 / np.sqrt(sizes[i]), (sizes[i + 1], sizes[i]))
        layers.append(m.FullyConnected(f"fc{i}", w, rng.normal(0, 0.1, sizes[i + 1])))
        if rng.random() < 0.3:
            layers.append(_bn(f"bn{i}", sizes[i + 1], rng))
        if i < n - 1:
            layers.append(m.ReLU(f"relu{i}"))
    net = m.NetworkModel("rand_mlp", (sizes[0],), tuple(layers))
    blocks = {f"fc{i}": int(rng.integers(1, 9)) for i in range(n)}
    return pr.compress_model(net, blocks, seed=int(rng.integers(1 << 30)))


def random_cnn(rng):
    c_in = int(rng.integers(1, 5))
    g = int(rng.choice([1, 2]))
    c_in *= g
    c_mid = g * int(rng.integers(1, 5))
    hw = int(rng.integers(5, 9))
    k = int(rng.choice([1, 3]))
    kern = rng.normal(0, 0.4, (c_mid, c_in // g, k, k))
    layers = [m.Conv2D("conv", kern, rng.normal(0, 0.1, c_mid), 1, k // 2, g)]
    if rng.random() < 0.5:
        layers.append(_bn("bn", c_mid, rng))
    layers += [m.ReLU("relu"), m.MaxPool2D("pool", 2, 2), m.Flatten("flat")]
    flat = c_mid * (hw // 2) ** 2
    outs = int(rng.integers(2, 17))
    layers.append(m.FullyConnected("fc", rng.normal(0, 1 / np.sqrt(flat), (outs, flat)),
                                   np.zeros(outs)))
    net = m.NetworkModel("rand_cnn", (c_in, hw, hw), tuple(layers))
    return pr.compress_model(net, int(rng.integers(1, 9)), seed=int(rng.integers(1 << 30)))


def quantized_case(rng, net, bits):
    """Fold batch norms, calibrate, and pick a config every block fits."""
    net = prepare_model(net)
    xs = [rng.normal(size=net.input_shape) for _ in range(4)]
    plan = q.calibrate(net, xs, bits, bits)
    cfg = AcceleratorConfig(num_pes=int(rng.integers(1, 9)), pe_rows=64, pe_cols=64,
                            weight_bits=8, activation_bits=8)
    return net, plan, cfg, xs
