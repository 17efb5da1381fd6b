"""Regenerate the bundled layer-shape manifests in src/apusim/data."""
import json
import math
from pathlib import Path

DATA = Path(__file__).resolve().parent.parent / "src" / "apusim" / "data"
PE = 513


def tensor(shape, seed, scale=0.05):
    return {"shape": list(shape), "init": {"dist": "normal", "seed": seed, "scale": scale}}


def groups_for(c_in, c_out, k):
    """Fewest groups (dividing both channel counts) whose kernels fit one PE."""
    g = 1
    while (c_in // g) * k * k > PE or c_out // g > PE or c_in % g or c_out % g:
        g += 1
    return g


class Builder:
    def __init__(self):
        self.layers = []
        self.seed = 0

    def conv(self, name, c_in, c_out, k, stride=1, pad=None, relu=True):
        g = groups_for(c_in, c_out, k)
        self.seed += 1
        self.layers.append({"type": "Conv2D", "name": name, "stride": stride,
                            "padding": k // 2 if pad is None else pad, "groups": g,
                            "kernel": tensor([c_out, c_in // g, k, k], self.seed),
                            "bias": {"shape": [c_out], "init": {"dist": "zeros"}}})
        if relu:
            self.layers.append({"type": "ReLU", "name": name + "_relu"})

    def pool(self, name, window, stride):
        self.layers.append({"type": "MaxPool2D", "name": name, "window": window, "stride": stride})


def vgg19():
    b = Builder()
    c_in = 3
    for stage, (width, reps) in enumerate([(64, 2), (128, 2), (256, 4), (512, 4), (512, 4)], 1):
        for i in range(1, reps + 1):
            b.conv(f"conv{stage}_{i}", c_in, width, 3)
            c_in = width
        b.pool(f"pool{stage}", 2, 2)
    return {"name": "vgg19-group", "input_shape": [3, 224, 224], "layers": b.layers}


def resnet50():
    b = Builder()
    b.conv("conv1", 3, 64, 7, stride=2, pad=3)
    b.pool("pool1", 3, 2)
    c_in = 64
    for stage, (width, blocks) in enumerate([(64, 3), (128, 4), (256, 6), (512, 3)], 2):
        for i in range(1, blocks + 1):
            stride = 2 if (i == 1 and stage > 2) else 1
            p = f"res{stage}_{i}"
            b.conv(p + "a", c_in, width, 1)
            b.conv(p + "b", width, width, 3, stride=stride)
            b.conv(p + "c", width, 4 * width, 1)
            c_in = 4 * width
    return {"name": "resnet50-group", "input_shape": [3, 224, 224], "layers": b.layers}


FC_SUITE = {
    "name": "fc-suite",
    "config": {"num_pes": 9, "pe_rows": 512, "pe_cols": 512},
    "layers": [
        {"name": "alex6", "set": "alexnet-vgg", "outputs": 4096, "inputs": 9216},
        {"name": "alex7", "set": "alexnet-vgg", "outputs": 4096, "inputs": 4096},
        {"name": "alex8", "set": "alexnet-vgg", "outputs": 1000, "inputs": 4096},
        {"name": "vgg6", "set": "alexnet-vgg", "outputs": 4096, "inputs": 25088},
        {"name": "vgg7", "set": "alexnet-vgg", "outputs": 4096, "inputs": 4096},
        {"name": "vgg8", "set": "alexnet-vgg", "outputs": 1000, "inputs": 4096},
        {"name": "nt_we", "set": "extra", "outputs": 600, "inputs": 4096},
        {"name": "nt_wd", "set": "extra", "outputs": 8791, "inputs": 600},
        {"name": "nt_lstm", "set": "extra", "outputs": 2400, "inputs": 1201},
    ],
}


def mlp(name, sizes, seed):
    layers = []
    for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:]), 1):
        layers.append({"type": "FullyConnected", "name": f"fc{i}",
                       "weight": tensor([n_out, n_in], seed + i, 1 / math.sqrt(n_in)),
                       "bias": {"shape": [n_out], "init": {"dist": "zeros"}}})
        if i < len(sizes) - 1:
            layers.append({"type": "ReLU", "name": f"relu{i}"})
    return {"name": name, "input_shape": [sizes[0]], "layers": layers}


DEFAULT_CONFIG = {"num_pes": 10, "pe_rows": 400, "pe_cols": 400, "weight_bits": 4,
                  "activation_bits": 4, "clock_hz": 1e9, "interconnect": "mux",
                  "reload_cycles_per_row": 1, "overlap_route": False,
                  "host_op_cycles": {"add": 1, "compare": 1, "relu": 1, "requant": 2,
                                     "softmax": 20}}


def main():
    DATA.mkdir(exist_ok=True)
    for fname, d in (("vgg19_group.json", vgg19()), ("resnet50_group.json", resnet50()),
                     ("fc_suite.json", FC_SUITE), ("apu_default.json", DEFAULT_CONFIG),
                     ("fc4000.json", mlp("fc4000", [4000, 4000], 40)),
                     ("lenet300.json", mlp("lenet300", [784, 300, 100, 10], 300))):
        (DATA / fname).write_text(json.dumps(d, indent=1) + "\n")


if __name__ == "__main__":
    main()
