"""Network intermediate representation, JSON format, and the reference evaluator.

A model file looks like::

    {"name": "demo", "input_shape": [4],
     "layers": [{"type": "FullyConnected", "name": "fc1",
                 "weight": {"shape": [4, 4], "data": [...]},
                 "bias": {"shape": [4], "data": [...]}},
                {"type": "ReLU", "name": "relu1"}]}

Tensors are ``{"shape": [...], "data": [...]}`` with ``data`` flattened in
row-major order, or ``{"shape": [...], "init": {"dist": "normal", "seed": 1,
"scale": 0.05}}`` for seeded synthetic weights.  Activations are laid out as
``(C, H, W)`` for convolutional layers, ``(features,)`` for fully connected
layers and ``(seq, d_model)`` for attention.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import quant as q
from .errors import ModelError, ModelParseError, ShapeMismatchError, UnknownLayerError

UNSUPPORTED_ACTIVATIONS = {"Sigmoid", "Tanh", "GELU", "Softmax", "LeakyReLU", "ELU", "SiLU",
                           "Swish", "Softplus", "HardTanh", "PReLU"}


def _arr(x, dtype=np.float64):
    return np.asarray(x, dtype=dtype)


def _frozen(a):
    a = np.array(a, dtype=np.float64) if not isinstance(a, np.ndarray) else a
    if a.flags.writeable and a.base is None:
        a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class FullyConnected:
    name: str
    weight: np.ndarray  # (outputs, inputs)
    bias: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "weight", _frozen(self.weight))
        object.__setattr__(self, "bias", _frozen(self.bias))
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ShapeMismatchError(f"{self.name}: weight must be 2-D and bias match its rows")

    def output_shape(self, in_shape):
        if tuple(in_shape) != (self.weight.shape[1],):
            raise ShapeMismatchError(
                f"{self.name} expects input ({self.weight.shape[1]},), got {tuple(in_shape)}")
        return (self.weight.shape[0],)


@dataclass(frozen=True, eq=False)
class Conv2D:
    name: str
    kernel: np.ndarray  # (C_out, C_in / groups, H_k, W_k)
    bias: np.ndarray
    stride: int = 1
    padding: int = 0
    groups: int = 1

    def __post_init__(self):
        object.__setattr__(self, "kernel", _frozen(self.kernel))
        object.__setattr__(self, "bias", _frozen(self.bias))
        if self.kernel.ndim != 4:
            raise ShapeMismatchError(f"{self.name}: kernel must be 4-D")
        if self.groups < 1 or self.kernel.shape[0] % self.groups:
            raise ModelError(f"{self.name}: C_out={self.kernel.shape[0]} not divisible by "
                             f"groups={self.groups}")
        if self.bias.shape != (self.kernel.shape[0],):
            raise ShapeMismatchError(f"{self.name}: bias must have C_out entries")
        if self.stride < 1 or self.padding < 0:
            raise ModelError(f"{self.name}: stride must be >= 1 and padding >= 0")

    @property
    def c_out(self):
        return self.kernel.shape[0]

    @property
    def c_in(self):
        return self.kernel.shape[1] * self.groups

    def output_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[0] != self.c_in:
            raise ShapeMismatchError(
                f"{self.name} expects ({self.c_in}, H, W) input, got {tuple(in_shape)}")
        _, h, w = in_shape
        kh, kw = self.kernel.shape[2:]
        ho = (h + 2 * self.padding - kh) // self.stride + 1
        wo = (w + 2 * self.padding - kw) // self.stride + 1
        if ho < 1 or wo < 1:
            raise ShapeMismatchError(f"{self.name}: kernel larger than padded input")
        return (self.c_out, ho, wo)


@dataclass(frozen=True, eq=False)
class MaxPool2D:
    name: str
    window: int
    stride: int

    def output_shape(self, in_shape):
        if len(in_shape) != 3:
            raise ShapeMismatchError(f"{self.name} expects (C, H, W) input, got {tuple(in_shape)}")
        c, h, w = in_shape
        ho = (h - self.window) // self.stride + 1
        wo = (w - self.window) // self.stride + 1
        if ho < 1 or wo < 1:
            raise ShapeMismatchError(f"{self.name}: window larger than input")
        return (c, ho, wo)


@dataclass(frozen=True, eq=False)
class BatchNorm:
    name: str
    gamma: np.ndarray
    beta: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    eps: float = 1e-5

    def __post_init__(self):
        for f in ("gamma", "beta", "mean", "var"):
            object.__setattr__(self, f, _frozen(getattr(self, f)))
        n = self.gamma.shape
        if not (self.beta.shape == self.mean.shape == self.var.shape == n) or len(n) != 1:
            raise ShapeMismatchError(f"{self.name}: batch-norm parameters must be equal 1-D")
        if np.any(self.var + self.eps <= 0):
            raise ModelError(f"{self.name}: variance + epsilon must be positive")

    @property
    def channels(self):
        return self.gamma.shape[0]

    def output_shape(self, in_shape):
        if not in_shape or in_shape[0] != self.channels:
            raise ShapeMismatchError(
                f"{self.name} has {self.channels} channels, input is {tuple(in_shape)}")
        return tuple(in_shape)


@dataclass(frozen=True, eq=False)
class MultiHeadAttention:
    """Self-attention: ``sum_i softmax(X Wq_i (X Wk_i)^T / sqrt(d_k)) X Wv_i Wo_i``."""

    name: str
    num_heads: int
    d_model: int
    d_k: int
    wq: np.ndarray  # (heads, d_model, d_k)
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray  # (heads, d_k, d_model)

    def __post_init__(self):
        for f in ("wq", "wk", "wv", "wo"):
            object.__setattr__(self, f, _frozen(getattr(self, f)))
        proj = (self.num_heads, self.d_model, self.d_k)
        if self.wq.shape != proj or self.wk.shape != proj or self.wv.shape != proj:
            raise ShapeMismatchError(f"{self.name}: Q/K/V projections must be {proj}")
        if self.wo.shape != (self.num_heads, self.d_k, self.d_model):
            raise ShapeMismatchError(
                f"{self.name}: output projection must be {(self.num_heads, self.d_k, self.d_model)}")

    def output_shape(self, in_shape):
        if len(in_shape) != 2 or in_shape[1] != self.d_model:
            raise ShapeMismatchError(
                f"{self.name} expects (seq, {self.d_model}) input, got {tuple(in_shape)}")
        return tuple(in_shape)


@dataclass(frozen=True, eq=False)
class ReLU:
    name: str

    def output_shape(self, in_shape):
        return tuple(in_shape)


@dataclass(frozen=True, eq=False)
class Flatten:
    name: str

    def output_shape(self, in_shape):
        return (int(np.prod(in_shape)),)


@dataclass(frozen=True, eq=False)
class BlockDiagonalLayer:
    """A fully connected layer compressed into independent dense blocks.

    Block ``k`` maps inputs ``col_perm[col_splits[k]:col_splits[k+1]]`` to
    outputs ``row_perm[row_splits[k]:row_splits[k+1]]``; every other weight is
    zero.
    """

    name: str
    blocks: tuple
    biases: tuple
    row_perm: np.ndarray
    col_perm: np.ndarray
    row_splits: tuple
    col_splits: tuple
    quant: q.QuantSpec | None = None

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(_frozen(b) for b in self.blocks))
        object.__setattr__(self, "biases", tuple(_frozen(b) for b in self.biases))
        object.__setattr__(self, "row_perm", _frozen(np.asarray(self.row_perm, dtype=np.int64)))
        object.__setattr__(self, "col_perm", _frozen(np.asarray(self.col_perm, dtype=np.int64)))
        object.__setattr__(self, "row_splits", tuple(int(v) for v in self.row_splits))
        object.__setattr__(self, "col_splits", tuple(int(v) for v in self.col_splits))
        nb = len(self.blocks)
        if len(self.biases) != nb or len(self.row_splits) != nb + 1 or len(self.col_splits) != nb + 1:
            raise ModelError(f"{self.name}: inconsistent block count")
        rows, cols = self.original_shape
        if sorted(self.row_perm.tolist()) != list(range(rows)) or \
                sorted(self.col_perm.tolist()) != list(range(cols)):
            raise ModelError(f"{self.name}: row/col permutations are not permutations")
        for k, (b, bb) in enumerate(zip(self.blocks, self.biases)):
            shape = (self.row_splits[k + 1] - self.row_splits[k],
                     self.col_splits[k + 1] - self.col_splits[k])
            if b.shape != shape or bb.shape != (shape[0],):
                raise ShapeMismatchError(f"{self.name}: block {k} should be {shape}, got {b.shape}")

    @property
    def num_blocks(self):
        return len(self.blocks)

    @property
    def original_shape(self):
        return (len(self.row_perm), len(self.col_perm))

    def rows_of(self, k):
        return self.row_perm[self.row_splits[k]:self.row_splits[k + 1]]

    def cols_of(self, k):
        return self.col_perm[self.col_splits[k]:self.col_splits[k + 1]]

    def mask(self):
        m = np.zeros(self.original_shape, dtype=bool)
        for k in range(self.num_blocks):
            m[np.ix_(self.rows_of(k), self.cols_of(k))] = True
        return m

    def dense(self):
        """Reassemble ``(W, b)`` in the original index space."""
        w = np.zeros(self.original_shape)
        b = np.zeros(self.original_shape[0])
        for k in range(self.num_blocks):
            w[np.ix_(self.rows_of(k), self.cols_of(k))] = self.blocks[k]
            b[self.rows_of(k)] = self.biases[k]
        return w, b

    def output_shape(self, in_shape):
        if tuple(in_shape) != (self.original_shape[1],):
            raise ShapeMismatchError(
                f"{self.name} expects input ({self.original_shape[1]},), got {tuple(in_shape)}")
        return (self.original_shape[0],)


LAYER_TYPES = {
    "FullyConnected": FullyConnected,
    "Conv2D": Conv2D,
    "MaxPool2D": MaxPool2D,
    "BatchNorm": BatchNorm,
    "MultiHeadAttention": MultiHeadAttention,
    "ReLU": ReLU,
    "Flatten": Flatten,
    "BlockDiagonal": BlockDiagonalLayer,
}
TYPE_NAMES = {cls: name for name, cls in LAYER_TYPES.items()}
MAC_LAYERS = (FullyConnected, Conv2D, BlockDiagonalLayer, MultiHeadAttention)


@dataclass(frozen=True, eq=False)
class NetworkModel:
    name: str
    input_shape: tuple
    layers: tuple = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        seen = set()
        for layer in self.layers:
            if layer.name in seen:
                raise ModelError(f"duplicate layer name {layer.name!r}")
            seen.add(layer.name)
        self.shapes()

    def shapes(self):
        """Input shape of every layer followed by the model output shape."""
        shapes = [self.input_shape]
        prev = "input"
        for layer in self.layers:
            try:
                shapes.append(tuple(layer.output_shape(shapes[-1])))
            except ShapeMismatchError as exc:
                raise ShapeMismatchError(
                    f"shape mismatch between {prev!r} (output {shapes[-1]}) and "
                    f"{layer.name!r}: {exc}") from None
            prev = layer.name
        return shapes

    @property
    def output_shape(self):
        return self.shapes()[-1]

    def layer(self, name):
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise KeyError(name)

    def replace(self, layers):
        return NetworkModel(self.name, self.input_shape, tuple(layers))


def layer_weights(layer):
    """Every real weight of a layer as one flat array (``None`` if weightless)."""
    if isinstance(layer, FullyConnected):
        return layer.weight.ravel()
    if isinstance(layer, Conv2D):
        return layer.kernel.ravel()
    if isinstance(layer, BlockDiagonalLayer):
        return np.concatenate([b.ravel() for b in layer.blocks])
    if isinstance(layer, MultiHeadAttention):
        return np.concatenate([w.ravel() for w in (layer.wq, layer.wk, layer.wv, layer.wo)])
    return None


# ---------------------------------------------------------------- JSON format

def decode_tensor(d, *, materialize=True, where="tensor"):
    if not isinstance(d, dict) or "shape" not in d:
        raise ModelError(f"{where}: tensor must be an object with a 'shape'")
    shape = tuple(int(s) for s in d["shape"])
    n = int(np.prod(shape)) if shape else 1
    if "data" in d:
        data = np.asarray(d["data"], dtype=np.float64)
        if data.size != n:
            raise ShapeMismatchError(f"{where}: {data.size} elements for shape {list(shape)}")
        return data.reshape(shape)
    init = d.get("init")
    if init is None:
        raise ModelError(f"{where}: tensor needs 'data' or 'init'")
    if not materialize:
        return np.broadcast_to(np.float64(0.0), shape)
    dist = init.get("dist", "normal")
    rng = np.random.default_rng(int(init.get("seed", 0)))
    scale = float(init.get("scale", 1.0))
    if dist == "normal":
        return rng.normal(0.0, scale, size=shape)
    if dist == "uniform":
        return rng.uniform(-scale, scale, size=shape)
    if dist == "zeros":
        return np.zeros(shape)
    if dist == "ones":
        return np.ones(shape)
    if dist == "constant":
        return np.full(shape, float(init.get("value", 0.0)))
    raise ModelError(f"{where}: unknown init distribution {dist!r}")


def encode_tensor(a):
    a = np.asarray(a, dtype=np.float64)
    return {"shape": list(a.shape), "data": a.ravel().tolist()}


def _layer_from_dict(d, materialize, dec=None):
    if not isinstance(d, dict) or "type" not in d:
        raise ModelError("every layer needs a 'type'")
    kind = d["type"]
    name = d.get("name")
    if not name:
        raise ModelError(f"layer of type {kind!r} needs a 'name'")
    if kind in UNSUPPORTED_ACTIVATIONS:
        raise UnknownLayerError(
            f"layer {name!r}: activation {kind!r} is not supported; only ReLU is")
    if kind not in LAYER_TYPES or kind == "BlockDiagonal":
        raise UnknownLayerError(f"layer {name!r}: unknown layer type {kind!r}")

    def t(key):
        if key not in d:
            raise ModelError(f"layer {name!r}: missing {key!r}")
        if dec is not None:
            return dec(d[key], f"{name}.{key}")
        return decode_tensor(d[key], materialize=materialize, where=f"{name}.{key}")

    if kind == "FullyConnected":
        w = t("weight")
        b = t("bias") if "bias" in d else np.zeros(w.shape[0])
        return FullyConnected(name, w, b)
    if kind == "Conv2D":
        k = t("kernel")
        b = t("bias") if "bias" in d else np.zeros(k.shape[0])
        return Conv2D(name, k, b, int(d.get("stride", 1)), int(d.get("padding", 0)),
                      int(d.get("groups", 1)))
    if kind == "MaxPool2D":
        window = int(d.get("window", 2))
        return MaxPool2D(name, window, int(d.get("stride", window)))
    if kind == "BatchNorm":
        return BatchNorm(name, t("gamma"), t("beta"), t("mean"), t("var"),
                         float(d.get("eps", 1e-5)))
    if kind == "MultiHeadAttention":
        return MultiHeadAttention(name, int(d["num_heads"]), int(d["d_model"]), int(d["d_k"]),
                                  t("wq"), t("wk"), t("wv"), t("wo"))
    if kind == "ReLU":
        return ReLU(name)
    return Flatten(name)


def model_from_dict(d, *, materialize=True) -> NetworkModel:
    if not isinstance(d, dict):
        raise ModelError("model JSON must be an object")
    for key in ("input_shape", "layers"):
        if key not in d:
            raise ModelError(f"model JSON missing {key!r}")
    layers = [_layer_from_dict(ld, materialize) for ld in d["layers"]]
    return NetworkModel(d.get("name", "model"), tuple(d["input_shape"]), tuple(layers))


def layer_to_dict(layer, enc=encode_tensor) -> dict:
    kind = TYPE_NAMES[type(layer)]
    d = {"type": kind, "name": layer.name}
    if isinstance(layer, FullyConnected):
        d.update(weight=enc(layer.weight), bias=enc(layer.bias))
    elif isinstance(layer, Conv2D):
        d.update(kernel=enc(layer.kernel), bias=enc(layer.bias),
                 stride=layer.stride, padding=layer.padding, groups=layer.groups)
    elif isinstance(layer, MaxPool2D):
        d.update(window=layer.window, stride=layer.stride)
    elif isinstance(layer, BatchNorm):
        d.update(gamma=enc(layer.gamma), beta=enc(layer.beta),
                 mean=enc(layer.mean), var=enc(layer.var), eps=layer.eps)
    elif isinstance(layer, MultiHeadAttention):
        d.update(num_heads=layer.num_heads, d_model=layer.d_model, d_k=layer.d_k,
                 wq=enc(layer.wq), wk=enc(layer.wk),
                 wv=enc(layer.wv), wo=enc(layer.wo))
    elif isinstance(layer, BlockDiagonalLayer):
        raise ModelError("compressed layers are stored in .apu archives, not model JSON")
    return d


def model_to_dict(model: NetworkModel) -> dict:
    return {"name": model.name, "input_shape": list(model.input_shape),
            "layers": [layer_to_dict(layer) for layer in model.layers]}


def load_model(path, *, materialize=True) -> NetworkModel:
    """Read and validate a model JSON file."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ModelError(f"cannot read model file {str(path)!r}: {exc.strerror}") from None
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ModelParseError(f"invalid JSON in {path}: {exc.msg}", exc.lineno, exc.colno) from None
    return model_from_dict(d, materialize=materialize)


def save_model(model: NetworkModel, path):
    Path(path).write_text(json.dumps(model_to_dict(model)))


def bundled_path(name: str) -> Path:
    return Path(__file__).parent / "data" / name


def mlp(sizes, seed=0, name="mlp", scale=None) -> NetworkModel:
    """Dense ReLU MLP with He-style seeded initial weights."""
    rng = np.random.default_rng(seed)
    layers = []
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        s = scale if scale is not None else math.sqrt(2.0 / fan_in)
        layers.append(FullyConnected(f"fc{i + 1}", rng.normal(0, s, (fan_out, fan_in)),
                                     np.zeros(fan_out)))
        if i < len(sizes) - 2:
            layers.append(ReLU(f"relu{i + 1}"))
    return NetworkModel(name, (sizes[0],), tuple(layers))


# ------------------------------------------------------------ reference math

def conv2d_direct(x, kernel, stride, padding, groups, dtype=np.float64):
    """Convolution as a sum of shifted, strided input slices (no unrolling)."""
    x = np.asarray(x, dtype=dtype)
    k = np.asarray(kernel, dtype=dtype)
    c_out, cg_in, kh, kw = k.shape
    c_in, h, w = x.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    xp = np.zeros((c_in, h + 2 * padding, w + 2 * padding), dtype=dtype)
    xp[:, padding:padding + h, padding:padding + w] = x
    out = np.zeros((c_out, ho, wo), dtype=dtype)
    cg_out = c_out // groups
    for g in range(groups):
        xs = xp[g * cg_in:(g + 1) * cg_in]
        ks = k[g * cg_out:(g + 1) * cg_out]
        for i in range(kh):
            for j in range(kw):
                patch = xs[:, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride]
                out[g * cg_out:(g + 1) * cg_out] += np.tensordot(ks[:, :, i, j], patch, axes=1)
    return out


def maxpool2d(x, window, stride):
    c, h, w = x.shape
    ho = (h - window) // stride + 1
    wo = (w - window) // stride + 1
    out = None
    for i in range(window):
        for j in range(window):
            s = x[:, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride]
            out = s.copy() if out is None else np.maximum(out, s)
    return out


def batchnorm(x, bn: BatchNorm):
    shape = (-1,) + (1,) * (x.ndim - 1)
    inv = bn.gamma / np.sqrt(bn.var + bn.eps)
    return (x - bn.mean.reshape(shape)) * inv.reshape(shape) + bn.beta.reshape(shape)


def attention_real(layer: MultiHeadAttention, x):
    out = np.zeros_like(x)
    parts = {"qkv": 0.0, "head": 0.0}
    for h in range(layer.num_heads):
        qh, kh, vh = x @ layer.wq[h], x @ layer.wk[h], x @ layer.wv[h]
        z = qh @ kh.T / math.sqrt(layer.d_k)
        z = z - z.max(axis=1, keepdims=True)
        p = np.exp(z)
        p = p / p.sum(axis=1, keepdims=True)
        head = p @ vh
        out = out + head @ layer.wo[h]
        parts["qkv"] = max(parts["qkv"], float(np.max(np.abs(np.stack([qh, kh, vh])))))
        parts["head"] = max(parts["head"], float(np.max(np.abs(head))))
    return out, parts


def _eval_real_layer(layer, x):
    if isinstance(layer, FullyConnected):
        return layer.weight @ x + layer.bias, None
    if isinstance(layer, BlockDiagonalLayer):
        w, b = layer.dense()
        return w @ x + b, None
    if isinstance(layer, Conv2D):
        y = conv2d_direct(x, layer.kernel, layer.stride, layer.padding, layer.groups)
        return y + layer.bias[:, None, None], None
    if isinstance(layer, MaxPool2D):
        return maxpool2d(x, layer.window, layer.stride), None
    if isinstance(layer, BatchNorm):
        return batchnorm(x, layer), None
    if isinstance(layer, MultiHeadAttention):
        return attention_real(layer, x)
    if isinstance(layer, ReLU):
        return np.maximum(x, 0.0), None
    if isinstance(layer, Flatten):
        return x.reshape(-1), None
    raise UnknownLayerError(f"cannot evaluate {type(layer).__name__}")


def trace_real(model: NetworkModel, x):
    """Real-mode forward pass keeping every layer output (used for calibration)."""
    x = _arr(x)
    if x.shape != model.input_shape:
        raise ShapeMismatchError(f"input shape {x.shape} does not match model {model.input_shape}")
    outputs, internal = {}, {}
    for layer in model.layers:
        x, parts = _eval_real_layer(layer, x)
        outputs[layer.name] = x
        if parts is not None:
            internal[layer.name] = parts
    return {"outputs": outputs, "internal": internal, "result": x}


def _weights_of(layer):
    if isinstance(layer, FullyConnected):
        return layer.weight, layer.bias
    if isinstance(layer, Conv2D):
        return layer.kernel, layer.bias
    w, b = layer.dense()
    return w, b


def _eval_quant_layer(layer, codes, in_spec, plan: q.QuantPlan):
    """Integer evaluation of one layer; returns ``(codes, output spec)``."""
    if isinstance(layer, (ReLU, MaxPool2D, Flatten)):
        if isinstance(layer, ReLU):
            return np.maximum(codes, 0), in_spec
        if isinstance(layer, MaxPool2D):
            return maxpool2d(codes, layer.window, layer.stride), in_spec
        return codes.reshape(-1), in_spec
    if isinstance(layer, BatchNorm):
        raise ModelError(f"batch norm {layer.name!r} must be folded or lowered before "
                         "quantized evaluation")
    lq = plan.layers.get(layer.name)
    if lq is None:
        raise ModelError(f"quantization plan has no entry for layer {layer.name!r}")
    if isinstance(layer, MultiHeadAttention):
        return _attention_quant(layer, codes, in_spec, lq), lq.output
    w, b = _weights_of(layer)
    p = q.integer_params(w, b, in_spec, lq.weight, lq.output)
    levels = p.levels
    if isinstance(layer, BlockDiagonalLayer):
        levels = levels * layer.mask()
    if isinstance(layer, Conv2D):
        acc = conv2d_direct(codes, levels, layer.stride, layer.padding, layer.groups,
                            dtype=np.int64)
        acc = acc + p.bias[:, None, None]
    else:
        acc = levels @ codes + p.bias
    return q.requantize(acc, p.mult, p.shift, p.lo, p.hi), lq.output


def _attention_quant(layer, codes, in_spec, lq):
    wspec = lq.weight
    qkv, prob, head_spec = lq.internal["qkv"], lq.internal["prob"], lq.internal["head"]
    _, lscale, _ = q.weight_levels(wspec)
    m_qkv, s_qkv, lo, hi = q.rescale_params(lscale * in_spec.scale, qkv)
    m_head, s_head, hlo, hhi = q.rescale_params(prob.scale * qkv.scale, head_spec)
    m_out, s_out, olo, ohi = q.rescale_params(head_spec.scale * lscale, lq.output)
    total = np.zeros(codes.shape, dtype=np.int64)
    for h in range(layer.num_heads):
        wq = q.weight_to_levels(layer.wq[h], wspec)[0]
        wk = q.weight_to_levels(layer.wk[h], wspec)[0]
        wv = q.weight_to_levels(layer.wv[h], wspec)[0]
        wo = q.weight_to_levels(layer.wo[h], wspec)[0]
        qh = q.requantize(codes @ wq, m_qkv, s_qkv, lo, hi)
        kh = q.requantize(codes @ wk, m_qkv, s_qkv, lo, hi)
        vh = q.requantize(codes @ wv, m_qkv, s_qkv, lo, hi)
        probs = q.host_softmax_codes(qh @ kh.T, qkv.scale * qkv.scale, layer.d_k, prob)
        head = q.requantize(probs @ vh, m_head, s_head, hlo, hhi)
        total = total + head @ wo
    return q.requantize(total, m_out, s_out, olo, ohi)


def reference_eval(model: NetworkModel, x, quant: q.QuantPlan | None = None):
    """Evaluate ``model`` layer by layer in declaration order.

    Without ``quant`` the computation is float64.  With a plan the input is
    quantized to activation codes and every layer runs in exact integer
    arithmetic; the integer output codes are returned (see
    :func:`apusim.quant.dequantize`).
    """
    x = _arr(x)
    if x.shape != model.input_shape:
        raise ShapeMismatchError(f"input shape {x.shape} does not match model {model.input_shape}")
    if quant is None:
        for layer in model.layers:
            x, _ = _eval_real_layer(layer, x)
        return x
    codes = q.quantize_array(x, quant.input)
    spec = quant.input
    for layer in model.layers:
        codes, spec = _eval_quant_layer(layer, codes, spec, quant)
    return codes


def output_spec(model: NetworkModel, plan: q.QuantPlan) -> q.QuantSpec:
    """Activation quantizer of the model output under ``plan``."""
    spec = plan.input
    for layer in model.layers:
        if layer.name in plan.layers:
            spec = plan.layers[layer.name].output
    return spec
