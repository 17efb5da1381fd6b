"""Structured pruning: block masks, mask-constrained training, block packing.

A mask is a block-diagonal pattern of all-ones blocks hidden behind seeded
row and column permutations.  Training re-applies the mask after every
optimizer step, so once training ends the weights can be gathered into
``num_blocks`` independent dense sub-matrices (:func:`pack_blocks`).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import quant as q
from .errors import ApuError, MaskError, TrainingDiverged
from .model import BlockDiagonalLayer, FullyConnected, NetworkModel, ReLU

__all__ = [
    "BlockMask", "BlockDiagonalLayer", "even_splits", "generate_mask", "apply_mask",
    "pack_blocks", "unpack_blocks", "train_structured", "make_spiral", "predict", "accuracy",
]


def even_splits(n: int, k: int) -> tuple[int, ...]:
    """Boundaries of ``k`` contiguous parts of ``range(n)`` whose sizes differ by <= 1."""
    base, extra = divmod(n, k)
    bounds = [0]
    for i in range(k):
        bounds.append(bounds[-1] + base + (1 if i < extra else 0))
    return tuple(bounds)


@dataclass(frozen=True, eq=False)
class BlockMask:
    num_blocks: int
    row_perm: np.ndarray
    col_perm: np.ndarray
    mask: np.ndarray
    row_splits: tuple
    col_splits: tuple

    @property
    def shape(self):
        return self.mask.shape

    def rows_of(self, k):
        return self.row_perm[self.row_splits[k]:self.row_splits[k + 1]]

    def cols_of(self, k):
        return self.col_perm[self.col_splits[k]:self.col_splits[k + 1]]

    def permuted(self):
        """The mask with rows and columns gathered into block order."""
        return self.mask[np.ix_(self.row_perm, self.col_perm)]


def _build_mask(rows, cols, num_blocks, row_perm, col_perm):
    rs, cs = even_splits(rows, num_blocks), even_splits(cols, num_blocks)
    m = np.zeros((rows, cols), dtype=bool)
    for k in range(num_blocks):
        m[np.ix_(row_perm[rs[k]:rs[k + 1]], col_perm[cs[k]:cs[k + 1]])] = True
    m.setflags(write=False)
    row_perm.setflags(write=False)
    col_perm.setflags(write=False)
    return BlockMask(num_blocks, row_perm, col_perm, m, rs, cs)


def _permutations(rows, cols, num_blocks, seed):
    if num_blocks < 1:
        raise MaskError("num_blocks must be at least 1")
    if num_blocks > min(rows, cols):
        raise MaskError(f"num_blocks={num_blocks} exceeds min(rows, cols)={min(rows, cols)}")
    if seed is None:
        rp, cp = np.arange(rows), np.arange(cols)
    else:
        rng = np.random.default_rng(seed)
        rp, cp = rng.permutation(rows), rng.permutation(cols)
    return rp.astype(np.int64), cp.astype(np.int64)


def generate_mask(rows: int, cols: int, num_blocks: int, seed: int | None = 0) -> BlockMask:
    """Random block-diagonal mask; ``seed=None`` keeps both permutations identity."""
    rp, cp = _permutations(rows, cols, num_blocks, seed)
    return _build_mask(rows, cols, num_blocks, rp, cp)


def _shape_only_blocks(layer: FullyConnected, num_blocks, seed):
    """Block layout of a layer whose weights were never materialized."""
    rows, cols = layer.weight.shape
    rp, cp = _permutations(rows, cols, num_blocks, seed)
    rs, cs = even_splits(rows, num_blocks), even_splits(cols, num_blocks)
    zero = np.float64(0.0)
    blocks = [np.broadcast_to(zero, (rs[k + 1] - rs[k], cs[k + 1] - cs[k]))
              for k in range(num_blocks)]
    biases = [np.broadcast_to(zero, (rs[k + 1] - rs[k],)) for k in range(num_blocks)]
    return BlockDiagonalLayer(layer.name, tuple(blocks), tuple(biases), rp, cp, rs, cs)


def full_mask(rows: int, cols: int) -> BlockMask:
    return _build_mask(rows, cols, 1, np.arange(rows, dtype=np.int64),
                       np.arange(cols, dtype=np.int64))


def apply_mask(w, mask: BlockMask) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    if w.shape != mask.shape:
        raise MaskError(f"weight shape {w.shape} does not match mask shape {mask.shape}")
    return np.where(mask.mask, w, 0.0)


def pack_blocks(w, mask: BlockMask, quant: q.QuantSpec | None = None, *, bias=None,
                name: str = "fc") -> BlockDiagonalLayer:
    """Gather masked weights into the mask's dense diagonal blocks."""
    w = np.asarray(w, dtype=np.float64)
    if w.shape != mask.shape:
        raise MaskError(f"weight shape {w.shape} does not match mask shape {mask.shape}")
    bad = np.argwhere((w != 0) & ~mask.mask)
    if len(bad):
        shown = ", ".join(f"({r}, {c})" for r, c in bad[:10])
        more = f" and {len(bad) - 10} more" if len(bad) > 10 else ""
        raise MaskError(f"weights violate the mask at {shown}{more}")
    b = np.zeros(w.shape[0]) if bias is None else np.asarray(bias, dtype=np.float64)
    blocks, biases = [], []
    for k in range(mask.num_blocks):
        rows, cols = mask.rows_of(k), mask.cols_of(k)
        blocks.append(w[np.ix_(rows, cols)].copy())
        biases.append(b[rows].copy())
    return BlockDiagonalLayer(name, tuple(blocks), tuple(biases), mask.row_perm, mask.col_perm,
                              mask.row_splits, mask.col_splits, quant)


def unpack_blocks(layer: BlockDiagonalLayer) -> np.ndarray:
    return layer.dense()[0]


def mask_of(layer: BlockDiagonalLayer) -> BlockMask:
    return BlockMask(layer.num_blocks, layer.row_perm, layer.col_perm, layer.mask(),
                     layer.row_splits, layer.col_splits)


# ------------------------------------------------------------------ training

def make_spiral(n_per_class: int = 200, noise: float = 0.15, turns: float = 1.0,
                seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Two interleaved 2-D spirals, labels 0 and 1."""
    rng = np.random.default_rng(seed)
    xs, ys = [], []
    for c in range(2):
        t = np.sqrt(rng.uniform(0.05, 1.0, n_per_class))
        theta = 2 * math.pi * turns * t + c * math.pi
        pts = np.stack([t * np.cos(theta), t * np.sin(theta)], axis=1)
        xs.append(pts + rng.normal(0, noise * 0.1, pts.shape))
        ys.append(np.full(n_per_class, c))
    x, y = np.concatenate(xs), np.concatenate(ys)
    order = rng.permutation(len(y))
    return x[order], y[order].astype(np.int64)


def _mlp_params(model: NetworkModel):
    params = []
    for layer in model.layers:
        if isinstance(layer, FullyConnected):
            params.append([layer.name, layer.weight.copy(), layer.bias.copy(), False])
        elif isinstance(layer, ReLU):
            if not params:
                raise ApuError("the trainer expects the model to start with a FullyConnected layer")
            params[-1][3] = True
        else:
            raise ApuError(f"the built-in trainer handles FullyConnected/ReLU MLPs only, "
                           f"not {type(layer).__name__}")
    return params


def _forward(params, x, weights=None):
    acts = [x]
    h = x
    for i, (_, w, b, relu) in enumerate(params):
        w = weights[i] if weights is not None else w
        h = h @ w.T + b
        if relu:
            h = np.maximum(h, 0.0)
        acts.append(h)
    return acts


def predict(model: NetworkModel, x) -> np.ndarray:
    """Batched real-valued logits of an FC/ReLU model."""
    return _forward(_mlp_params(model), np.asarray(x, dtype=np.float64))[-1]


def accuracy(model: NetworkModel, x, y) -> float:
    return float(np.mean(np.argmax(predict(model, x), axis=1) == np.asarray(y)))


def _quantized(w, template: q.QuantSpec, codebook=None):
    if template.scheme == q.UNIFORM:
        spec = q.weight_spec(w, template.bits)
    else:
        spec = q.QuantSpec(template.bits, q.CODEBOOK, codebook=codebook)
    return q.dequantize(q.quantize_array(w, spec), spec)


def train_structured(model: NetworkModel, dataset, masks: dict | None = None,
                     quant: q.QuantSpec | None = None, epochs: int = 100, lr: float = 0.05,
                     seed: int = 0, *, momentum: float = 0.9, batch_size: int = 32,
                     callback=None) -> NetworkModel:
    """Mask-constrained SGD on an FC/ReLU MLP with softmax cross-entropy.

    ``masks`` maps layer names to :class:`BlockMask`; unlisted layers train
    dense.  The mask is re-applied after every optimizer step.  With
    ``quant`` (used as a template: bits and scheme) the forward pass sees
    quantized weights while gradients update the real-valued shadow
    weights, and the shadow weights are projected onto the grid at the end
    of each epoch.  ``callback(step, weights)`` is invoked after every step.
    """
    x, y = (np.asarray(a) for a in dataset)
    x = x.astype(np.float64)
    y = y.astype(np.int64)
    if len(y) == 0:
        raise ApuError("training set is empty")
    masks = masks or {}
    params = _mlp_params(model)
    names = [p[0] for p in params]
    for name, m in masks.items():
        if name not in names:
            raise MaskError(f"mask given for unknown layer {name!r}")
        w = params[names.index(name)][1]
        if m.shape != w.shape:
            raise MaskError(f"mask for {name!r} is {m.shape}, layer weights are {w.shape}")
    keep = [masks[n].mask if n in masks else None for n in names]
    for p, m in zip(params, keep):
        if m is not None:
            p[1] = np.where(m, p[1], 0.0)
    rng = np.random.default_rng(seed)
    vel = [[np.zeros_like(p[1]), np.zeros_like(p[2])] for p in params]
    codebooks = [None] * len(params)
    step = 0
    for epoch in range(epochs):
        if quant is not None and quant.scheme == q.CODEBOOK:
            codebooks = [q.fit_codebook(p[1], quant.bits, seed + epoch, include_zero=True)
                         for p in params]
        order = rng.permutation(len(y))
        for start in range(0, len(y), batch_size):
            idx = order[start:start + batch_size]
            xb, yb = x[idx], y[idx]
            fw = None
            if quant is not None:
                fw = [_quantized(p[1], quant, cb) for p, cb in zip(params, codebooks)]
            acts = _forward(params, xb, fw)
            logits = acts[-1]
            z = logits - logits.max(axis=1, keepdims=True)
            prob = np.exp(z)
            prob /= prob.sum(axis=1, keepdims=True)
            loss = -np.mean(np.log(prob[np.arange(len(yb)), yb] + 1e-300))
            if not math.isfinite(loss):
                raise TrainingDiverged(f"loss became non-finite at step {step}")
            grad = prob
            grad[np.arange(len(yb)), yb] -= 1.0
            grad /= len(yb)
            for i in range(len(params) - 1, -1, -1):
                w_used = fw[i] if fw is not None else params[i][1]
                gw = grad.T @ acts[i]
                gb = grad.sum(axis=0)
                if i > 0:
                    grad = grad @ w_used
                    if params[i - 1][3]:
                        grad = grad * (acts[i] > 0)
                vel[i][0] = momentum * vel[i][0] - lr * gw
                vel[i][1] = momentum * vel[i][1] - lr * gb
                params[i][1] = params[i][1] + vel[i][0]
                params[i][2] = params[i][2] + vel[i][1]
                if keep[i] is not None:
                    params[i][1] = np.where(keep[i], params[i][1], 0.0)
                    vel[i][0] = np.where(keep[i], vel[i][0], 0.0)
            step += 1
            if callback is not None:
                callback(step, {p[0]: p[1] for p in params})
        if quant is not None:
            for i, p in enumerate(params):
                cb = codebooks[i]
                if quant.scheme == q.CODEBOOK:
                    cb = q.fit_codebook(p[1], quant.bits, seed + epoch, include_zero=True)
                p[1] = _quantized(p[1], quant, cb)
                if keep[i] is not None:
                    p[1] = np.where(keep[i], p[1], 0.0)
    trained = iter(params)
    layers = []
    for layer in model.layers:
        if isinstance(layer, FullyConnected):
            name, w, b, _ = next(trained)
            layers.append(FullyConnected(name, w, b))
        else:
            layers.append(layer)
    return model.replace(layers)


def compress_model(model: NetworkModel, num_blocks, seed: int = 0) -> NetworkModel:
    """Mask and pack every FullyConnected layer into block-diagonal form.

    ``num_blocks`` is one count for every layer or a dict keyed by layer
    name; counts above ``min(rows, cols)`` are capped there.  Each layer
    draws its mask from ``seed + layer position``.
    """
    layers = []
    for i, layer in enumerate(model.layers):
        if isinstance(layer, FullyConnected):
            nb = num_blocks.get(layer.name, 1) if isinstance(num_blocks, dict) else num_blocks
            rows, cols = layer.weight.shape
            nb = max(1, min(int(nb), rows, cols))
            if layer.weight.strides == (0, 0):
                layers.append(_shape_only_blocks(layer, nb, seed + i))
                continue
            mask = generate_mask(rows, cols, nb, seed + i)
            layers.append(pack_blocks(apply_mask(layer.weight, mask), mask, bias=layer.bias,
                                      name=layer.name))
        else:
            layers.append(layer)
    return model.replace(layers)
