"""Scalar quantizers, codebook fitting, and per-model quantization plans.

Activations are always uniform-symmetric signed codes.  Weights are either
uniform-symmetric codes or indices into a fitted codebook; in the latter case
the datapath multiplies by a fixed-point *level* decoded from the index, so
every quantized layer reduces to pure integer arithmetic followed by a
fixed-point rescale (:func:`requantize`).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import QuantError

UNIFORM = "uniform-symmetric"
CODEBOOK = "nonuniform-codebook"
SCHEMES = (UNIFORM, CODEBOOK)
WEIGHT_BITS = (4, 8, 16)
# extra fraction bits used when a codebook entry is decoded to an integer level
LEVEL_EXTRA_BITS = 3
# requantization multipliers are normalised into [2**22, 2**23]
MULT_BITS = 23


@dataclass(frozen=True)
class QuantSpec:
    """One scalar quantizer: ``bits`` wide, uniform grid or codebook."""

    bits: int
    scheme: str = UNIFORM
    scale: float | None = None
    codebook: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.bits < 1:
            raise QuantError(f"bits must be positive, got {self.bits}")
        if self.scheme == UNIFORM:
            if self.scale is None or not self.scale > 0 or not math.isfinite(self.scale):
                raise QuantError(f"uniform quantizer needs scale > 0, got {self.scale}")
        elif self.scheme == CODEBOOK:
            if self.codebook is None or len(self.codebook) != 2**self.bits:
                raise QuantError(
                    f"codebook must have exactly {2**self.bits} entries for {self.bits} bits"
                )
            object.__setattr__(self, "codebook", tuple(float(c) for c in self.codebook))
        else:
            raise QuantError(f"unknown quantization scheme {self.scheme!r}")

    @property
    def qmin(self) -> int:
        return -(1 << (self.bits - 1)) if self.scheme == UNIFORM else 0

    @property
    def qmax(self) -> int:
        return (1 << (self.bits - 1)) - 1 if self.scheme == UNIFORM else 2**self.bits - 1

    def to_dict(self) -> dict:
        d = {"bits": self.bits, "scheme": self.scheme}
        if self.scheme == UNIFORM:
            d["scale"] = self.scale
        else:
            d["codebook"] = list(self.codebook)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "QuantSpec":
        cb = d.get("codebook")
        return cls(
            bits=int(d["bits"]),
            scheme=d.get("scheme", UNIFORM),
            scale=d.get("scale"),
            codebook=tuple(cb) if cb is not None else None,
        )


def activation_spec(bits: int, max_abs: float) -> QuantSpec:
    top = (1 << (bits - 1)) - 1
    scale = max_abs / top if max_abs > 0 and math.isfinite(max_abs) else 1.0
    return QuantSpec(bits, UNIFORM, scale=float(scale))


def quantize_array(x, spec: QuantSpec) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if spec.scheme == UNIFORM:
        return np.clip(np.rint(x / spec.scale), spec.qmin, spec.qmax).astype(np.int64)
    cb = np.asarray(spec.codebook)
    # argmin returns the first minimum, so ties go to the lower index
    return np.argmin(np.abs(x[..., None] - cb), axis=-1).astype(np.int64)


def dequantize(codes, spec: QuantSpec) -> np.ndarray:
    codes = np.asarray(codes, dtype=np.int64)
    if spec.scheme == UNIFORM:
        return codes * spec.scale
    return np.asarray(spec.codebook)[codes]


def quantize_value(x: float, spec: QuantSpec) -> tuple[int, float]:
    """Quantize one real value; returns ``(code, dequantized value)``.

    >>> quantize_value(1.3, QuantSpec(4, scale=0.5))
    (3, 1.5)
    """
    code = int(quantize_array(x, spec))
    return code, float(dequantize(code, spec))


def fit_codebook(values, bits: int, seed: int = 0, *, include_zero: bool = False,
                 iters: int = 50) -> tuple[float, ...]:
    """1-D k-means codebook with ``2**bits`` centroids.

    Centroids start on an evenly spaced grid over the value range, so the
    result never has higher squared error than that grid.  ``seed`` drives
    the re-seeding of empty clusters.  With ``include_zero`` one centroid is
    pinned to exactly 0 and placed first (so pruned weights stay zero).
    """
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise QuantError("cannot fit a codebook to an empty value list")
    k = 2**bits
    rng = np.random.default_rng(seed)
    free = k - 1 if include_zero else k
    data = v[v != 0.0] if include_zero and np.any(v != 0.0) else v
    lo, hi = float(data.min()), float(data.max())
    cent = lo + (np.arange(free) + 0.5) * (hi - lo) / free
    fixed = np.array([0.0]) if include_zero else np.zeros(0)
    for _ in range(iters):
        allc = np.concatenate([fixed, cent])
        assign = np.argmin(np.abs(data[:, None] - allc[None, :]), axis=1) - len(fixed)
        new = cent.copy()
        for j in range(free):
            members = data[assign == j]
            if members.size:
                # clamp: a float mean can round outside its members' range
                new[j] = min(max(members.mean(), members.min()), members.max())
            else:
                new[j] = data[rng.integers(data.size)]
        if np.array_equal(new, cent):
            break
        cent = new
    cent = np.sort(cent)
    return tuple(float(c) for c in np.concatenate([fixed, cent]))


def uniform_grid(values, bits: int) -> tuple[float, ...]:
    """Evenly spaced ``2**bits`` level midpoints over the value range."""
    v = np.asarray(values, dtype=np.float64)
    k = 2**bits
    lo, hi = float(v.min()), float(v.max())
    return tuple(lo + (np.arange(k) + 0.5) * (hi - lo) / k)


def quantization_mse(values, codebook) -> float:
    v = np.asarray(values, dtype=np.float64).ravel()
    cb = np.asarray(codebook)
    return float(np.mean(np.min((v[:, None] - cb[None, :]) ** 2, axis=1)))


def weight_spec(weights, bits: int, scheme: str = UNIFORM, seed: int = 0) -> QuantSpec:
    w = np.asarray(weights, dtype=np.float64)
    if scheme == UNIFORM:
        top = (1 << (bits - 1)) - 1
        m = float(np.max(np.abs(w))) if w.size else 0.0
        return QuantSpec(bits, UNIFORM, scale=m / top if m > 0 else 1.0)
    return QuantSpec(bits, CODEBOOK, codebook=fit_codebook(w, bits, seed, include_zero=True))


def weight_levels(spec: QuantSpec) -> tuple[np.ndarray, float, int]:
    """Decode table for weight codes: ``(levels, level_scale, level_width)``.

    ``levels[code - spec.qmin]`` is the signed integer the multipliers see and
    ``level_scale`` converts it back to a real weight.
    """
    if spec.scheme == UNIFORM:
        levels = np.arange(spec.qmin, spec.qmax + 1, dtype=np.int64)
        return levels, spec.scale, spec.bits
    width = spec.bits + LEVEL_EXTRA_BITS + 1
    top = (1 << (width - 1)) - 1
    cb = np.asarray(spec.codebook)
    m = float(np.max(np.abs(cb)))
    lscale = m / top if m > 0 else 1.0
    return np.rint(cb / lscale).astype(np.int64), lscale, width


def weight_to_levels(weights, spec: QuantSpec) -> tuple[np.ndarray, float, int]:
    codes = quantize_array(weights, spec)
    levels, lscale, width = weight_levels(spec)
    return levels[codes - spec.qmin], lscale, width


def fixed_point(ratio: float) -> tuple[int, int]:
    """Express a positive real rescale factor as ``mult / 2**shift``."""
    if not ratio > 0 or not math.isfinite(ratio):
        raise QuantError(f"rescale factor must be positive and finite, got {ratio}")
    m, e = math.frexp(ratio)
    shift = MULT_BITS - e
    if shift < 0:
        return int(round(ratio)), 0
    return int(round(m * (1 << MULT_BITS))), shift


def requantize(acc, mult: int, shift: int, lo: int, hi: int) -> np.ndarray:
    """Reference fixed-point rescale with round-half-up and saturation."""
    a = np.asarray(acc, dtype=np.int64)
    if shift > 0:
        a = (a * np.int64(mult) + np.int64(1 << (shift - 1))) >> np.int64(shift)
    else:
        a = a * np.int64(mult)
    return np.clip(a, lo, hi).astype(np.int64)


def host_softmax_codes(scores, score_scale: float, d_k: int, prob: QuantSpec) -> np.ndarray:
    """Softmax of integer attention scores, re-quantized to probability codes.

    This runs on the host core; rows are processed one at a time so every
    caller gets identical floating point evaluation order.
    """
    s = np.asarray(scores, dtype=np.int64)
    if s.ndim == 2:
        return np.stack([host_softmax_codes(row, score_scale, d_k, prob) for row in s])
    z = s.astype(np.float64) * (score_scale / math.sqrt(d_k))
    z = z - z.max()
    e = np.exp(z)
    p = e / e.sum()
    return np.clip(np.rint(p / prob.scale), 0, prob.qmax).astype(np.int64)


@dataclass(frozen=True)
class LayerQuant:
    """Quantizers attached to one weighted layer.

    ``internal`` carries the extra activation quantizers of attention layers
    (``qkv``, ``prob``, ``head``).
    """

    weight: QuantSpec | None
    output: QuantSpec
    internal: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "weight": self.weight.to_dict() if self.weight else None,
            "output": self.output.to_dict(),
            "internal": {k: v.to_dict() for k, v in self.internal.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LayerQuant":
        return cls(
            weight=QuantSpec.from_dict(d["weight"]) if d.get("weight") else None,
            output=QuantSpec.from_dict(d["output"]),
            internal={k: QuantSpec.from_dict(v) for k, v in d.get("internal", {}).items()},
        )


@dataclass(frozen=True)
class QuantPlan:
    """Quantizers for a whole model, keyed by layer name."""

    weight_bits: int
    activation_bits: int
    scheme: str
    input: QuantSpec
    layers: dict

    def __post_init__(self):
        if self.weight_bits not in WEIGHT_BITS:
            raise QuantError(f"weight_bits must be one of {WEIGHT_BITS}, got {self.weight_bits}")
        if self.scheme not in SCHEMES:
            raise QuantError(f"unknown quantization scheme {self.scheme!r}")
        if self.activation_bits < 2:
            raise QuantError("activation_bits must be at least 2")

    def to_dict(self) -> dict:
        return {
            "weight_bits": self.weight_bits,
            "activation_bits": self.activation_bits,
            "scheme": self.scheme,
            "input": self.input.to_dict(),
            "layers": {k: v.to_dict() for k, v in self.layers.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "QuantPlan":
        return cls(
            weight_bits=int(d["weight_bits"]),
            activation_bits=int(d["activation_bits"]),
            scheme=d["scheme"],
            input=QuantSpec.from_dict(d["input"]),
            layers={k: LayerQuant.from_dict(v) for k, v in d["layers"].items()},
        )


def calibrate(model, samples, weight_bits: int = 4, activation_bits: int | None = None,
              scheme: str = UNIFORM, seed: int = 0) -> QuantPlan:
    """Derive a :class:`QuantPlan` from real-valued activations on ``samples``.

    Scales are max-abs calibrated.  Batch-norm layers must already be folded
    or lowered (see :func:`apusim.mapper.prepare_model`).
    """
    from . import model as ir

    abits = activation_bits or weight_bits
    samples = [np.asarray(s, dtype=np.float64) for s in samples]
    if not samples:
        raise QuantError("calibration needs at least one sample")
    maxes: dict[str, float] = {}
    internals: dict[str, dict[str, float]] = {}
    for x in samples:
        trace = ir.trace_real(model, x)
        for name, value in trace["outputs"].items():
            maxes[name] = max(maxes.get(name, 0.0), float(np.max(np.abs(value))))
        for name, parts in trace["internal"].items():
            slot = internals.setdefault(name, {})
            for k, v in parts.items():
                slot[k] = max(slot.get(k, 0.0), float(np.max(np.abs(v))))
    in_max = max(float(np.max(np.abs(x))) for x in samples)
    layers = {}
    for layer in model.layers:
        if isinstance(layer, ir.BatchNorm):
            raise QuantError(f"fold or lower batch norm {layer.name!r} before calibrating")
        weights = ir.layer_weights(layer)
        if weights is None:
            continue
        wspec = weight_spec(weights, weight_bits, scheme, seed)
        internal = {}
        if isinstance(layer, ir.MultiHeadAttention):
            parts = internals[layer.name]
            internal = {
                "qkv": activation_spec(abits, parts["qkv"]),
                "prob": QuantSpec(abits, UNIFORM, scale=1.0 / ((1 << (abits - 1)) - 1)),
                "head": activation_spec(abits, parts["head"]),
            }
        layers[layer.name] = LayerQuant(wspec, activation_spec(abits, maxes[layer.name]), internal)
    return QuantPlan(weight_bits, abits, scheme, activation_spec(abits, in_max), layers)


@dataclass(frozen=True, eq=False)
class IntParams:
    """Integer form of one weighted operation.

    ``levels`` has the same shape as the real weights; ``bias`` is expressed
    in accumulator units; ``mult``/``shift``/``lo``/``hi`` define the output
    rescale into activation codes.
    """

    levels: np.ndarray
    level_width: int
    bias: np.ndarray | None
    mult: int
    shift: int
    lo: int
    hi: int
    input_bits: int

    @property
    def product_width(self) -> int:
        return self.level_width + self.input_bits


def integer_params(weights, bias, in_spec: QuantSpec, wspec: QuantSpec,
                   out_spec: QuantSpec) -> IntParams:
    levels, lscale, width = weight_to_levels(weights, wspec)
    acc_scale = lscale * in_spec.scale
    b = None
    if bias is not None:
        b = np.rint(np.asarray(bias, dtype=np.float64) / acc_scale).astype(np.int64)
    mult, shift = fixed_point(acc_scale / out_spec.scale)
    return IntParams(levels, width, b, mult, shift, out_spec.qmin, out_spec.qmax, in_spec.bits)


def rescale_params(in_scale: float, out_spec: QuantSpec) -> tuple[int, int, int, int]:
    mult, shift = fixed_point(in_scale / out_spec.scale)
    return mult, shift, out_spec.qmin, out_spec.qmax
