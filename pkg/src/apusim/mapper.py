"""Lowering of a (compressed, quantized) network onto the PE array.

The mapper turns every layer into a sequence of phases:

``Reload``   new weight blocks are written into PE weight SRAMs,
``Round``    one RouteIn (crossbar schedule filling the input latches)
             followed by one Compute step, at most one job per PE,
``HostOp``   work done on the host core (pooling, softmax, partial sums),
``Sync``     end-of-layer barrier.

All activations live in one flat address space (``MappedProgram.tensors``
gives each tensor a base address).  A job multiplies one weight block by
the activations at ``inputs`` (``-1`` reads as zero padding) and writes
``outputs``.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import quant as q
from .errors import ApuError, MappingError, ShapeMismatchError
from .model import (BatchNorm, BlockDiagonalLayer, Conv2D, Flatten, FullyConnected, MaxPool2D,
                    MultiHeadAttention, NetworkModel, ReLU)
from .pruner import even_splits
from .scheduler import RoutingDemand, build_schedule, lower_bound

INTERCONNECTS = ("mux", "clos", "crossbar")
DEFAULT_HOST_CYCLES = {"compare": 1, "add": 1, "relu": 1, "requant": 2, "softmax": 20}


@dataclass(frozen=True)
class AcceleratorConfig:
    num_pes: int = 10
    pe_rows: int = 400
    pe_cols: int = 400
    weight_bits: int = 4
    activation_bits: int = 4
    clock_hz: float = 1e9
    host_op_cycles: dict = field(default_factory=lambda: dict(DEFAULT_HOST_CYCLES))
    interconnect: str = "mux"
    reload_cycles_per_row: int = 1
    overlap_route: bool = False

    def __post_init__(self):
        for f in ("num_pes", "pe_rows", "pe_cols", "weight_bits", "activation_bits"):
            if int(getattr(self, f)) < 1:
                raise ApuError(f"config field {f} must be positive")
        if not self.clock_hz > 0:
            raise ApuError("clock_hz must be positive")
        if self.interconnect not in INTERCONNECTS:
            raise ApuError(f"interconnect must be one of {INTERCONNECTS}")
        if self.reload_cycles_per_row < 0:
            raise ApuError("reload_cycles_per_row must be >= 0")
        merged = dict(DEFAULT_HOST_CYCLES)
        merged.update({k: int(v) for k, v in self.host_op_cycles.items()})
        object.__setattr__(self, "host_op_cycles", merged)

    def __hash__(self):
        return hash(self.digest())

    @property
    def weight_sram_bits(self) -> int:
        return self.pe_rows * self.pe_cols * self.weight_bits

    def to_dict(self) -> dict:
        d = asdict(self)
        d["host_op_cycles"] = dict(sorted(self.host_op_cycles.items()))
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AcceleratorConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ApuError(f"unknown config fields: {sorted(extra)}")
        return cls(**d)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def load_config(path) -> AcceleratorConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ApuError(f"cannot read config file {str(path)!r}: {exc.strerror}") from None
    try:
        return AcceleratorConfig.from_dict(json.loads(text))
    except (json.JSONDecodeError, TypeError) as exc:
        raise ApuError(f"invalid config file {str(path)!r}: {exc}") from None


# ------------------------------------------------------------- model rewrite

def _bn_scale(bn: BatchNorm):
    s = bn.gamma / np.sqrt(bn.var + bn.eps)
    return s, bn.beta - bn.mean * s


def fold_batchnorm(bn: BatchNorm, prev):
    """Absorb ``bn`` into the weights and bias of the layer feeding it."""
    s, shift = _bn_scale(bn)
    if isinstance(prev, FullyConnected):
        if prev.weight.shape[0] != bn.channels:
            raise ShapeMismatchError(f"cannot fold {bn.name!r} ({bn.channels} channels) into "
                                     f"{prev.name!r} ({prev.weight.shape[0]} outputs)")
        return FullyConnected(prev.name, prev.weight * s[:, None], prev.bias * s + shift)
    if isinstance(prev, Conv2D):
        if prev.c_out != bn.channels:
            raise ShapeMismatchError(f"cannot fold {bn.name!r} ({bn.channels} channels) into "
                                     f"{prev.name!r} ({prev.c_out} output channels)")
        return Conv2D(prev.name, prev.kernel * s[:, None, None, None], prev.bias * s + shift,
                      prev.stride, prev.padding, prev.groups)
    if isinstance(prev, BlockDiagonalLayer):
        if prev.original_shape[0] != bn.channels:
            raise ShapeMismatchError(f"cannot fold {bn.name!r} into {prev.name!r}")
        blocks = [b * s[prev.rows_of(k)][:, None] for k, b in enumerate(prev.blocks)]
        biases = [b * s[prev.rows_of(k)] + shift[prev.rows_of(k)]
                  for k, b in enumerate(prev.biases)]
        return BlockDiagonalLayer(prev.name, tuple(blocks), tuple(biases), prev.row_perm,
                                  prev.col_perm, prev.row_splits, prev.col_splits, prev.quant)
    raise MappingError(f"cannot fold batch norm into {type(prev).__name__}")


def lower_batchnorm(bn: BatchNorm, in_shape):
    """A standalone batch norm becomes a 1x1 convolution with one channel per group."""
    s, shift = _bn_scale(bn)
    c = bn.channels
    if len(in_shape) == 3:
        return Conv2D(bn.name, s.reshape(c, 1, 1, 1), shift, 1, 0, c)
    if len(in_shape) == 1:
        idx = np.arange(c)
        return BlockDiagonalLayer(bn.name, tuple(s[k].reshape(1, 1) for k in range(c)),
                                  tuple(shift[k:k + 1] for k in range(c)), idx, idx,
                                  tuple(range(c + 1)), tuple(range(c + 1)))
    raise MappingError(f"{bn.name}: batch norm on a rank-{len(in_shape)} tensor is not supported")


def prepare_model(model: NetworkModel) -> NetworkModel:
    """Fold every batch norm into its producer, or lower it when there is none."""
    shapes = model.shapes()
    out = []
    for i, layer in enumerate(model.layers):
        if isinstance(layer, BatchNorm):
            if out and isinstance(out[-1], (FullyConnected, Conv2D, BlockDiagonalLayer)):
                out[-1] = fold_batchnorm(layer, out[-1])
            else:
                out.append(lower_batchnorm(layer, shapes[i]))
        else:
            out.append(layer)
    return model.replace(out)


# ----------------------------------------------------------- program objects

@dataclass(frozen=True)
class Epilogue:
    """``requant``: optional ReLU then fixed-point rescale to codes; ``raw``: keep sums."""

    kind: str = "raw"
    mult: int = 1
    shift: int = 0
    lo: int = 0
    hi: int = 0
    relu: bool = False


@dataclass(frozen=True, eq=False)
class WeightBlock:
    key: str
    rows: int
    cols: int
    level_width: int
    levels: np.ndarray | None = None  # None in shape-only programs
    bias: np.ndarray | None = None
    source: np.ndarray | None = None  # dynamic blocks: addresses of the activations loaded
    dynamic: bool = False


@dataclass(frozen=True, eq=False)
class Job:
    pe: int
    key: str
    inputs: np.ndarray   # activation addresses in latch-slot order, -1 = zero pad
    outputs: np.ndarray  # output addresses, one per block row
    epilogue: Epilogue
    input_bits: int


@dataclass(frozen=True, eq=False)
class Reload:
    layer: str
    loads: tuple  # (pe, key)
    cycles: int


@dataclass(frozen=True, eq=False)
class Round:
    """``repeat`` identical RouteIn + Compute steps.

    ``shape`` lists ``(pe, key, rows, cols)`` for every busy PE.  Concrete
    rounds (``repeat == 1``) also carry their jobs and routing demand.
    """

    layer: str
    fold: int
    shape: tuple
    route_cycles: int
    repeat: int = 1
    jobs: tuple | None = None
    demand: RoutingDemand | None = None

    def compute_cycles(self, mode: str) -> int:
        if not self.shape:
            return 0
        return max((r if mode == "spatial" else c) for _, _, r, c in self.shape)

    def schedule(self):
        return build_schedule(self.demand)


@dataclass(frozen=True, eq=False)
class HostOp:
    layer: str
    counts: tuple  # (kind, count)
    cycles: int
    action: dict | None = None


@dataclass(frozen=True, eq=False)
class Sync:
    layer: str
    cycles: int = 0


@dataclass(frozen=True)
class LayerInfo:
    name: str
    kind: str
    case: str | None
    blocks: int
    folds: int
    output: str


@dataclass(frozen=True, eq=False)
class MappedProgram:
    config: AcceleratorConfig
    input_shape: tuple
    output_shape: tuple
    tensors: dict  # name -> (base, shape)
    input_tensor: str
    output_tensor: str
    weights: dict
    phases: tuple
    layers: tuple
    plan: q.QuantPlan | None
    concrete: bool

    @property
    def address_space(self) -> int:
        return max((b + int(np.prod(s)) for b, s in self.tensors.values()), default=0)

    def layer_phases(self, name):
        return [p for p in self.phases if p.layer == name]

    def estimate(self, mode: str = "spatial") -> dict:
        """Static cycle totals per phase kind (what the simulator will count)."""
        tot = {"reload": 0, "route": 0, "compute": 0, "host": 0, "sync": 0}
        for p in self.phases:
            if isinstance(p, Reload):
                tot["reload"] += p.cycles
            elif isinstance(p, Round):
                tot["route"] += p.route_cycles * p.repeat
                tot["compute"] += p.compute_cycles(mode) * p.repeat
            elif isinstance(p, HostOp):
                tot["host"] += p.cycles
            else:
                tot["sync"] += p.cycles
        tot["total"] = sum(tot.values())
        return tot

    def utilization(self, name: str, mode: str = "spatial") -> float:
        """Compute-phase occupancy of one layer; 0 for layers with no PE work."""
        busy = total = 0
        for p in self.layer_phases(name):
            if isinstance(p, Round):
                cyc = p.compute_cycles(mode)
                total += cyc * p.repeat
                busy += p.repeat * sum((r if mode == "spatial" else c) for _, _, r, c in p.shape)
        return busy / (self.config.num_pes * total) if total else 0.0


# ----------------------------------------------------------------- the mapper

class _Builder:
    def __init__(self, cfg: AcceleratorConfig, plan, concrete: bool, input_shape):
        self.cfg = cfg
        self.plan = plan
        self.concrete = concrete
        self.tensors = {}
        self.next_addr = 0
        self.owner = {}  # tensor name -> owner PE per element (concrete only)
        self.weights = {}
        self.phases = []
        self.loaded = {}  # pe -> key currently in its weight SRAM
        self.layers = []
        self.alloc("input", input_shape)
        if concrete:
            self.owner["input"] = self.chunk_owners(int(np.prod(input_shape)))

    def alloc(self, name, shape):
        shape = tuple(int(s) for s in shape)
        self.tensors[name] = (self.next_addr, shape)
        self.next_addr += int(np.prod(shape))
        return self.tensors[name][0]

    def base(self, name):
        return self.tensors[name][0]

    def chunk_owners(self, n):
        bounds = even_splits(n, min(self.cfg.num_pes, max(n, 1)))
        own = np.zeros(n, dtype=np.int64)
        for p in range(len(bounds) - 1):
            own[bounds[p]:bounds[p + 1]] = p
        return own

    def owners_of(self, addrs):
        """Owner PE of every global address (concrete mode)."""
        out = np.full(len(addrs), -1, dtype=np.int64)
        for name, (b, shape) in self.tensors.items():
            n = int(np.prod(shape))
            sel = (addrs >= b) & (addrs < b + n)
            if np.any(sel):
                own = self.owner.get(name)
                if own is None:
                    raise MappingError(f"tensor {name!r} is read before it is produced")
                out[sel] = own[addrs[sel] - b]
        return out

    def set_owner(self, name, addrs, pe):
        b = self.base(name)
        own = self.owner.setdefault(name, np.full(int(np.prod(self.tensors[name][1])), -1,
                                                  dtype=np.int64))
        own[np.asarray(addrs) - b] = pe

    def add_weight(self, block: WeightBlock):
        if block.rows > self.cfg.pe_rows or block.cols > self.cfg.pe_cols:
            raise MappingError(
                f"block {block.key!r} is {block.rows}x{block.cols} but PEs hold "
                f"{self.cfg.pe_rows}x{self.cfg.pe_cols}; re-prune with more blocks")
        self.weights[block.key] = block

    def reload_for(self, layer, assignment):
        """Emit a Reload phase for PEs whose weight SRAM must change."""
        loads, cycles = [], 0
        for pe, key in assignment:
            blk = self.weights[key]
            if blk.dynamic:
                loads.append((pe, key))
                cycles = max(cycles, blk.rows * self.cfg.reload_cycles_per_row)
            elif self.loaded.get(pe) != key:
                if pe in self.loaded:
                    cycles = max(cycles, self.cfg.pe_rows * self.cfg.reload_cycles_per_row)
                loads.append((pe, key))
            self.loaded[pe] = key
        if loads:
            self.phases.append(Reload(layer, tuple(loads), cycles))

    def run_segment(self, layer, fold, lanes, n_rounds, job_fn):
        """Emit ``n_rounds`` rounds where ``lanes[pe] = (key, first_job, n_jobs)``."""
        self.reload_for(layer, [(pe, lanes[pe][0]) for pe in sorted(lanes)])
        if not self.concrete:
            r = 0
            ends = sorted({min(n, n_rounds) for _, _, n in lanes.values()} | {n_rounds})
            for end in ends:
                if end <= r:
                    continue
                shape = tuple((pe, k, self.weights[k].rows, self.weights[k].cols)
                              for pe, (k, _, n) in sorted(lanes.items()) if n > r)
                route = max((c for *_, c in shape), default=0)
                self.phases.append(Round(layer, fold, shape, route, end - r))
                r = end
            return
        for r in range(n_rounds):
            jobs = []
            for pe, (key, j0, n) in sorted(lanes.items()):
                if r < n:
                    jobs.append(job_fn(pe, key, j0 + r))
            self.emit_round(layer, fold, jobs)

    def emit_round(self, layer, fold, jobs):
        triples = []
        for job in jobs:
            live = job.inputs[job.inputs >= 0]
            srcs = self.owners_of(live)
            if np.any(srcs < 0):
                raise MappingError(f"{layer}: job on PE {job.pe} reads unwritten activations")
            triples.extend(zip(srcs.tolist(), [job.pe] * len(live), live.tolist()))
        p = self.cfg.num_pes
        demand = RoutingDemand(p, p, tuple(triples))
        counts = np.zeros((p, p), dtype=np.int64)
        for s, d, _ in triples:
            counts[s, d] += 1
        shape = tuple((j.pe, j.key, self.weights[j.key].rows, self.weights[j.key].cols)
                      for j in jobs)
        self.phases.append(Round(layer, fold, shape, lower_bound(counts), 1, tuple(jobs),
                                 demand))
        for job in jobs:
            for name, (b, s) in self.tensors.items():
                n = int(np.prod(s))
                sel = (job.outputs >= b) & (job.outputs < b + n)
                if np.any(sel):
                    self.set_owner(name, job.outputs[sel], job.pe)

    def host(self, layer, counts, action=None, dst=None, placement=None):
        hc = self.cfg.host_op_cycles
        counts = tuple((k, int(n)) for k, n in counts if n)
        cycles = sum(hc[k] * n for k, n in counts)
        self.phases.append(HostOp(layer, counts, cycles, action))
        if self.concrete and dst is not None:
            n = int(np.prod(self.tensors[dst][1]))
            self.owner[dst] = self.chunk_owners(n) if placement is None else placement


def _round_robin(n_keys, num_pes):
    """Key ``k`` on PE ``k % P`` in fold ``k // P``."""
    return [list(range(f, min(f + num_pes, n_keys))) for f in range(0, n_keys, num_pes)]


def _chunk_lanes(keys, jobs_per_key, num_pes):
    """Split the key-major job list into contiguous, balanced per-PE chunks.

    Returns a list of segments; each is ``{pe: (key, first_job, n_jobs)}``
    and ends where some PE crosses into the next key.
    """
    total = len(keys) * jobs_per_key
    p = min(num_pes, total)
    bounds = even_splits(total, p)
    cursors = [bounds[i] for i in range(p)]
    segments = []
    while any(cursors[i] < bounds[i + 1] for i in range(p)):
        lanes = {}
        for i in range(p):
            start, stop = cursors[i], bounds[i + 1]
            if start >= stop:
                continue
            k, j = divmod(start, jobs_per_key)
            n = min(stop, (k + 1) * jobs_per_key) - start
            lanes[i] = (keys[k], j, n)
        step = min(n for _, _, n in lanes.values())
        segments.append((lanes, step))
        for i in lanes:
            cursors[i] += step
    # merge the per-step pieces back into (lanes, n_rounds) runs PEs can stream
    merged = []
    for lanes, step in segments:
        merged.append(({pe: (k, j, step) for pe, (k, j, _) in lanes.items()}, step))
    return merged


def _layer_quant(plan, layer):
    lq = plan.layers.get(layer.name)
    if lq is None:
        raise MappingError(f"quantization plan has no entry for layer {layer.name!r}")
    return lq


def _requant(p: q.IntParams, relu: bool) -> Epilogue:
    return Epilogue("requant", p.mult, p.shift, p.lo, p.hi, relu)


def map_fc(b: _Builder, layer, src: str, in_spec, relu: bool):
    """Blocks go round-robin onto PEs; extra blocks fold into later passes."""
    if isinstance(layer, FullyConnected):
        rows, cols = layer.weight.shape
        idx = np.arange
        layer = BlockDiagonalLayer(layer.name, (layer.weight,), (layer.bias,), idx(rows),
                                   idx(cols), (0, rows), (0, cols))
    rows, cols = layer.original_shape
    dst = layer.name
    b.alloc(dst, (rows,))
    epi = None
    pw = b.cfg.weight_bits
    if b.concrete:
        lq = _layer_quant(b.plan, layer)
        w, bias = layer.dense()
        p = q.integer_params(w, bias, in_spec, lq.weight, lq.output)
        epi = _requant(p, relu)
        pw = p.level_width
    for k in range(layer.num_blocks):
        r, c = layer.rows_of(k), layer.cols_of(k)
        levels = bias_k = None
        if b.concrete:
            levels = p.levels[np.ix_(r, c)]
            bias_k = p.bias[r]
        b.add_weight(WeightBlock(f"{layer.name}/b{k}", len(r), len(c), pw, levels, bias_k))
    sb, db = b.base(src), b.base(dst)
    abits = in_spec.bits if in_spec else b.cfg.activation_bits

    def job(pe, key, _j):
        k = int(key.rsplit("/b", 1)[1])
        return Job(pe, key, sb + layer.cols_of(k), db + layer.rows_of(k), epi, abits)

    folds = _round_robin(layer.num_blocks, b.cfg.num_pes)
    for f, ks in enumerate(folds):
        lanes = {k % b.cfg.num_pes: (f"{layer.name}/b{k}", 0, 1) for k in ks}
        b.run_segment(layer.name, f, lanes, 1, job)
    b.layers.append(LayerInfo(layer.name, "fc", None, layer.num_blocks, len(folds), dst))
    return dst, (lq.output if b.concrete else None)


def conv_case(layer: Conv2D, cfg: AcceleratorConfig) -> str:
    kh, kw = layer.kernel.shape[2:]
    if layer.groups > 1:
        return "III"
    if kh * kw * layer.c_in <= cfg.pe_cols and layer.c_out <= cfg.pe_rows:
        return "I"
    return "II"


def _im2col_index(layer: Conv2D, in_shape, c0, c1):
    """Input offsets for channels ``[c0, c1)`` of every output position.

    Columns run over kernel rows, kernel columns, then channels.  Returns a
    ``(positions, kh*kw*(c1-c0))`` array with -1 for zero padding.
    """
    _, h, w = in_shape
    kh, kw = layer.kernel.shape[2:]
    _, ho, wo = layer.output_shape(in_shape)
    s, pad = layer.stride, layer.padding
    oh, ow = np.meshgrid(np.arange(ho), np.arange(wo), indexing="ij")
    oh, ow = oh.ravel(), ow.ravel()
    cols = []
    for i in range(kh):
        for j in range(kw):
            y = oh * s + i - pad
            x = ow * s + j - pad
            ok = (y >= 0) & (y < h) & (x >= 0) & (x < w)
            for c in range(c0, c1):
                cols.append(np.where(ok, c * h * w + y * w + x, -1))
    return np.stack(cols, axis=1) if cols else np.zeros((ho * wo, 0), dtype=np.int64)


def _unrolled(levels):
    """(C_out, C_in, kh, kw) kernel -> (C_out, kh*kw*C_in) matrix matching the im2col order."""
    c_out = levels.shape[0]
    return np.ascontiguousarray(levels.transpose(0, 2, 3, 1).reshape(c_out, -1))


def map_conv(b: _Builder, layer: Conv2D, src: str, in_shape, in_spec, relu: bool):
    case = conv_case(layer, b.cfg)
    out_shape = layer.output_shape(in_shape)
    c_out, ho, wo = out_shape
    npos = ho * wo
    kh, kw = layer.kernel.shape[2:]
    dst = layer.name
    b.alloc(dst, out_shape)
    sb, db = b.base(src), b.base(dst)
    cfg = b.cfg
    abits = in_spec.bits if in_spec else cfg.activation_bits
    p = None
    pw = cfg.weight_bits
    if b.concrete:
        lq = _layer_quant(b.plan, layer)
        p = q.integer_params(layer.kernel, layer.bias, in_spec, lq.weight, lq.output)
        pw = p.level_width
    out_index = np.arange(c_out)[:, None] * npos + np.arange(npos)[None, :]  # (c_out, npos)

    if case in ("I", "III"):
        g = layer.groups
        cg_in, cg_out = layer.kernel.shape[1], c_out // g
        k_cols = kh * kw * cg_in
        if cg_out > cfg.pe_rows or k_cols > cfg.pe_cols:
            raise MappingError(
                f"{layer.name}: group kernel {cg_out}x{k_cols} exceeds the "
                f"{cfg.pe_rows}x{cfg.pe_cols} PE; split the group along its input "
                "channels (case II within the group) or use more groups")
        keys = []
        cols_idx = {}
        for gi in range(g):
            key = f"{layer.name}/g{gi}" if g > 1 else f"{layer.name}/k"
            keys.append(key)
            levels = bias = None
            if b.concrete:
                rows = slice(gi * cg_out, (gi + 1) * cg_out)
                levels = _unrolled(p.levels[rows])
                bias = p.bias[rows]
            b.add_weight(WeightBlock(key, cg_out, k_cols, pw, levels, bias))
            if b.concrete:
                cols_idx[key] = (gi, _im2col_index(layer, in_shape, gi * cg_in, (gi + 1) * cg_in))
        epi = _requant(p, relu) if b.concrete else None

        def job(pe, key, j):
            gi, idx = cols_idx[key]
            ins = idx[j]
            ins = np.where(ins >= 0, ins + sb, -1)
            outs = db + out_index[gi * cg_out:(gi + 1) * cg_out, j]
            return Job(pe, key, ins, outs, epi, abits)

        for f, (lanes, n) in enumerate(_chunk_lanes(keys, npos, cfg.num_pes)):
            b.run_segment(layer.name, f, lanes, n, job)
        b.layers.append(LayerInfo(layer.name, "conv", case, g,
                                  math.ceil(g / cfg.num_pes), dst))
        return dst, (lq.output if b.concrete else None)

    # case II: split the unrolled matrix into PE-sized parts, add partials on the host
    k_total = kh * kw * layer.c_in
    n_cp = math.ceil(k_total / cfg.pe_cols)
    n_rp = math.ceil(c_out / cfg.pe_rows)
    cbounds, rbounds = even_splits(k_total, n_cp), even_splits(c_out, n_rp)
    part = f"{layer.name}.partial"
    b.alloc(part, (n_cp, c_out, npos))
    pb = b.base(part)
    full_idx = _im2col_index(layer, in_shape, 0, layer.c_in) if b.concrete else None
    unrolled = _unrolled(p.levels) if b.concrete else None
    keys, parts = [], {}
    for ri in range(n_rp):
        for ci in range(n_cp):
            key = f"{layer.name}/r{ri}c{ci}"
            r0, r1 = rbounds[ri], rbounds[ri + 1]
            k0, k1 = cbounds[ci], cbounds[ci + 1]
            levels = unrolled[r0:r1, k0:k1] if b.concrete else None
            b.add_weight(WeightBlock(key, r1 - r0, k1 - k0, pw, levels, None))
            keys.append(key)
            parts[key] = (r0, r1, k0, k1, ci)
    raw = Epilogue("raw")

    def job(pe, key, j):
        r0, r1, k0, k1, ci = parts[key]
        ins = full_idx[j, k0:k1]
        ins = np.where(ins >= 0, ins + sb, -1)
        outs = pb + ci * c_out * npos + out_index[r0:r1, j]
        return Job(pe, key, ins, outs, raw, abits)

    for f, (lanes, n) in enumerate(_chunk_lanes(keys, npos, cfg.num_pes)):
        b.run_segment(layer.name, f, lanes, n, job)
    action = None
    if b.concrete:
        action = {"op": "partial_sum", "src": part, "dst": dst, "parts": n_cp,
                  "bias": p.bias, "epilogue": _requant(p, relu)}
    b.host(layer.name, [("add", (n_cp - 1) * c_out * npos), ("requant", c_out * npos)],
           action, dst)
    b.layers.append(LayerInfo(layer.name, "conv", "II", len(keys),
                              math.ceil(len(keys) / cfg.num_pes), dst))
    return dst, (lq.output if b.concrete else None)


def map_pool(b: _Builder, layer: MaxPool2D, src: str, in_shape):
    out_shape = layer.output_shape(in_shape)
    dst = layer.name
    b.alloc(dst, out_shape)
    n = int(np.prod(out_shape))
    count = n * layer.window * layer.window if layer.window > 1 else 0
    action = {"op": "maxpool", "src": src, "dst": dst, "window": layer.window,
              "stride": layer.stride}
    b.host(layer.name, [("compare", count)], action, dst)
    b.layers.append(LayerInfo(layer.name, "pool", None, 0, 0, dst))
    return dst


def map_relu(b: _Builder, layer: ReLU, src: str, shape):
    dst = layer.name
    b.alloc(dst, shape)
    b.host(layer.name, [("relu", int(np.prod(shape)))],
           {"op": "relu", "src": src, "dst": dst}, dst)
    b.layers.append(LayerInfo(layer.name, "relu", None, 0, 0, dst))
    return dst


def map_attention(b: _Builder, layer: MultiHeadAttention, src: str, in_shape, in_spec):
    """Head ``h`` runs entirely on PE ``h % P``; softmax and the head sum use the host."""
    cfg = b.cfg
    seq, dm = in_shape
    dk, nh = layer.d_k, layer.num_heads
    checks = [("stacked Q/K/V projection", 3 * dk, dm), ("key matrix", seq, dk),
              ("transposed value matrix", dk, seq), ("output projection", dm, dk)]
    for what, r, c in checks:
        if r > cfg.pe_rows or c > cfg.pe_cols:
            raise MappingError(f"{layer.name}: {what} is {r}x{c}, larger than the "
                               f"{cfg.pe_rows}x{cfg.pe_cols} PE")
    abits = in_spec.bits if in_spec else cfg.activation_bits
    name = layer.name
    lq = _layer_quant(b.plan, layer) if b.concrete else None
    if b.concrete:
        qkv_spec, prob_spec, head_spec = (lq.internal[k] for k in ("qkv", "prob", "head"))
        _, lscale, lwidth = q.weight_levels(lq.weight)
        e_qkv = Epilogue("requant", *q.rescale_params(lscale * in_spec.scale, qkv_spec))
        e_head = Epilogue("requant", *q.rescale_params(prob_spec.scale * qkv_spec.scale,
                                                       head_spec))
        e_out = Epilogue("requant", *q.rescale_params(head_spec.scale * lscale, lq.output))
    else:
        lwidth = cfg.weight_bits
        e_qkv = e_head = e_out = None
    raw = Epilogue("raw")
    for h in range(nh):
        b.alloc(f"{name}.qkv{h}", (seq, 3 * dk))
        b.alloc(f"{name}.scores{h}", (seq, seq))
        b.alloc(f"{name}.prob{h}", (seq, seq))
        b.alloc(f"{name}.head{h}", (seq, dk))
    part = f"{name}.partial"
    b.alloc(part, (nh, seq, dm))
    b.alloc(name, (seq, dm))
    base = b.base
    t_idx = np.arange(seq)
    for h in range(nh):
        qkv_b = base(f"{name}.qkv{h}")
        lv = None
        if b.concrete:
            stacked = np.concatenate([layer.wq[h], layer.wk[h], layer.wv[h]], axis=1).T
            lv = q.weight_to_levels(stacked, lq.weight)[0]
        b.add_weight(WeightBlock(f"{name}/qkv{h}", 3 * dk, dm, lwidth, lv, None))
        b.add_weight(WeightBlock(f"{name}/k{h}", seq, dk, abits, dynamic=True,
                                 source=qkv_b + t_idx[:, None] * 3 * dk + dk + np.arange(dk)))
        b.add_weight(WeightBlock(f"{name}/vt{h}", dk, seq, abits, dynamic=True,
                                 source=qkv_b + t_idx[None, :] * 3 * dk + 2 * dk
                                 + np.arange(dk)[:, None]))
        wo = q.weight_to_levels(layer.wo[h].T, lq.weight)[0] if b.concrete else None
        b.add_weight(WeightBlock(f"{name}/wo{h}", dm, dk, lwidth, wo, None))

    def head_of(key):
        return int("".join(ch for ch in key.rsplit("/", 1)[1] if ch.isdigit()))

    sb = base(src)

    def job(pe, key, t):
        h = head_of(key)
        kind = key.rsplit("/", 1)[1].rstrip("0123456789")
        qkv_b = base(f"{name}.qkv{h}")
        if kind == "qkv":
            return Job(pe, key, sb + t * dm + np.arange(dm),
                       qkv_b + t * 3 * dk + np.arange(3 * dk), e_qkv, abits)
        if kind == "k":
            return Job(pe, key, qkv_b + t * 3 * dk + np.arange(dk),
                       base(f"{name}.scores{h}") + t * seq + np.arange(seq), raw, abits)
        if kind == "vt":
            return Job(pe, key, base(f"{name}.prob{h}") + t * seq + np.arange(seq),
                       base(f"{name}.head{h}") + t * dk + np.arange(dk), e_head, abits)
        return Job(pe, key, base(f"{name}.head{h}") + t * dk + np.arange(dk),
                   base(part) + (h * seq + t) * dm + np.arange(dm), raw, abits)

    folds = _round_robin(nh, cfg.num_pes)
    for f, heads in enumerate(folds):
        for step in ("qkv", "k", "softmax", "vt", "wo"):
            if step == "softmax":
                for h in heads:
                    action = None
                    if b.concrete:
                        action = {"op": "softmax", "src": f"{name}.scores{h}",
                                  "dst": f"{name}.prob{h}", "score_scale": qkv_spec.scale ** 2,
                                  "d_k": dk, "prob": prob_spec}
                    owners = np.full(seq * seq, h % cfg.num_pes, dtype=np.int64)
                    b.host(name, [("softmax", seq * seq)], action, f"{name}.prob{h}", owners)
                continue
            lanes = {h % cfg.num_pes: (f"{name}/{step}{h}", 0, seq) for h in heads}
            b.run_segment(name, f, lanes, seq, job)
    action = None
    if b.concrete:
        action = {"op": "partial_sum", "src": part, "dst": name, "parts": nh, "bias": None,
                  "epilogue": e_out}
    b.host(name, [("add", (nh - 1) * seq * dm), ("requant", seq * dm)], action, name)
    b.layers.append(LayerInfo(name, "attention", None, nh, len(folds), name))
    return name, (lq.output if b.concrete else None)


def map_model(model: NetworkModel, cfg: AcceleratorConfig,
              plan: q.QuantPlan | None = None) -> MappedProgram:
    """Lower ``model`` (batch norms already folded) for ``cfg``.

    With a quantization plan the program is concrete: it carries integer
    weights, jobs and routing demands and can be simulated.  Without one
    only shapes are mapped, which is enough for cycle and utilization
    estimates of large networks.
    """
    if any(isinstance(layer, BatchNorm) for layer in model.layers):
        model = prepare_model(model)
    concrete = plan is not None
    if concrete:
        if plan.weight_bits > cfg.weight_bits or plan.activation_bits > cfg.activation_bits:
            raise MappingError(f"plan needs {plan.weight_bits}-bit weights and "
                               f"{plan.activation_bits}-bit activations; the accelerator "
                               f"supports {cfg.weight_bits}/{cfg.activation_bits}")
    b = _Builder(cfg, plan, concrete, model.input_shape)
    shapes = model.shapes()
    cur = "input"
    spec = plan.input if concrete else None
    layers = model.layers
    i = 0
    while i < len(layers):
        layer = layers[i]
        shape = shapes[i]
        fuse = i + 1 < len(layers) and isinstance(layers[i + 1], ReLU)
        if isinstance(layer, (FullyConnected, BlockDiagonalLayer)):
            cur, spec = map_fc(b, layer, cur, spec, fuse)
        elif isinstance(layer, Conv2D):
            cur, spec = map_conv(b, layer, cur, shape, spec, fuse)
        elif isinstance(layer, MultiHeadAttention):
            cur, spec = map_attention(b, layer, cur, shape, spec)
            fuse = False
        elif isinstance(layer, MaxPool2D):
            cur = map_pool(b, layer, cur, shape)
            fuse = False
        elif isinstance(layer, ReLU):
            cur = map_relu(b, layer, cur, shape)
        elif isinstance(layer, Flatten):
            b.tensors[layer.name] = b.tensors[cur]
            if concrete:
                b.owner[layer.name] = b.owner[cur]
            b.layers.append(LayerInfo(layer.name, "flatten", None, 0, 0, cur))
            fuse = False
        else:
            raise MappingError(f"cannot map layer type {type(layer).__name__}")
        b.phases.append(Sync(layer.name))
        if fuse and isinstance(layer, (FullyConnected, BlockDiagonalLayer, Conv2D)):
            relu = layers[i + 1]
            b.layers.append(LayerInfo(relu.name, "relu", "fused", 0, 0, cur))
            i += 1
        i += 1
    return MappedProgram(cfg, model.input_shape, model.output_shape, dict(b.tensors), "input",
                         cur, dict(b.weights), tuple(b.phases), tuple(b.layers), plan, concrete)


def dump_program(prog: MappedProgram, mode: str = "spatial") -> str:
    """Human-readable phase listing."""
    cfg = prog.config
    lines = [f"# program for {cfg.num_pes} PEs of {cfg.pe_rows}x{cfg.pe_cols}, "
             f"{'concrete' if prog.concrete else 'shape-only'}, mode {mode}"]
    for info in prog.layers:
        extra = f" case {info.case}" if info.case and info.case != "fused" else ""
        if info.case == "fused":
            lines.append(f"layer {info.name}: relu fused into the producer's quantizer")
            continue
        lines.append(f"layer {info.name}: {info.kind}{extra}, blocks={info.blocks}, "
                     f"folds={info.folds}")
        for p in prog.layer_phases(info.name):
            if isinstance(p, Reload):
                pes = ",".join(f"{pe}<-{k}" for pe, k in p.loads)
                lines.append(f"  Reload cycles={p.cycles} [{pes}]")
            elif isinstance(p, Round):
                busy = ",".join(f"{pe}:{k}" for pe, k, _, _ in p.shape)
                lines.append(f"  RouteIn cycles={p.route_cycles} x{p.repeat}")
                lines.append(f"  Compute cycles={p.compute_cycles(mode)} x{p.repeat} "
                             f"fold={p.fold} [{busy}]")
            elif isinstance(p, HostOp):
                what = ",".join(f"{k}={n}" for k, n in p.counts) or "passthrough"
                lines.append(f"  HostOp {what} cycles={p.cycles}")
            else:
                lines.append("  Sync")
    est = prog.estimate(mode)
    lines.append("# totals " + " ".join(f"{k}={v}" for k, v in est.items()))
    return "\n".join(lines) + "\n"
