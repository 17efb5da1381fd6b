"""Cycle-accurate, bit-exact execution of a :class:`MappedProgram`.

Timing rules:

* phases are barriers; a ``Round`` is a RouteIn of ``L`` cycles followed by
  a Compute step (with ``overlap_route`` the RouteIn of a round hides
  behind the previous round's Compute in the same layer),
* a value routed in cycle ``t`` is readable from cycle ``t + 1``,
* spatial PEs emit one output row per cycle once the latch is full;
  temporal PEs consume one latch entry per cycle and drain all outputs
  after the last one,
* reloading a static block costs ``pe_rows * reload_cycles_per_row``
  (a PE's first block is preloaded); a dynamic block costs its own rows.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from . import quant as q
from .costmodel import ops_per_output
from .errors import ApuError, SimulationFault
from .mapper import Epilogue, HostOp, MappedProgram, Reload, Round, Sync
from .model import maxpool2d
from .scheduler import IDLE, broadcast_lists, emit_selects

MODES = ("spatial", "temporal")


class AdderTree:
    """Pairwise reduction tree over ``n`` products of ``product_width`` bits."""

    def __init__(self, n: int, product_width: int):
        self.n = n
        self.product_width = product_width
        self.stages = math.ceil(math.log2(n)) if n > 1 else 0
        adders, m = [], n
        while m > 1:
            adders.append(m // 2)
            m = m // 2 + m % 2
        self.adders_per_stage = tuple(adders)

    @property
    def operand_widths(self):
        return tuple(self.product_width + s for s in range(self.stages))

    @property
    def final_width(self) -> int:
        return self.product_width + self.stages

    def eval(self, products) -> int:
        p = np.asarray(products, dtype=np.int64).reshape(1, -1)
        if p.shape[1] > self.n:
            raise ValueError(f"tree has {self.n} inputs, got {p.shape[1]}")
        return int(kernels.tree_sum_rows(p, self.product_width)[0])


def _fit_width(values) -> int:
    v = np.asarray(values, dtype=np.int64)
    m = int(max(v.max(initial=0), -v.min(initial=0) - 1, 0))
    return max(2, m.bit_length() + 1)


def adder_tree_eval(products, product_width: int | None = None) -> int:
    """Exact pairwise sum; width defaults to the narrowest signed width holding every product."""
    p = np.asarray(products, dtype=np.int64).ravel()
    if p.size == 0:
        return 0
    width = product_width if product_width is not None else _fit_width(p)
    return AdderTree(p.size, width).eval(p)


@dataclass
class PEState:
    index: int
    rows: int
    cols: int
    mode: str = "spatial"
    key: str | None = None
    weights: np.ndarray | None = None
    bias: np.ndarray | None = None
    level_width: int = 0
    latch: np.ndarray | None = None
    latch_ready: np.ndarray | None = None  # cycle from which each slot is readable
    out: list = field(default_factory=list)
    cursor: int = 0
    acc: np.ndarray | None = None  # temporal partial sums

    def load(self, key, weights, bias, level_width):
        w = np.asarray(weights, dtype=np.int64)
        if w.shape[0] > self.rows or w.shape[1] > self.cols:
            raise SimulationFault(f"PE {self.index}: block {w.shape} exceeds weight SRAM")
        self.key, self.weights, self.bias, self.level_width = key, w, bias, level_width
        self.cursor = 0

    def fill_latch(self, values, ready=0):
        self.latch = np.asarray(values, dtype=np.int64)
        self.latch_ready = np.full(len(self.latch), ready, dtype=np.int64)
        self.cursor = 0
        self.out = []


def _epilogue(acc, epi: Epilogue):
    if epi.kind == "raw":
        return np.asarray(acc, dtype=np.int64)
    a = np.maximum(acc, 0) if epi.relu else acc
    return kernels.requantize(a, epi.mult, epi.shift, epi.lo, epi.hi)


def pe_output_step(state: PEState, row: int, epilogue: Epilogue, input_bits: int = 4,
                   cycle: int | None = None) -> int:
    """One spatial cycle: multiply one weight row by the latch, reduce, add bias, quantize."""
    if state.weights is None or not (0 <= row < state.weights.shape[0]):
        raise ApuError(f"PE {state.index}: row {row} out of range")
    if state.latch is None or len(state.latch) != state.weights.shape[1]:
        raise SimulationFault(f"PE {state.index}: input latch is not full", cycle)
    if cycle is not None and np.any(state.latch_ready > cycle):
        raise SimulationFault(f"PE {state.index}: latch read before the value arrived", cycle)
    pw = state.level_width + input_bits
    acc = int(kernels.tree_matvec(state.weights[row:row + 1], state.latch, pw)[0])
    if state.bias is not None:
        acc += int(state.bias[row])
    code = int(_epilogue(np.array([acc]), epilogue)[0])
    state.out.append(code)
    state.cursor = row + 1
    return code


@dataclass
class SimReport:
    mode: str
    total_cycles: int
    phase_cycles: dict
    pe_busy: list
    utilization: float
    compute_utilization: float
    ops: int
    layers: list
    output: np.ndarray

    def to_dict(self, include_output=True) -> dict:
        d = {
            "mode": self.mode,
            "total_cycles": self.total_cycles,
            "phase_cycles": dict(self.phase_cycles),
            "pe_busy": list(self.pe_busy),
            "utilization": self.utilization,
            "compute_utilization": self.compute_utilization,
            "ops": self.ops,
            "layers": self.layers,
        }
        if include_output:
            d["output"] = np.asarray(self.output).ravel().tolist()
            d["output_shape"] = list(np.shape(self.output))
        return d


class _Machine:
    def __init__(self, prog: MappedProgram, mode: str, trace):
        self.prog = prog
        self.cfg = prog.config
        self.mode = mode
        self.trace = trace
        n = prog.address_space
        self.values = np.zeros(n, dtype=np.int64)
        self.owner = np.full(n, -1, dtype=np.int64)
        self.pes = [PEState(i, self.cfg.pe_rows, self.cfg.pe_cols, mode)
                    for i in range(self.cfg.num_pes)]
        self.cycle = 0
        self.phase_cycles = {"reload": 0, "route": 0, "compute": 0, "host": 0, "sync": 0}
        self.busy = [0] * self.cfg.num_pes
        self.layer_stats = {}
        self.ops = 0
        self.acc_extra = math.ceil(math.log2(self.cfg.pe_cols)) if self.cfg.pe_cols > 1 else 0

    def event(self, unit, what):
        if self.trace is not None:
            self.trace.append((self.cycle, unit, what))

    def stats(self, layer):
        return self.layer_stats.setdefault(layer, {
            "reload": 0, "route": 0, "compute": 0, "host": 0, "sync": 0, "busy": 0})

    def advance(self, kind, layer, cycles):
        self.cycle += cycles
        self.phase_cycles[kind] += cycles
        self.stats(layer)[kind] += cycles

    def tensor(self, name):
        base, shape = self.prog.tensors[name]
        return base, shape, int(np.prod(shape))

    def read(self, name):
        base, shape, n = self.tensor(name)
        if np.any(self.owner[base:base + n] < 0):
            raise SimulationFault(f"host read of unwritten tensor {name!r}", self.cycle)
        return self.values[base:base + n].reshape(shape)

    def write_host(self, name, data, placement=None):
        base, _, n = self.tensor(name)
        self.values[base:base + n] = np.asarray(data, dtype=np.int64).ravel()
        if placement is None:
            bounds = [0]
            k = min(self.cfg.num_pes, max(n, 1))
            base_sz, extra = divmod(n, k)
            for i in range(k):
                bounds.append(bounds[-1] + base_sz + (1 if i < extra else 0))
            for p in range(k):
                self.owner[base + bounds[p]:base + bounds[p + 1]] = p
        else:
            self.owner[base:base + n] = placement

    # -- phases ---------------------------------------------------------
    def reload(self, ph: Reload):
        cycles = 0
        rpr = self.cfg.reload_cycles_per_row
        for pe, key in ph.loads:
            blk = self.prog.weights[key]
            st = self.pes[pe]
            if blk.dynamic:
                src = blk.source
                if np.any(self.owner[src] != pe):
                    raise SimulationFault(
                        f"PE {pe}: dynamic block {key!r} needs activations held by another PE",
                        self.cycle)
                st.load(key, self.values[src], None, blk.level_width)
                cycles = max(cycles, blk.rows * rpr)
            else:
                if st.key is not None:
                    cycles = max(cycles, self.cfg.pe_rows * rpr)
                st.load(key, blk.levels, blk.bias, blk.level_width)
            self.event(f"pe{pe}", f"load {key}")
        self.advance("reload", ph.layer, cycles)

    def route(self, rnd: Round, hide: int):
        sched = rnd.schedule()
        if sched.length != rnd.route_cycles:
            raise SimulationFault(f"{rnd.layer}: schedule length {sched.length} differs from "
                                  f"the mapped {rnd.route_cycles}", self.cycle)
        sel = emit_selects(sched, self.cfg.num_pes).table
        bcast = broadcast_lists(sched)
        slots = {}
        for job in rnd.jobs:
            st = self.pes[job.pe]
            st.fill_latch(np.zeros(len(job.inputs), dtype=np.int64), ready=-1)
            st.latch_ready[:] = np.where(job.inputs < 0, -1, np.iinfo(np.int64).max)
            slots[job.pe] = {int(a): i for i, a in enumerate(job.inputs) if a >= 0}
        start = self.cycle
        self.event("xbar", f"route {rnd.layer} cycles={sched.length} "
                           f"transfers={len(rnd.demand.triples)}")
        for t in range(sched.length):
            lines = {}
            for s in range(bcast.shape[0]):
                a = int(bcast[s, t])
                if a == IDLE:
                    continue
                if self.owner[a] != s:
                    raise SimulationFault(f"source {s} broadcasts address {a} it does not hold",
                                          start + t)
                lines[s] = (a, int(self.values[a]))
            for d in range(sel.shape[0]):
                s = int(sel[d, t])
                if s == IDLE:
                    continue
                if s not in lines:
                    raise SimulationFault(f"PE {d} selects idle line {s}", start + t)
                a, v = lines[s]
                slot = slots.get(d, {}).get(a)
                if slot is None:
                    raise SimulationFault(f"PE {d} latched unexpected address {a}", start + t)
                st = self.pes[d]
                if st.latch_ready[slot] != np.iinfo(np.int64).max:
                    raise SimulationFault(f"PE {d} latched slot {slot} twice", start + t)
                st.latch[slot] = v
                st.latch_ready[slot] = start + t + 1
        for job in rnd.jobs:
            if np.any(self.pes[job.pe].latch_ready == np.iinfo(np.int64).max):
                raise SimulationFault(f"PE {job.pe}: input latch incomplete after routing",
                                      start + sched.length)
        self.advance("route", rnd.layer, max(sched.length - hide, 0))

    def compute(self, rnd: Round):
        cycles = rnd.compute_cycles(self.mode)
        start = self.cycle
        for job in rnd.jobs:
            st = self.pes[job.pe]
            if st.key != job.key:
                raise SimulationFault(f"PE {job.pe} holds {st.key!r}, job needs {job.key!r}",
                                      start)
            if np.any(st.latch_ready > start):
                raise SimulationFault(f"PE {job.pe}: latch read before the value arrived", start)
            rows, cols = st.weights.shape
            pw = st.level_width + job.input_bits
            if self.mode == "spatial":
                acc = kernels.tree_matvec(st.weights, st.latch, pw)
                work = rows
            else:
                acc = kernels.temporal_matvec(st.weights, st.latch, pw + self.acc_extra)
                work = cols
            if st.bias is not None:
                acc = acc + st.bias
            out = _epilogue(acc, job.epilogue)
            self.values[job.outputs] = out
            self.owner[job.outputs] = job.pe
            self.busy[job.pe] += work
            self.stats(rnd.layer)["busy"] += work
            self.ops += rows * ops_per_output(cols, st.level_width, job.input_bits)
            self.event(f"pe{job.pe}", f"compute {job.key} rows={rows} cols={cols}")
        self.advance("compute", rnd.layer, cycles)

    def host(self, ph: HostOp):
        act = ph.action
        if act is not None:
            op = act["op"]
            if op == "maxpool":
                x = self.read(act["src"])
                self.write_host(act["dst"], maxpool2d(x, act["window"], act["stride"]))
            elif op == "relu":
                self.write_host(act["dst"], np.maximum(self.read(act["src"]), 0))
            elif op == "partial_sum":
                x = self.read(act["src"])
                total = x.sum(axis=0)
                if act["bias"] is not None:
                    total = total + act["bias"].reshape((-1,) + (1,) * (total.ndim - 1))
                self.write_host(act["dst"], _epilogue(total, act["epilogue"]))
            elif op == "softmax":
                x = self.read(act["src"])
                probs = q.host_softmax_codes(x, act["score_scale"], act["d_k"], act["prob"])
                base, _, n = self.tensor(act["src"])
                self.write_host(act["dst"], probs, placement=self.owner[base:base + n].copy())
            else:
                raise SimulationFault(f"unknown host action {op!r}", self.cycle)
        self.event("host", ",".join(f"{k}={n}" for k, n in ph.counts) or "passthrough")
        self.advance("host", ph.layer, ph.cycles)

    def run(self, x):
        prog = self.prog
        codes = q.quantize_array(x, prog.plan.input)
        self.write_host(prog.input_tensor, codes)
        prev = None
        for ph in prog.phases:
            if isinstance(ph, Reload):
                self.reload(ph)
            elif isinstance(ph, Round):
                hide = 0
                if (self.cfg.overlap_route and isinstance(prev, Round)
                        and prev.layer == ph.layer):
                    hide = prev.compute_cycles(self.mode)
                self.route(ph, hide)
                self.compute(ph)
            elif isinstance(ph, HostOp):
                self.host(ph)
            elif isinstance(ph, Sync):
                self.advance("sync", ph.layer, ph.cycles)
            prev = ph
        base, _, n = self.tensor(prog.output_tensor)
        return self.values[base:base + n].reshape(prog.output_shape).copy()


def simulate(program: MappedProgram, x, mode: str = "spatial", trace: list | None = None):
    """Run ``program`` on real-valued input ``x``; returns ``(codes, SimReport)``.

    The input is quantized with the program's plan, exactly like
    :func:`apusim.model.reference_eval`, so the output codes are directly
    comparable.  Pass a list as ``trace`` to collect ``(cycle, unit, event)``
    tuples.
    """
    if mode not in MODES:
        raise ApuError(f"mode must be one of {MODES}")
    if not program.concrete:
        raise ApuError("shape-only programs cannot be simulated; map with a quantization plan")
    x = np.asarray(x, dtype=np.float64)
    if x.shape != tuple(program.input_shape):
        raise ApuError(f"input shape {x.shape} does not match program {program.input_shape}")
    m = _Machine(program, mode, trace)
    out = m.run(x)
    total = m.cycle
    p = program.config.num_pes
    comp = m.phase_cycles["compute"]
    layers = []
    for info in program.layers:
        st = m.layer_stats.get(info.name, {"reload": 0, "route": 0, "compute": 0, "host": 0,
                                           "busy": 0})
        occ = st["busy"] / (p * st["compute"]) if st["compute"] else 0.0
        layers.append({"name": info.name, "kind": info.kind, "case": info.case,
                       "blocks": info.blocks, "folds": info.folds,
                       "reload_cycles": st["reload"], "route_cycles": st["route"],
                       "compute_cycles": st["compute"], "host_cycles": st["host"],
                       "busy": st["busy"], "utilization": occ})
    report = SimReport(
        mode=mode,
        total_cycles=total,
        phase_cycles=dict(m.phase_cycles),
        pe_busy=list(m.busy),
        utilization=sum(m.busy) / (p * total) if total else 0.0,
        compute_utilization=sum(m.busy) / (p * comp) if comp else 0.0,
        ops=int(m.ops),
        layers=layers,
        output=out,
    )
    return out, report
