"""Baseline cycle models and per-layer speedup tables.

Three baselines, all given the same PE count as the accelerator:

``dense-sequential``
    Every MAC of the uncompressed layer at ``macs_per_cycle`` per cycle
    (default: one MAC per multiplier, ``num_pes * pe_cols``).

``unstructured-sparse``
    An engine that runs the same nonzero MACs without block structure.  It
    has the same PE count and the same weight-SRAM port per PE
    (``pe_cols * weight_bits`` bits a cycle).  Each nonzero weight costs
    ``weight_bits + pointer_bits`` bits of that port, and each access pays
    the random-access ``penalty``.  Nonzero columns are irregular, so every
    input activation goes to every PE over one broadcast bus, one value a
    cycle.  Weights beyond the on-chip capacity are streamed in at one SRAM
    row per PE per ``reload_cycles_per_row``.

``apu``
    The accelerator itself (speedup 1 by construction).

Host-side work such as pooling or softmax costs the same on every machine.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ApuError
from .mapper import AcceleratorConfig, HostOp, MappedProgram, Reload, Round, map_model, prepare_model
from .model import BlockDiagonalLayer, Conv2D, FullyConnected, MultiHeadAttention, NetworkModel

KINDS = ("dense-sequential", "unstructured-sparse", "apu")


@dataclass(frozen=True)
class BaselineSpec:
    kind: str = "unstructured-sparse"
    macs_per_cycle: int | None = None  # dense-sequential; None = num_pes * pe_cols
    penalty: float = 2.0               # unstructured-sparse random-access factor
    pointer_bits: int = 4              # unstructured-sparse index bits per nonzero

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ApuError(f"unknown baseline {self.kind!r}; pick one of {KINDS}")
        if self.penalty < 1:
            raise ApuError("random-access penalty must be at least 1")
        if self.pointer_bits < 0:
            raise ApuError("pointer overhead cannot be negative")
        if self.macs_per_cycle is not None and self.macs_per_cycle < 1:
            raise ApuError("macs_per_cycle must be positive")


@dataclass(frozen=True)
class LayerWork:
    dense_macs: int    # MACs of the uncompressed, ungrouped layer
    nonzero_macs: int  # MACs actually needed
    weights: int       # nonzero weights stored
    inputs: int        # input activations


def layer_work(layer, in_shape) -> LayerWork:
    n_in = int(np.prod(in_shape))
    if isinstance(layer, FullyConnected):
        r, c = layer.weight.shape
        return LayerWork(r * c, r * c, r * c, n_in)
    if isinstance(layer, BlockDiagonalLayer):
        r, c = layer.original_shape
        nz = sum(int(b.shape[0]) * int(b.shape[1]) for b in layer.blocks)
        return LayerWork(r * c, nz, nz, n_in)
    if isinstance(layer, Conv2D):
        _, h, w = layer.output_shape(in_shape)
        kh, kw = layer.kernel.shape[2:]
        stored = int(layer.kernel.size)
        return LayerWork(layer.c_out * layer.c_in * kh * kw * h * w, stored * h * w, stored, n_in)
    if isinstance(layer, MultiHeadAttention):
        s = in_shape[0]
        h, dm, dk = layer.num_heads, layer.d_model, layer.d_k
        macs = h * (3 * s * dm * dk + 2 * s * s * dk + s * dk * dm)
        return LayerWork(macs, macs, 4 * h * dm * dk, n_in)
    return LayerWork(0, 0, 0, n_in)


def layer_cycles(prog: MappedProgram, name: str, mode: str = "spatial") -> dict:
    tot = {"reload": 0, "route": 0, "compute": 0, "host": 0}
    for p in prog.layer_phases(name):
        if isinstance(p, Reload):
            tot["reload"] += p.cycles
        elif isinstance(p, Round):
            tot["route"] += p.route_cycles * p.repeat
            tot["compute"] += p.compute_cycles(mode) * p.repeat
        elif isinstance(p, HostOp):
            tot["host"] += p.cycles
    tot["total"] = sum(tot.values())
    return tot


def baseline_cycles(work: LayerWork, host: int, apu_total: int, cfg: AcceleratorConfig,
                    spec: BaselineSpec) -> int:
    if spec.kind == "apu":
        return apu_total
    if work.dense_macs == 0:
        return host
    if spec.kind == "dense-sequential":
        rate = spec.macs_per_cycle or cfg.num_pes * cfg.pe_cols
        return math.ceil(work.dense_macs / rate) + host
    port = cfg.num_pes * cfg.pe_cols * cfg.weight_bits
    entry = cfg.weight_bits + spec.pointer_bits
    compute = math.ceil(work.nonzero_macs * entry * spec.penalty / port)
    capacity = cfg.num_pes * cfg.pe_rows * cfg.pe_cols * cfg.weight_bits
    overflow = max(0, work.weights * entry - capacity)
    reload = math.ceil(overflow / port) * cfg.reload_cycles_per_row
    feed = max(work.inputs, compute) if cfg.overlap_route else work.inputs + compute
    return feed + reload + host


@dataclass(frozen=True)
class CompareRow:
    layer: str
    kind: str
    blocks: int
    folds: int
    dense_macs: int
    nonzero_macs: int
    apu_cycles: int
    baseline_cycles: int
    speedup: float | None


@dataclass(frozen=True)
class CompareReport:
    baseline: BaselineSpec
    mode: str
    rows: tuple
    apu_cycles: int
    baseline_cycles: int

    @property
    def speedup(self) -> float:
        return self.baseline_cycles / self.apu_cycles if self.apu_cycles else float("nan")

    def row(self, name: str) -> CompareRow:
        for r in self.rows:
            if r.layer == name:
                return r
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {"baseline": asdict(self.baseline), "mode": self.mode,
                "layers": [asdict(r) for r in self.rows],
                "total": {"apu_cycles": self.apu_cycles, "baseline_cycles": self.baseline_cycles,
                          "speedup": self.speedup}}

    def to_csv(self) -> str:
        out = io.StringIO()
        fields = list(CompareRow.__dataclass_fields__)
        w = csv.writer(out, lineterminator="\n")
        w.writerow(fields)
        for r in self.rows:
            w.writerow([getattr(r, f) if not isinstance(getattr(r, f), float)
                        else repr(getattr(r, f)) for f in fields])
        w.writerow(["total", "", "", "", "", "", self.apu_cycles, self.baseline_cycles,
                    repr(self.speedup)])
        return out.getvalue()


def compare(model: NetworkModel, cfg: AcceleratorConfig, baseline: BaselineSpec,
            program: MappedProgram | None = None, mode: str = "spatial") -> CompareReport:
    """Per-layer and end-to-end ``baseline cycles / accelerator cycles``.

    ``program`` defaults to the shape-only mapping of ``model``; one row per
    mapped layer.
    """
    prepared = prepare_model(model)
    prog = program or map_model(prepared, cfg)
    shapes = dict(zip((l.name for l in prepared.layers), prepared.shapes()))
    layers = {l.name: l for l in prepared.layers}
    rows = []
    for info in prog.layers:
        cyc = layer_cycles(prog, info.name, mode)
        layer = layers.get(info.name)
        work = layer_work(layer, shapes[info.name]) if layer is not None else LayerWork(0, 0, 0, 0)
        base = baseline_cycles(work, cyc["host"], cyc["total"], cfg, baseline)
        speed = base / cyc["total"] if cyc["total"] else None
        rows.append(CompareRow(info.name, info.kind, info.blocks, info.folds, work.dense_macs,
                               work.nonzero_macs, cyc["total"], base, speed))
    apu = sum(r.apu_cycles for r in rows)
    base = sum(r.baseline_cycles for r in rows)
    return CompareReport(baseline, mode, tuple(rows), apu, base)


def fits_blocks(outputs: int, inputs: int, cfg: AcceleratorConfig) -> int:
    """Fewest diagonal blocks whose size fits one PE."""
    return max(1, math.ceil(outputs / cfg.pe_rows), math.ceil(inputs / cfg.pe_cols))


def fc_suite(manifest: dict, baseline: BaselineSpec, mode: str = "spatial", seed: int = 0,
             sets=None) -> CompareReport:
    """Compare a list of standalone FC layer shapes, each compressed to the fewest
    blocks that fit a PE of the manifest's configuration.

    Manifest: ``{"config": {...}, "layers": [{"name", "outputs", "inputs", "set"}]}``;
    ``sets`` keeps only layers whose ``set`` is listed.
    """
    from .model import model_from_dict
    from .pruner import compress_model

    cfg = AcceleratorConfig.from_dict(manifest.get("config", {}))
    rows = []
    for i, spec in enumerate(manifest["layers"]):
        if sets is not None and spec.get("set") not in sets:
            continue
        name, r, c = spec["name"], int(spec["outputs"]), int(spec["inputs"])
        net = model_from_dict({"name": name, "input_shape": [c], "layers": [
            {"type": "FullyConnected", "name": name,
             "weight": {"shape": [r, c], "init": {"seed": seed + i}}}]}, materialize=False)
        nb = min(fits_blocks(r, c, cfg), r, c)
        rows.extend(compare(compress_model(net, nb, seed + i), cfg, baseline, mode=mode).rows)
    apu = sum(r.apu_cycles for r in rows)
    base = sum(r.baseline_cycles for r in rows)
    return CompareReport(baseline, mode, tuple(rows), apu, base)
