"""Analytic energy, area and throughput model of one PE and the routing fabric.

Units are relative: one 4-bit x 4-bit multiply costs 1 energy unit.
Energies are per PE cycle.  The weight SRAM term covers the whole array
(a row read drives bitlines spanning every row), so it grows with
``rows * cols * bits``; the datapath terms grow with the number of lanes.
"""
from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ApuError

SUPPORTED_BITS = (4, 8, 16)
COMPONENTS = ("weight_sram", "multipliers", "adder_tree", "register_file", "quantizer", "routing")
REQUANT_BITS = 23


@dataclass(frozen=True)
class CostParams:
    mult_energy: float = 1.0          # one 4x4-bit multiply
    adder_energy_per_bit: float = 0.02
    sram_energy_per_bit: float = 6e-4
    sram_alpha: float = 0.1           # array-size growth of SRAM access energy
    regfile_energy_per_bit: float = 0.05
    quantizer_energy_per_bit: float = 5.0
    routing_energy_per_bit: float = 50.0
    offchip_ratio: float = 10.0       # off-chip DRAM access vs on-chip SRAM
    near_memory_factor: float = 3.0   # shared on-chip SRAM vs PE-local SRAM
    mult_area_per_bit2: float = 1.0
    adder_area_per_bit: float = 0.5
    sram_area_per_bit: float = 0.05
    regfile_area_per_bit: float = 0.3

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not v > 0:
                raise ApuError(f"cost parameter {k} must be positive")


@dataclass(frozen=True)
class CostReport:
    rows: int
    cols: int
    weight_bits: int
    activation_bits: int
    mode: str
    energy: dict
    area: dict
    ops_per_cycle: int

    @property
    def total_energy(self) -> float:
        return float(sum(self.energy.values()))

    @property
    def total_area(self) -> float:
        return float(sum(self.area.values()))

    @property
    def memory_energy(self) -> float:
        return self.energy["weight_sram"]

    @property
    def compute_energy(self) -> float:
        return self.energy["multipliers"] + self.energy["adder_tree"]

    @property
    def memory_area(self) -> float:
        return self.area["weight_sram"]

    @property
    def compute_area(self) -> float:
        return self.area["multipliers"] + self.area["adder_tree"]

    def share(self, part: str) -> float:
        if part == "memory":
            v = self.memory_energy
        elif part == "compute":
            v = self.compute_energy
        else:
            v = self.energy[part]
        return v / self.total_energy

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(total_energy=self.total_energy, total_area=self.total_area,
                 memory_share=self.share("memory"), compute_share=self.share("compute"))
        return d


def tree_shape(n: int):
    """Adders per stage of a pairwise tree over ``n`` inputs."""
    adders = []
    while n > 1:
        adders.append(n // 2)
        n = n // 2 + n % 2
    return adders


def multiplier_energy(weight_bits: int, activation_bits: int, params: CostParams) -> float:
    """Array multiplier: bits_w * bits_a partial products through a log-depth reduction."""
    b = max(weight_bits, activation_bits)
    return params.mult_energy * (weight_bits * activation_bits / 16) * math.log2(b) / 2


def ops_per_output(n_inputs: int, weight_bits: int = 4, activation_bits: int = 4) -> int:
    """4-bit-equivalent operations to produce one output from ``n_inputs`` products.

    A 4x4-bit multiply counts 2 (wider multiplies count the number of 4x4
    tiles they need, times 2), an adder of operand width ``w`` counts
    ``w // 4`` and the final quantizer counts ``final_width // 4``.
    """
    mult = 2 * math.ceil(weight_bits / 4) * math.ceil(activation_bits / 4)
    pw = weight_bits + activation_bits
    ops = n_inputs * mult
    for s, k in enumerate(tree_shape(n_inputs)):
        ops += k * ((pw + s) // 4)
    final = pw + (math.ceil(math.log2(n_inputs)) if n_inputs > 1 else 0)
    return ops + final // 4


def pe_cost(rows: int, cols: int, weight_bits: int = 4, mode: str = "spatial",
            params: CostParams | None = None, activation_bits: int | None = None) -> CostReport:
    """Per-cycle energy and area of a PE holding a ``rows x cols`` block.

    Spatial mode reduces ``cols`` products through a widening adder tree.
    Temporal mode uses full accumulator-width adders and adds a register
    file of ``rows`` partial sums.
    """
    if rows < 1 or cols < 1:
        raise ApuError("block dimensions must be positive")
    if mode not in ("spatial", "temporal"):
        raise ApuError(f"unknown PE mode {mode!r}")
    p = params or CostParams()
    ab = activation_bits or weight_bits
    pw = weight_bits + ab
    stages = tree_shape(cols)
    acc_width = pw + (math.ceil(math.log2(cols)) if cols > 1 else 0)
    array_bits = rows * cols * weight_bits
    sram = p.sram_energy_per_bit * array_bits * (1 + p.sram_alpha * math.log2(array_bits))
    mults = cols * multiplier_energy(weight_bits, ab, p)
    if mode == "spatial":
        adder_bits = sum(k * (pw + s) for s, k in enumerate(stages))
        regfile = 0.0
        rf_area = 0.0
    else:
        adder_bits = sum(stages) * acc_width
        regfile = p.regfile_energy_per_bit * rows * acc_width
        rf_area = p.regfile_area_per_bit * rows * acc_width
    adders = p.adder_energy_per_bit * adder_bits
    quant = p.quantizer_energy_per_bit * acc_width
    routing = p.routing_energy_per_bit * ab
    energy = {"weight_sram": sram, "multipliers": mults, "adder_tree": adders,
              "register_file": regfile, "quantizer": quant, "routing": routing}
    area = {"weight_sram": p.sram_area_per_bit * array_bits,
            "multipliers": p.mult_area_per_bit2 * cols * weight_bits * ab,
            "adder_tree": p.adder_area_per_bit * adder_bits,
            "register_file": rf_area,
            "quantizer": p.adder_area_per_bit * (acc_width + REQUANT_BITS),
            "routing": p.adder_area_per_bit * ab}
    return CostReport(rows, cols, weight_bits, ab, mode, energy, area,
                      ops_per_output(cols, weight_bits, ab))


def precision_sweep(rows: int = 400, cols: int = 400, bits=SUPPORTED_BITS,
                    params: CostParams | None = None, mode: str = "spatial"):
    out = []
    for b in bits:
        if b not in SUPPORTED_BITS:
            raise ApuError(f"unsupported bit width {b}; pick from {SUPPORTED_BITS}")
        out.append(pe_cost(rows, cols, b, mode, params))
    return out


def access_energy(bits: int, level: str = "pe", params: CostParams | None = None) -> float:
    """Energy to read ``bits`` from PE-local SRAM, shared on-chip SRAM or off-chip DRAM."""
    p = params or CostParams()
    base = p.sram_energy_per_bit * bits
    if level == "pe":
        return base
    if level == "chip":
        return base * p.near_memory_factor
    if level == "dram":
        return base * p.near_memory_factor * p.offchip_ratio
    raise ApuError(f"unknown memory level {level!r}")


def interconnect_memory(kind: str, n: int, length: int, num_sources: int | None = None) -> int:
    """Bits of routing-control memory for ``n`` destinations over ``length`` cycles."""
    if n < 2:
        raise ApuError("interconnect size must be at least 2")
    ns = n if num_sources is None else num_sources
    if kind == "mux":
        from .scheduler import select_width

        return n * length * select_width(ns)
    if kind == "crossbar":
        return n * n * length
    if kind == "clos":
        return int(round(6 * n ** 1.5 * length))
    raise ApuError(f"unknown interconnect {kind!r}")


def throughput(cfg, report=None, watts: float | None = None) -> dict:
    """Normalized ops per PE cycle, TOPS and (with a calibration wattage) TOPS/W.

    Without a report the PE is assumed saturated with a full
    ``pe_rows x pe_cols`` block.
    """
    if watts is not None and not watts > 0:
        raise ApuError("calibration wattage must be positive")
    if report is None:
        per_pe = ops_per_output(cfg.pe_cols, cfg.weight_bits, cfg.activation_bits)
    else:
        comp = report.phase_cycles["compute"]
        if comp == 0:
            raise ApuError("report has no compute cycles")
        per_pe = report.ops / (cfg.num_pes * comp)
    tops = per_pe * cfg.clock_hz * cfg.num_pes * 1e-12
    out = {"ops_per_cycle_per_pe": per_pe, "tops": tops}
    if watts is not None:
        out["watts"] = watts
        out["tops_per_watt"] = tops / watts
    return out


def loglog_slope(xs, ys) -> float:
    return float(np.polyfit(np.log(np.asarray(xs, float)), np.log(np.asarray(ys, float)), 1)[0])


# ---------------------------------------------------------------- sweeps

SWEEP_FIELDS = ("block", "bits", "mode", "interconnect", "num_pes", "memory_energy",
                "compute_energy", "total_energy", "memory_share", "memory_area", "compute_area",
                "total_area", "ops_per_cycle", "tops", "routing_bits")


def _sweep_point(args):
    block, bits, mode, kind, num_pes, clock_hz, params = args
    rep = pe_cost(block, block, bits, mode, params)
    n = num_pes * block
    return {
        "block": block, "bits": bits, "mode": mode, "interconnect": kind, "num_pes": num_pes,
        "memory_energy": rep.memory_energy, "compute_energy": rep.compute_energy,
        "total_energy": rep.total_energy, "memory_share": rep.share("memory"),
        "memory_area": rep.memory_area, "compute_area": rep.compute_area,
        "total_area": rep.total_area, "ops_per_cycle": rep.ops_per_cycle,
        "tops": rep.ops_per_cycle * clock_hz * num_pes * 1e-12,
        "routing_bits": interconnect_memory(kind, n, block, num_pes),
    }


def sweep(spec: dict, params: CostParams | None = None, jobs: int = 1) -> list:
    """Evaluate every (block, bits, mode, interconnect) combination of ``spec``.

    ``spec`` keys: ``block_sizes``, ``bits``, ``modes`` (default spatial),
    ``interconnects`` (default mux), ``num_pes`` (default 10), ``clock_hz``.
    Rows come back in the nested order of the lists regardless of ``jobs``.
    """
    try:
        blocks = [int(b) for b in spec["block_sizes"]]
        bits = [int(b) for b in spec["bits"]]
    except KeyError as exc:
        raise ApuError(f"sweep spec missing {exc.args[0]!r}") from None
    for b in bits:
        if b not in SUPPORTED_BITS:
            raise ApuError(f"unsupported bit width {b}")
    modes = spec.get("modes", ["spatial"])
    kinds = spec.get("interconnects", ["mux"])
    num_pes = int(spec.get("num_pes", 10))
    clock = float(spec.get("clock_hz", 1e9))
    points = [(bl, bi, m, k, num_pes, clock, params)
              for bl in blocks for bi in bits for m in modes for k in kinds]
    if jobs > 1 and len(points) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            return list(ex.map(_sweep_point, points))
    return [_sweep_point(pt) for pt in points]


def rows_to_csv(rows, fields=SWEEP_FIELDS) -> str:
    out = io.StringIO()
    w = csv.DictWriter(out, fieldnames=list(fields), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()
                    if k in fields})
    return out.getvalue()
