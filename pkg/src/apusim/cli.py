"""``apusim`` command line.

Exit codes: 0 success, 2 usage or input error, 3 internal error.  Set
``APU_LOG`` to ``DEBUG``, ``INFO`` or ``WARNING`` (default) for progress
messages on stderr.  Paths of the form ``bundled:NAME`` resolve to files
shipped in ``apusim/data``.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import click
import numpy as np

from . import __version__
from . import archive as ar
from . import compare as cmp
from . import costmodel as cm
from . import mapper as mp
from . import model as ir
from . import pruner
from . import quant as q
from . import scheduler as sch
from . import simulator as sim
from .errors import ApuError, ChecksumError

log = logging.getLogger("apusim")

EXIT_INPUT = 2
EXIT_INTERNAL = 3
STAGES = ("compress", "calibrate", "input")


class StageError(ApuError):
    def __init__(self, stage, exc):
        self.stage = stage
        self.cause = exc
        super().__init__(f"{stage}: {exc}")


# ------------------------------------------------------------------ helpers

def sub_seed(seed: int, stage: str) -> int:
    """Deterministic per-stage seed derived from the single ``--seed``."""
    ss = np.random.SeedSequence([seed, STAGES.index(stage)])
    return int(ss.generate_state(1)[0])


def resolve(path) -> Path:
    s = str(path)
    if s.startswith("bundled:"):
        return ir.bundled_path(s[len("bundled:"):])
    return Path(s)


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=1) + "\n"


def emit(text: str, out):
    if out:
        Path(out).write_text(text)
        log.info("wrote %s", out)
    else:
        click.echo(text, nl=False)


def dict_rows_csv(rows, fields=None) -> str:
    rows = list(rows)
    fields = fields or (list(rows[0]) if rows else [])
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for r in rows:
        w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    return buf.getvalue()


def flat_csv(d: dict) -> str:
    """Two-column ``key,value`` CSV of a nested dict."""
    rows = []

    def walk(prefix, v):
        if isinstance(v, dict):
            for k in sorted(v):
                walk(f"{prefix}.{k}" if prefix else str(k), v[k])
        elif isinstance(v, (list, tuple)) and v and isinstance(v[0], dict):
            for i, x in enumerate(v):
                walk(f"{prefix}.{i}", x)
        else:
            rows.append({"key": prefix, "value": v})

    walk("", d)
    return dict_rows_csv(rows, ["key", "value"])


def load_config(path) -> mp.AcceleratorConfig:
    if path is None:
        return mp.load_config(ir.bundled_path("apu_default.json"))
    p = resolve(path)
    if not p.exists():
        raise ApuError(f"config file {str(path)!r} does not exist")
    return mp.load_config(p)


def load_any_model(path, shape_only=False):
    """``(model, plan, seed)`` from a model JSON or a ``.apu`` archive."""
    p = resolve(path)
    if not p.exists():
        raise ApuError(f"model file {str(path)!r} does not exist")
    if p.suffix == ".apu":
        a = ar.load_archive(p)
        return a.model, a.plan, a.seed
    return ir.load_model(p, materialize=not shape_only), None, None


def calibration_samples(model, count, seed):
    rng = np.random.default_rng(seed)
    return [rng.normal(size=model.input_shape) for _ in range(count)]


def read_input(path, model, seed):
    if path is None:
        return np.random.default_rng(sub_seed(seed, "input")).normal(size=model.input_shape)
    p = resolve(path)
    try:
        d = json.loads(p.read_text())
    except OSError as exc:
        raise ApuError(f"cannot read input file {str(path)!r}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ApuError(f"invalid JSON in input file {str(path)!r}: {exc.msg}") from None
    if isinstance(d, dict):
        x = ir.decode_tensor(d, where=str(path))
    else:
        x = np.asarray(d, dtype=np.float64)
    return x.reshape(model.input_shape) if x.size == int(np.prod(model.input_shape)) else x


def compress_model(model, blocks, bits, act_bits, scheme, seed, calib):
    cm_ = pruner.compress_model(model, blocks, sub_seed(seed, "compress"))
    cm_ = mp.prepare_model(cm_)
    shape_only = any(
        isinstance(w, np.ndarray) and w.size and all(s == 0 for s in w.strides)
        for w in (ir.layer_weights(layer) for layer in cm_.layers) if w is not None)
    plan = None
    if not shape_only:
        xs = calibration_samples(cm_, calib, sub_seed(seed, "calibrate"))
        plan = q.calibrate(cm_, xs, bits, act_bits, scheme, seed)
    return cm_, plan


def select_bits(prog) -> tuple[int, int]:
    """Verified schedules of every concrete round: (rounds, select-table bits)."""
    n = bits = 0
    for p in prog.phases:
        if isinstance(p, mp.Round) and p.demand is not None:
            s = p.schedule()
            chk = sch.verify_schedule(p.demand, s)
            if not chk.ok:
                raise AssertionError(f"invalid schedule in {p.layer}: {chk.first}")
            bits += sch.emit_selects(s, p.demand.num_sources).bits
            n += 1
    return n, bits


def cost_summary(cfg, mode, report=None, watts=None) -> dict:
    pe = cm.pe_cost(cfg.pe_rows, cfg.pe_cols, cfg.weight_bits, mode,
                    activation_bits=cfg.activation_bits)
    d = pe.to_dict()
    d["throughput"] = cm.throughput(cfg, report, watts)
    return d


@dataclass
class RunManifest:
    tool_version: str
    config_hash: str
    seeds: dict
    inputs: dict
    outputs: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return dumps(asdict(self))


# ---------------------------------------------------------------------- CLI

fmt_option = click.option("--format", "fmt", type=click.Choice(["json", "csv"]), default="json",
                          show_default=True, help="Output format.")
seed_option = click.option("--seed", type=int, default=0, show_default=True,
                           help="Single seed fanned out to every stage.")
out_option = click.option("--out", type=click.Path(dir_okay=False), default=None,
                          help="Write the result here instead of stdout.")


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
@click.version_option(__version__, prog_name="apusim")
def cli():
    """Structured-sparse accelerator toolchain: compress, schedule, map, simulate, cost."""


@cli.command()
@click.option("--model", "model_path", required=True, help="Model JSON.")
@click.option("--blocks", type=int, default=10, show_default=True,
              help="Diagonal blocks per fully connected layer.")
@click.option("--bits", type=click.Choice(["4", "8", "16"]), default="4", show_default=True)
@click.option("--act-bits", type=int, default=None, help="Activation bits (default --bits).")
@click.option("--scheme", type=click.Choice(q.SCHEMES), default=q.UNIFORM, show_default=True)
@click.option("--calib", type=int, default=8, show_default=True,
              help="Random calibration samples.")
@click.option("--shape-only", is_flag=True, help="Do not materialize init tensors.")
@seed_option
@click.option("--out", required=True, type=click.Path(dir_okay=False), help="Output .apu file.")
@fmt_option
def compress(model_path, blocks, bits, act_bits, scheme, calib, shape_only, seed, out, fmt):
    """Prune fully connected layers to block-diagonal form, quantize, write a .apu archive."""
    model, _, _ = load_any_model(model_path, shape_only)
    cmodel, plan = compress_model(model, blocks, int(bits), act_bits, scheme, seed, calib)
    digest = ar.save_archive(out, cmodel, plan, seed)
    rows = []
    for layer in cmodel.layers:
        if isinstance(layer, ir.BlockDiagonalLayer):
            r, c = layer.original_shape
            nz = sum(b.size for b in layer.blocks)
            rows.append({"layer": layer.name, "rows": r, "cols": c,
                         "blocks": layer.num_blocks, "density": nz / (r * c)})
    summary = {"archive": Path(out).name, "sha256": digest, "quantized": plan is not None,
               "layers": rows}
    emit(dumps(summary) if fmt == "json" else dict_rows_csv(rows), None)


@cli.command()
@click.option("--demand", "demand_path", default=None,
              help="Demand JSON {num_sources, num_dests, triples} or CSV source,dest,activation.")
@click.option("--random", "random_n", type=int, default=None,
              help="Instead of --demand, draw N random transfers on an --size crossbar.")
@click.option("--size", type=int, default=8, show_default=True)
@click.option("--strategy", type=click.Choice(sch.STRATEGIES), default="matching",
              show_default=True)
@click.option("--select-out", type=click.Path(dir_okay=False), default=None,
              help="Write the binary select table here.")
@seed_option
@out_option
@fmt_option
def schedule(demand_path, random_n, size, strategy, select_out, seed, out, fmt):
    """Build and verify a static crossbar schedule."""
    if (demand_path is None) == (random_n is None):
        raise click.UsageError("give exactly one of --demand or --random")
    if demand_path is not None:
        demand = read_demand(resolve(demand_path))
    else:
        rng = np.random.default_rng(seed)
        triples = {(int(rng.integers(size)), int(rng.integers(size)), i) for i in range(random_n)}
        demand = sch.RoutingDemand(size, size, tuple(sorted(triples, key=lambda t: t[2])))
    s = sch.build_schedule(demand, strategy)
    chk = sch.verify_schedule(demand, s)
    table = sch.emit_selects(s, demand.num_sources)
    if select_out:
        Path(select_out).write_bytes(table.to_bytes())
    if fmt == "csv":
        emit(s.to_csv(), out)
    else:
        emit(dumps({"length": s.length, "lower_bound": demand.lower_bound, "valid": chk.ok,
                    "violations": [str(v) for v in chk.violations], "select_bits": table.bits,
                    "select_width": table.width, "idle_slots": table.idle_count,
                    "cycles": [list(map(list, c)) for c in s.cycles]}), out)
    if not chk.ok:
        raise AssertionError(f"schedule failed verification: {chk.first}")


def read_demand(path: Path) -> sch.RoutingDemand:
    try:
        text = path.read_text()
    except OSError as exc:
        raise ApuError(f"cannot read demand file {str(path)!r}: {exc.strerror}") from None
    if path.suffix == ".csv":
        rows = list(csv.DictReader(io.StringIO(text)))
        try:
            triples = [(int(r["source"]), int(r["dest"]), int(r["activation"])) for r in rows]
        except (KeyError, ValueError) as exc:
            raise ApuError(f"{path}: demand CSV needs source,dest,activation columns") from exc
        ns = max((t[0] for t in triples), default=0) + 1
        nd = max((t[1] for t in triples), default=0) + 1
        return sch.RoutingDemand(ns, nd, tuple(triples))
    try:
        d = json.loads(text)
        return sch.RoutingDemand(int(d["num_sources"]), int(d["num_dests"]),
                                 tuple(tuple(t) for t in d["triples"]))
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise ApuError(f"invalid demand file {str(path)!r}: {exc}") from None


PROGRAM_FORMAT = "apu-program/1"


def load_program_file(path, config_path):
    """A program file pins a model file (by digest) and a configuration."""
    p = resolve(path)
    if p.suffix != ".json":
        return str(p), config_path, None
    try:
        d = json.loads(p.read_text())
    except OSError as exc:
        raise ApuError(f"cannot read program file {str(path)!r}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ApuError(f"invalid JSON in program file {str(path)!r}: {exc.msg}") from None
    if d.get("format") != PROGRAM_FORMAT:
        raise ApuError(f"{path} is not a program file")
    model = Path(d["model"])
    if not model.exists():
        raise ApuError(f"model file {str(model)!r} named by {path} does not exist")
    if file_digest(model) != d["model_sha256"]:
        raise ChecksumError(f"{model} changed since {path} was written")
    if config_path is not None:
        raise click.UsageError("a program file already fixes the configuration")
    return str(model), None, mp.AcceleratorConfig.from_dict(d["config"])


def _program(model_path, config_path, shape_only=False, cfg=None):
    cfg = cfg or load_config(config_path)
    model, plan, _ = load_any_model(model_path, shape_only)
    model = mp.prepare_model(model)
    return cfg, model, mp.map_model(model, cfg, plan)


@cli.command("map")
@click.option("--model", "model_path", required=True, help="Model JSON or .apu archive.")
@click.option("--config", "config_path", default=None, help="Accelerator config JSON.")
@click.option("--mode", type=click.Choice(sim.MODES), default="spatial", show_default=True)
@click.option("--dump-program", is_flag=True, help="Print the phase listing.")
@click.option("--shape-only", is_flag=True)
@click.option("--save-program", type=click.Path(dir_okay=False), default=None,
              help="Write a program file for `simulate --program`.")
@out_option
@fmt_option
def map_cmd(model_path, config_path, mode, dump_program, shape_only, save_program, out, fmt):
    """Map a model onto the PE array; print a summary or the phase listing."""
    cfg, _, prog = _program(model_path, config_path, shape_only)
    if save_program:
        src = resolve(model_path)
        Path(save_program).write_text(dumps({
            "format": PROGRAM_FORMAT, "model": str(src.resolve()),
            "model_sha256": file_digest(src), "config": cfg.to_dict()}))
    if dump_program:
        emit(mp.dump_program(prog, mode), out)
        return
    rows = [{"name": li.name, "kind": li.kind, "case": li.case, "blocks": li.blocks,
             "folds": li.folds, "utilization": prog.utilization(li.name, mode)}
            for li in prog.layers]
    if fmt == "csv":
        emit(dict_rows_csv(rows), out)
    else:
        emit(dumps({"config_hash": cfg.digest(), "mode": mode, "concrete": prog.concrete,
                    "estimate": prog.estimate(mode), "layers": rows}), out)


@cli.command()
@click.option("--program", "program_path", default=None,
              help="Program file written by `map --save-program`.")
@click.option("--model", "model_path", default=None, help="Model .apu archive.")
@click.option("--config", "config_path", default=None)
@click.option("--input", "input_path", default=None,
              help="Input JSON (tensor object or nested list); default: seeded random.")
@click.option("--mode", type=click.Choice(sim.MODES), default="spatial", show_default=True)
@click.option("--trace", "trace_path", type=click.Path(dir_okay=False), default=None,
              help="Write a cycle,unit,event CSV trace.")
@seed_option
@out_option
@fmt_option
def simulate(program_path, model_path, config_path, input_path, mode, trace_path, seed, out, fmt):
    """Cycle-accurate run of a mapped program on one input."""
    if (program_path is None) == (model_path is None):
        raise click.UsageError("give exactly one of --program or --model")
    cfg = None
    if program_path:
        model_path, config_path, cfg = load_program_file(program_path, config_path)
    cfg, model, prog = _program(model_path, config_path, cfg=cfg)
    x = read_input(input_path, model, seed)
    trace = [] if trace_path else None
    _, rep = sim.simulate(prog, x, mode, trace)
    if trace_path:
        write_trace(trace_path, trace)
    d = rep.to_dict()
    d["config_hash"] = cfg.digest()
    emit(dumps(d) if fmt == "json" else dict_rows_csv(d["layers"]), out)


def write_trace(path, trace):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["cycle", "unit", "event"])
    w.writerows(trace)
    Path(path).write_text(buf.getvalue())


@cli.command()
@click.option("--config", "config_path", default=None)
@click.option("--rows", type=int, default=None, help="Block rows (default: PE rows).")
@click.option("--cols", type=int, default=None, help="Block cols (default: PE cols).")
@click.option("--bits", type=click.Choice(["4", "8", "16"]), default=None)
@click.option("--mode", type=click.Choice(sim.MODES), default="spatial", show_default=True)
@click.option("--watts", type=float, default=0.44, show_default=True,
              help="Calibration power for TOPS/W.")
@out_option
@fmt_option
def cost(config_path, rows, cols, bits, mode, watts, out, fmt):
    """Per-cycle energy, area and throughput of one PE."""
    cfg = load_config(config_path)
    updates = {}
    if rows:
        updates["pe_rows"] = rows
    if cols:
        updates["pe_cols"] = cols
    if bits:
        updates["weight_bits"] = updates["activation_bits"] = int(bits)
    if updates:
        cfg = mp.AcceleratorConfig.from_dict({**cfg.to_dict(), **updates})
    d = cost_summary(cfg, mode, watts=watts)
    emit(dumps(d) if fmt == "json" else flat_csv(d), out)


@cli.command()
@click.option("--spec", "spec_path", required=True,
              help="Sweep JSON {block_sizes, bits, modes, interconnects, num_pes, clock_hz}.")
@click.option("--jobs", type=int, default=1, show_default=True, help="Parallel workers.")
@out_option
@fmt_option
def sweep(spec_path, jobs, out, fmt):
    """Evaluate the cost model over a grid of design points."""
    p = resolve(spec_path)
    try:
        spec = json.loads(p.read_text())
    except OSError as exc:
        raise ApuError(f"cannot read sweep spec {str(spec_path)!r}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ApuError(f"invalid JSON in {str(spec_path)!r}: {exc.msg}") from None
    if jobs < 1:
        raise click.UsageError("--jobs must be at least 1")
    rows = cm.sweep(spec, jobs=jobs)
    emit(cm.rows_to_csv(rows) if fmt == "csv" else dumps(rows), out)


@cli.command()
@click.option("--model", "model_path", default=None, help="Model JSON or .apu archive.")
@click.option("--suite", "suite_path", default=None,
              help="FC shape suite, e.g. bundled:fc_suite.json.")
@click.option("--set", "sets", multiple=True, help="Keep only suite layers of this set.")
@click.option("--config", "config_path", default=None)
@click.option("--baseline", type=click.Choice(cmp.KINDS), default="unstructured-sparse",
              show_default=True)
@click.option("--penalty", type=float, default=2.0, show_default=True)
@click.option("--pointer-bits", type=int, default=4, show_default=True)
@click.option("--macs-per-cycle", type=int, default=None)
@click.option("--mode", type=click.Choice(sim.MODES), default="spatial", show_default=True)
@click.option("--shape-only", is_flag=True)
@seed_option
@out_option
@fmt_option
def compare(model_path, suite_path, sets, config_path, baseline, penalty, pointer_bits,
            macs_per_cycle, mode, shape_only, seed, out, fmt):
    """Per-layer speedup of the accelerator over a baseline cycle model."""
    spec = cmp.BaselineSpec(baseline, macs_per_cycle, penalty, pointer_bits)
    if (model_path is None) == (suite_path is None):
        raise click.UsageError("give exactly one of --model or --suite")
    if suite_path:
        p = resolve(suite_path)
        try:
            manifest = json.loads(p.read_text())
        except OSError as exc:
            raise ApuError(f"cannot read suite {str(suite_path)!r}: {exc.strerror}") from None
        if config_path:
            manifest = {**manifest, "config": load_config(config_path).to_dict()}
        rep = cmp.fc_suite(manifest, spec, mode, seed, sets or None)
    else:
        cfg = load_config(config_path)
        model, _, _ = load_any_model(model_path, shape_only)
        rep = cmp.compare(model, cfg, spec, mode=mode)
    emit(dumps(rep.to_dict()) if fmt == "json" else rep.to_csv(), out)


@cli.command()
@click.option("--model", "model_path", required=True, help="Model JSON or .apu archive.")
@click.option("--config", "config_path", required=True)
@click.option("--blocks", type=int, default=10, show_default=True)
@click.option("--bits", type=click.Choice(["4", "8", "16"]), default="4", show_default=True)
@click.option("--act-bits", type=int, default=None)
@click.option("--scheme", type=click.Choice(q.SCHEMES), default=q.UNIFORM, show_default=True)
@click.option("--calib", type=int, default=8, show_default=True)
@click.option("--mode", type=click.Choice(sim.MODES), default="spatial", show_default=True)
@click.option("--input", "input_path", default=None)
@click.option("--watts", type=float, default=0.44, show_default=True)
@click.option("--shape-only", is_flag=True)
@click.option("--trace", is_flag=True, help="Also write trace.csv.")
@seed_option
@click.option("--out-dir", type=click.Path(file_okay=False), required=True)
@fmt_option
def pipeline(model_path, config_path, blocks, bits, act_bits, scheme, calib, mode, input_path,
             watts, shape_only, trace, seed, out_dir, fmt):
    """compress -> schedule -> map -> simulate -> cost, writing every report to --out-dir."""
    out = Path(out_dir)
    try:
        cfg = load_config(config_path)
    except ApuError as exc:
        raise StageError("config", exc) from None
    try:
        model, plan, _ = load_any_model(model_path, shape_only)
        if resolve(model_path).suffix == ".apu":
            model = mp.prepare_model(model)
        else:
            model, plan = compress_model(model, blocks, int(bits), act_bits, scheme, seed, calib)
    except ApuError as exc:
        raise StageError("compress", exc) from None
    out.mkdir(parents=True, exist_ok=True)
    ar.save_archive(out / "model.apu", model, plan, seed)
    try:
        prog = mp.map_model(model, cfg, plan)
    except ApuError as exc:
        raise StageError("map", exc) from None
    (out / "program.txt").write_text(mp.dump_program(prog, mode))
    rounds, bits_total = select_bits(prog)
    sched = {"rounds": rounds, "select_bits": bits_total, "interconnect": cfg.interconnect}
    outputs = {"archive": "model.apu", "program": "program.txt"}
    rep = None
    if prog.concrete:
        try:
            x = read_input(input_path, model, seed)
            tr = [] if trace else None
            _, rep = sim.simulate(prog, x, mode, tr)
        except ApuError as exc:
            raise StageError("simulate", exc) from None
        sim_d = rep.to_dict()
        if trace:
            write_trace(out / "trace.csv", tr)
            outputs["trace"] = "trace.csv"
    else:
        sim_d = {"mode": mode, "estimate": prog.estimate(mode), "simulated": False}
    sim_d["schedule"] = sched
    cost_d = cost_summary(cfg, mode, rep, watts)
    (out / "sim_report.json").write_text(dumps(sim_d))
    (out / "cost_report.json").write_text(dumps(cost_d))
    (out / "layers.csv").write_text(dict_rows_csv(sim_d["layers"]) if "layers" in sim_d else "")
    outputs.update(sim_report="sim_report.json", cost_report="cost_report.json",
                   layers="layers.csv")
    inputs = {"model": file_digest(resolve(model_path)), "config": cfg.digest()}
    if input_path:
        inputs["input"] = file_digest(resolve(input_path))
    manifest = RunManifest(__version__, cfg.digest(),
                           {"seed": seed, **{s: sub_seed(seed, s) for s in STAGES}},
                           inputs, outputs)
    (out / "manifest.json").write_text(manifest.to_json())
    summary = {"phase_cycles": sim_d.get("phase_cycles", sim_d.get("estimate")),
               "total_cycles": sim_d.get("total_cycles", sim_d.get("estimate", {}).get("total")),
               "throughput": cost_d["throughput"], "outputs": outputs}
    emit(dumps(summary) if fmt == "json" else flat_csv(summary), None)


# ------------------------------------------------------------------ entry

def _setup_logging():
    level = os.environ.get("APU_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    """Run the CLI and return its exit code (also used as the console script)."""
    _setup_logging()
    try:
        cli.main(args=argv, prog_name="apusim", standalone_mode=False)
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.ClickException as exc:
        exc.show()
        return EXIT_INPUT
    except click.Abort:
        click.echo("aborted", err=True)
        return EXIT_INPUT
    except ApuError as exc:
        click.echo(f"error: {exc}", err=True)
        return EXIT_INPUT
    except Exception as exc:  # noqa: BLE001 - anything else is a bug
        log.debug("internal error", exc_info=True)
        click.echo(f"internal error: {type(exc).__name__}: {exc}", err=True)
        return EXIT_INTERNAL
    return 0


if __name__ == "__main__":
    sys.exit(main())
