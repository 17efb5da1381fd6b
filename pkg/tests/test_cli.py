import json
import shutil
import subprocess
import sys

import pytest

from apusim import scheduler as sc
from apusim.cli import main, sub_seed


def run(capsys, *args):
    rc = main([str(a) for a in args])
    out, err = capsys.readouterr()
    return rc, out, err


@pytest.fixture
def mlp_archive(tmp_path, capsys):
    path = tmp_path / "m.apu"
    rc, out, _ = run(capsys, "compress", "--model", "bundled:lenet300.json", "--blocks", 4,
                     "--out", path)
    assert rc == 0 and json.loads(out)["quantized"]
    return path


def test_version_and_help(capsys):
    rc, out, _ = run(capsys, "--version")
    assert rc == 0 and "apusim" in out
    rc, out, _ = run(capsys, "--help")
    assert rc == 0
    for cmd in ("compress", "schedule", "map", "simulate", "cost", "sweep", "compare",
                "pipeline"):
        assert cmd in out


def test_usage_errors_exit_2(capsys):
    assert run(capsys, "map")[0] == 2
    assert run(capsys, "nonsense")[0] == 2
    assert run(capsys, "schedule")[0] == 2


def test_missing_config_names_path(capsys, tmp_path):
    rc, _, err = run(capsys, "pipeline", "--model", "bundled:fc4000.json", "--config",
                     tmp_path / "missing.json", "--out-dir", tmp_path / "o")
    assert rc == 2 and "missing.json" in err


def test_missing_model(capsys):
    rc, _, err = run(capsys, "map", "--model", "nope.json")
    assert rc == 2 and "nope.json" in err


def test_corrupted_archive(capsys, mlp_archive):
    data = bytearray(mlp_archive.read_bytes())
    mid = len(data) // 2
    data[mid:mid + 32] = bytes(32)
    mlp_archive.write_bytes(bytes(data))
    rc, _, err = run(capsys, "simulate", "--model", mlp_archive)
    assert rc == 2 and "checksum" in err


def test_compress_csv(capsys, tmp_path):
    rc, out, _ = run(capsys, "compress", "--model", "bundled:lenet300.json", "--blocks", 2,
                     "--out", tmp_path / "a.apu", "--format", "csv")
    lines = out.splitlines()
    assert rc == 0 and lines[0] == "layer,rows,cols,blocks,density" and len(lines) == 4


def test_schedule_random_and_select_dump(capsys, tmp_path):
    sel = tmp_path / "sel.bin"
    rc, out, _ = run(capsys, "schedule", "--random", 40, "--size", 6, "--select-out", sel)
    d = json.loads(out)
    assert rc == 0 and d["valid"] and d["length"] == d["lower_bound"]
    table = sc.SelectTable.from_bytes(sel.read_bytes())
    assert table.bits == d["select_bits"] == 6 * d["length"] * 3


def test_schedule_from_files(capsys, tmp_path):
    j = tmp_path / "d.json"
    j.write_text(json.dumps({"num_sources": 2, "num_dests": 2,
                             "triples": [[0, 0, 0], [0, 1, 1], [1, 0, 2], [1, 1, 3]]}))
    rc, out, _ = run(capsys, "schedule", "--demand", j)
    assert rc == 0 and json.loads(out)["length"] == 2
    c = tmp_path / "d.csv"
    c.write_text("source,dest,activation\n0,0,5\n0,0,6\n")
    rc, out, _ = run(capsys, "schedule", "--demand", c, "--format", "csv", "--strategy", "greedy")
    assert rc == 0 and out.splitlines() == ["cycle,source,dest,activation_index",
                                            "0,0,0,5", "1,0,0,6"]
    j.write_text("{")
    assert run(capsys, "schedule", "--demand", j)[0] == 2


def test_map_outputs(capsys, mlp_archive, tmp_path):
    rc, out, _ = run(capsys, "map", "--model", mlp_archive, "--config", "bundled:apu_default.json")
    d = json.loads(out)
    assert rc == 0 and d["concrete"] and [l["name"] for l in d["layers"]][0] == "fc1"
    rc, out, _ = run(capsys, "map", "--model", mlp_archive, "--dump-program")
    assert rc == 0 and out.startswith("# program for 10 PEs") and "# totals" in out
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"num_pes": 9, "pe_rows": 513, "pe_cols": 513}))
    rc, out, _ = run(capsys, "map", "--model", "bundled:vgg19_group.json", "--shape-only",
                     "--config", cfg, "--format", "csv")
    assert rc == 0 and out.splitlines()[0] == "name,kind,case,blocks,folds,utilization"


def test_simulate_program_file_and_trace(capsys, mlp_archive, tmp_path):
    prog = tmp_path / "p.json"
    assert run(capsys, "map", "--model", mlp_archive, "--save-program", prog)[0] == 0
    trace = tmp_path / "t.csv"
    rc, out, _ = run(capsys, "simulate", "--program", prog, "--trace", trace, "--seed", 3)
    d = json.loads(out)
    assert rc == 0 and d["total_cycles"] > 0 and len(d["output"]) == 10
    assert trace.read_text().startswith("cycle,unit,event\n")
    rc2, out2, _ = run(capsys, "simulate", "--model", mlp_archive, "--seed", 3)
    assert json.loads(out2)["output"] == d["output"]
    x = tmp_path / "x.json"
    x.write_text(json.dumps([0.0] * 784))
    rc, out, _ = run(capsys, "simulate", "--model", mlp_archive, "--input", x,
                     "--mode", "temporal", "--format", "csv")
    assert rc == 0 and out.splitlines()[0].startswith("name,kind")
    # the program file pins the archive digest
    shutil.copy(mlp_archive, tmp_path / "keep.apu")
    run(capsys, "compress", "--model", "bundled:lenet300.json", "--blocks", 2, "--out",
        mlp_archive)
    rc, _, err = run(capsys, "simulate", "--program", prog)
    assert rc == 2 and "changed" in err


def test_cost_and_sweep(capsys, tmp_path):
    rc, out, _ = run(capsys, "cost")
    t = json.loads(out)["throughput"]
    assert rc == 0 and 15 <= t["tops"] <= 17 and 34 <= t["tops_per_watt"] <= 39
    rc, out, _ = run(capsys, "cost", "--rows", 200, "--cols", 200, "--bits", 8, "--format", "csv")
    assert rc == 0 and out.splitlines()[0] == "key,value"
    spec = tmp_path / "s.json"
    spec.write_text(json.dumps({"block_sizes": [200, 400], "bits": [4, 16],
                                "interconnects": ["mux", "clos"]}))
    rc, out, _ = run(capsys, "sweep", "--spec", spec, "--format", "csv")
    assert rc == 0 and len(out.splitlines()) == 9
    rc, out2, _ = run(capsys, "sweep", "--spec", spec, "--format", "csv", "--jobs", 2)
    assert out2 == out
    assert run(capsys, "sweep", "--spec", tmp_path / "none.json")[0] == 2


def test_compare_suite_and_model(capsys, mlp_archive):
    rc, out, _ = run(capsys, "compare", "--suite", "bundled:fc_suite.json", "--set", "alexnet-vgg")
    d = json.loads(out)
    assert rc == 0 and len(d["layers"]) == 6 and all(r["speedup"] >= 2 for r in d["layers"])
    rc, out, _ = run(capsys, "compare", "--model", mlp_archive, "--baseline", "apu",
                     "--format", "csv")
    assert rc == 0 and out.splitlines()[-1].endswith("1.0")
    assert run(capsys, "compare")[0] == 2


def test_pipeline_outputs_and_determinism(capsys, tmp_path):
    outs = []
    for k in range(2):
        d = tmp_path / f"run{k}"
        rc, out, err = run(capsys, "pipeline", "--model", "bundled:lenet300.json", "--config",
                           "bundled:apu_default.json", "--blocks", 4, "--out-dir", d, "--trace")
        assert rc == 0, err
        outs.append(d)
    names = {"model.apu", "program.txt", "sim_report.json", "cost_report.json", "layers.csv",
             "manifest.json", "trace.csv"}
    assert {p.name for p in outs[0].iterdir()} == names
    for n in names:
        assert (outs[0] / n).read_bytes() == (outs[1] / n).read_bytes(), n
    man = json.loads((outs[0] / "manifest.json").read_text())
    assert man["seeds"]["compress"] == sub_seed(0, "compress")
    # feeding the archive back skips recompression
    rc, _, err = run(capsys, "pipeline", "--model", outs[0] / "model.apu", "--config",
                     "bundled:apu_default.json", "--out-dir", tmp_path / "again")
    assert rc == 0, err
    a = json.loads((outs[0] / "sim_report.json").read_text())
    b = json.loads((tmp_path / "again" / "sim_report.json").read_text())
    assert a["output"] == b["output"]


def test_pipeline_stage_errors(capsys, tmp_path):
    cfg = tmp_path / "tiny.json"
    cfg.write_text(json.dumps({"num_pes": 2, "pe_rows": 8, "pe_cols": 8}))
    rc, _, err = run(capsys, "pipeline", "--model", "bundled:lenet300.json", "--config", cfg,
                     "--out-dir", tmp_path / "o")
    assert rc == 2 and "map:" in err


def test_console_script_exit_code(tmp_path):
    exe = shutil.which("apusim")
    cmd = [exe] if exe else [sys.executable, "-m", "apusim.cli"]
    res = subprocess.run(cmd + ["cost", "--config", str(tmp_path / "x.json")],
                         capture_output=True, text=True)
    assert res.returncode == 2 and "x.json" in res.stderr
