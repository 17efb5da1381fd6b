import io
import zipfile

import numpy as np
import pytest

from apusim import archive as ar
from apusim import model as m
from apusim import pruner as pr
from apusim import quant as q
from apusim.errors import ChecksumError, ModelError


def sample(rng):
    net = m.NetworkModel("cnn", (2, 6, 6), (
        m.Conv2D("conv", rng.normal(size=(4, 2, 3, 3)), rng.normal(size=4), 1, 1),
        m.BatchNorm("bn", *(rng.uniform(0.5, 1.5, 4) for _ in range(4))),
        m.ReLU("relu"), m.MaxPool2D("pool", 2, 2), m.Flatten("flat"),
        m.FullyConnected("fc", rng.normal(size=(6, 36)), rng.normal(size=6))))
    return pr.compress_model(net, 3, seed=2)


def same_model(a, b):
    assert a.name == b.name and a.input_shape == b.input_shape
    for la, lb in zip(a.layers, b.layers, strict=True):
        assert type(la) is type(lb) and la.name == lb.name
        if isinstance(la, m.BlockDiagonalLayer):
            assert la.num_blocks == lb.num_blocks and la.quant == lb.quant
            assert np.array_equal(la.dense()[0], lb.dense()[0])
            assert np.array_equal(la.row_perm, lb.row_perm)
        else:
            assert m.layer_to_dict(la) == m.layer_to_dict(lb)


def test_round_trip(tmp_path, rng):
    net = sample(rng)
    plan = q.calibrate(net.replace([l for l in net.layers if not isinstance(l, m.BatchNorm)]),
                       [rng.normal(size=(2, 6, 6))], 4, 4)
    digest = ar.save_archive(tmp_path / "a.apu", net, plan, seed=9, meta={"k": 1})
    back = ar.load_archive(tmp_path / "a.apu")
    same_model(net, back.model)
    assert back.plan == plan and back.seed == 9 and back.meta == {"k": 1}
    assert len(digest) == 64
    x = rng.normal(size=(2, 6, 6))
    assert np.array_equal(m.reference_eval(net, x), m.reference_eval(back.model, x))


def test_bytes_are_deterministic(rng):
    net = sample(rng)
    assert ar.archive_bytes(net, seed=1) == ar.archive_bytes(net, seed=1)


def test_shape_only_layers_store_no_tensors(tmp_path):
    d = {"name": "big", "input_shape": [4000], "layers": [
        {"type": "FullyConnected", "name": "fc", "weight": {"shape": [4000, 4000], "init": {}}}]}
    net = pr.compress_model(m.model_from_dict(d, materialize=False), 10)
    ar.save_archive(tmp_path / "s.apu", net)
    with zipfile.ZipFile(tmp_path / "s.apu") as zf:
        names = zf.namelist()
    assert "tensors/fc/block0.npy" not in names and "tensors/fc/row_perm.npy" in names
    back = ar.load_archive(tmp_path / "s.apu").model.layers[0]
    assert [b.shape for b in back.blocks] == [(400, 400)] * 10
    assert all(b.strides == (0, 0) for b in back.blocks)


def _rewrite(src, dst, edit):
    with zipfile.ZipFile(src) as zf:
        members = {n: zf.read(n) for n in zf.namelist()}
    edit(members)
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w") as zf:
        for n, data in members.items():
            zf.writestr(n, data)
    dst.write_bytes(buf.getvalue())


def test_tampering_detected(tmp_path, rng):
    path = tmp_path / "a.apu"
    ar.save_archive(path, sample(rng))
    member = "tensors/fc/block0.npy"

    def flip(ms):
        data = bytearray(ms[member])
        data[-1] ^= 1
        ms[member] = bytes(data)

    cases = {
        "checksum mismatch": flip,
        "missing": lambda ms: ms.pop(member),
        "unlisted": lambda ms: ms.__setitem__("extra.bin", b"x"),
        "no manifest.json": lambda ms: ms.pop(ar.MANIFEST),
    }
    for msg, edit in cases.items():
        bad = tmp_path / f"{msg.replace(' ', '_')}.apu"
        _rewrite(path, bad, edit)
        with pytest.raises(ChecksumError, match=msg):
            ar.load_archive(bad)


def test_corrupted_bytes(tmp_path, rng):
    path = tmp_path / "a.apu"
    ar.save_archive(path, sample(rng))
    data = bytearray(path.read_bytes())
    mid = len(data) // 2
    data[mid:mid + 16] = bytes(16)
    path.write_bytes(bytes(data))
    with pytest.raises(ChecksumError, match="checksum"):
        ar.load_archive(path)
    path.write_bytes(b"not a zip")
    with pytest.raises(ChecksumError):
        ar.load_archive(path)


def test_wrong_format_and_missing(tmp_path, rng):
    path = tmp_path / "a.apu"
    ar.save_archive(path, sample(rng))

    def bump(ms):
        ms[ar.MANIFEST] = ms[ar.MANIFEST].replace(b'"apu/1"', b'"apu/9"')

    _rewrite(path, tmp_path / "b.apu", bump)
    with pytest.raises(ModelError, match="apu/9"):
        ar.load_archive(tmp_path / "b.apu")
    with pytest.raises(ModelError, match="does not exist"):
        ar.load_archive(tmp_path / "none.apu")
