"""The ``.apu`` compressed-model archive.

An archive is a zip file with fixed timestamps and member order, so equal
content gives equal bytes.  Members:

``manifest.json``
    ``{"format": "apu/1", "name", "input_shape", "seed", "plan", "layers",
    "checksums"}``.  ``layers`` follows the model JSON layout except that
    tensors are ``{"shape", "member"}`` references, or ``{"shape", "init":
    {"dist": "constant", "value"}}`` for constant (shape-only) tensors.
    Compressed layers are ``{"type": "BlockDiagonal", "name", "num_blocks",
    "row_perm", "col_perm", "row_splits", "col_splits", "quant", "blocks",
    "biases"}``.  ``checksums`` maps every other member to its sha256.

``tensors/<layer>/<field>.npy``
    One little-endian ``.npy`` file per tensor.
"""
from __future__ import annotations

import hashlib
import io
import json
import zipfile
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import quant as q
from .errors import ChecksumError, ModelError
from .model import TYPE_NAMES, BlockDiagonalLayer, NetworkModel, _layer_from_dict, layer_to_dict

FORMAT = "apu/1"
MANIFEST = "manifest.json"
_EPOCH = (1980, 1, 1, 0, 0, 0)


@dataclass(frozen=True, eq=False)
class Archive:
    model: NetworkModel
    plan: q.QuantPlan | None
    seed: int | None
    meta: dict


def _is_constant(a: np.ndarray) -> bool:
    return a.size > 0 and all(s == 0 for s in a.strides)


class _Writer:
    def __init__(self):
        self.members = {}

    def tensor(self, a, member: str) -> dict:
        a = np.asarray(a)
        if _is_constant(a):
            return {"shape": list(a.shape),
                    "init": {"dist": "constant", "value": float(a.flat[0])}}
        buf = io.BytesIO()
        dtype = "<i8" if np.issubdtype(a.dtype, np.integer) else "<f8"
        np.save(buf, np.ascontiguousarray(a, dtype=dtype), allow_pickle=False)
        self.members[member] = buf.getvalue()
        return {"shape": list(a.shape), "member": member}


_TENSOR_FIELDS = {"FullyConnected": ("weight", "bias"), "Conv2D": ("kernel", "bias"),
                  "BatchNorm": ("gamma", "beta", "mean", "var"),
                  "MultiHeadAttention": ("wq", "wk", "wv", "wo")}


def _layer_entry(layer, w: _Writer) -> dict:
    base = f"tensors/{layer.name}/"
    if isinstance(layer, BlockDiagonalLayer):
        return {
            "type": "BlockDiagonal", "name": layer.name, "num_blocks": layer.num_blocks,
            "row_perm": w.tensor(layer.row_perm, base + "row_perm.npy"),
            "col_perm": w.tensor(layer.col_perm, base + "col_perm.npy"),
            "row_splits": list(layer.row_splits), "col_splits": list(layer.col_splits),
            "quant": layer.quant.to_dict() if layer.quant else None,
            "blocks": [w.tensor(b, f"{base}block{k}.npy") for k, b in enumerate(layer.blocks)],
            "biases": [w.tensor(b, f"{base}bias{k}.npy") for k, b in enumerate(layer.biases)],
        }
    fields = iter(_TENSOR_FIELDS.get(TYPE_NAMES[type(layer)], ()))

    def enc(a):
        return w.tensor(a, f"{base}{next(fields)}.npy")

    return layer_to_dict(layer, enc)


def archive_bytes(model: NetworkModel, plan: q.QuantPlan | None = None,
                  seed: int | None = None, meta: dict | None = None) -> bytes:
    w = _Writer()
    layers = [_layer_entry(layer, w) for layer in model.layers]
    manifest = {
        "format": FORMAT, "name": model.name, "input_shape": list(model.input_shape),
        "seed": seed, "plan": plan.to_dict() if plan else None, "meta": meta or {},
        "layers": layers,
        "checksums": {k: hashlib.sha256(v).hexdigest() for k, v in sorted(w.members.items())},
    }
    out = io.BytesIO()
    with zipfile.ZipFile(out, "w") as zf:
        entries = [(MANIFEST, json.dumps(manifest, sort_keys=True, indent=1).encode())]
        entries += sorted(w.members.items())
        for name, data in entries:
            info = zipfile.ZipInfo(name, date_time=_EPOCH)
            info.compress_type = zipfile.ZIP_DEFLATED
            info.external_attr = 0o644 << 16
            zf.writestr(info, data, compresslevel=6)
    return out.getvalue()


def save_archive(path, model: NetworkModel, plan: q.QuantPlan | None = None,
                 seed: int | None = None, meta: dict | None = None) -> str:
    """Write ``model`` to ``path``; returns the sha256 of the archive bytes."""
    data = archive_bytes(model, plan, seed, meta)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def _read_members(path) -> tuple[dict, dict]:
    try:
        with zipfile.ZipFile(path) as zf:
            raw = {name: zf.read(name) for name in zf.namelist()}
    except (zipfile.BadZipFile, zipfile.LargeZipFile, zlib.error, EOFError, ValueError) as exc:
        raise ChecksumError(f"{path}: checksum error, archive is corrupted ({exc})") from None
    if MANIFEST not in raw:
        raise ChecksumError(f"{path}: archive has no {MANIFEST}")
    try:
        manifest = json.loads(raw[MANIFEST])
    except (json.JSONDecodeError, UnicodeDecodeError):
        raise ChecksumError(f"{path}: {MANIFEST} is unreadable") from None
    if manifest.get("format") != FORMAT:
        raise ModelError(f"{path}: unsupported archive format {manifest.get('format')!r}")
    sums = manifest.get("checksums", {})
    for name, digest in sums.items():
        if name not in raw:
            raise ChecksumError(f"{path}: member {name} listed in the manifest is missing")
        if hashlib.sha256(raw[name]).hexdigest() != digest:
            raise ChecksumError(f"{path}: checksum mismatch for {name}")
    extra = set(raw) - set(sums) - {MANIFEST}
    if extra:
        raise ChecksumError(f"{path}: unlisted members {sorted(extra)}")
    return manifest, raw


def load_archive(path) -> Archive:
    """Read an archive, verifying every member against the manifest checksums."""
    path = Path(path)
    if not path.exists():
        raise ModelError(f"archive {str(path)!r} does not exist")
    manifest, raw = _read_members(path)

    def dec(ref, where):
        shape = tuple(int(s) for s in ref["shape"])
        if "member" in ref:
            a = np.load(io.BytesIO(raw[ref["member"]]), allow_pickle=False)
            if a.shape != shape:
                raise ChecksumError(f"{path}: {where} has shape {a.shape}, manifest says {shape}")
            return a
        init = ref.get("init", {})
        if init.get("dist") != "constant":
            raise ModelError(f"{path}: {where} has no tensor data")
        return np.broadcast_to(np.float64(init.get("value", 0.0)), shape)

    layers = []
    for d in manifest["layers"]:
        if d.get("type") == "BlockDiagonal":
            name = d["name"]
            layers.append(BlockDiagonalLayer(
                name,
                tuple(dec(b, f"{name}.block{k}") for k, b in enumerate(d["blocks"])),
                tuple(dec(b, f"{name}.bias{k}") for k, b in enumerate(d["biases"])),
                np.asarray(dec(d["row_perm"], f"{name}.row_perm"), dtype=np.int64),
                np.asarray(dec(d["col_perm"], f"{name}.col_perm"), dtype=np.int64),
                d["row_splits"], d["col_splits"],
                q.QuantSpec.from_dict(d["quant"]) if d.get("quant") else None))
        else:
            layers.append(_layer_from_dict(d, True, dec))
    model = NetworkModel(manifest.get("name", "model"), tuple(manifest["input_shape"]),
                         tuple(layers))
    plan = q.QuantPlan.from_dict(manifest["plan"]) if manifest.get("plan") else None
    return Archive(model, plan, manifest.get("seed"), manifest.get("meta", {}))
