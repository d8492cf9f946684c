"""Binary and JSON encodings of a SequentialModel.

Binary layout (all integers little-endian)::

    magic      8 bytes  b"CANIDSNN"
    version    u16
    reserved   u16
    header_len u32      length of the UTF-8 JSON architecture header
    header     header_len bytes
    count      u64      number of float64 parameters
    crc32      u32      of the parameter payload
    payload    count * 8 bytes, float64 little-endian
"""

from __future__ import annotations

import json
import struct
import zlib

import numpy as np

from ..errors import CorruptPayload, VersionMismatch
from .layers import layer_from_config
from .model import SequentialModel

MAGIC = b"CANIDSNN"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sHHI")
_COUNT = struct.Struct("<QI")


def _header(model: SequentialModel) -> dict:
    return {
        "architecture": model.architecture(),
        "seed": model.seed,
        "trained": model.trained,
        "param_count": model.count_params(),
    }


def build_from_architecture(arch: dict, seed: int = 0) -> SequentialModel:
    layers = [layer_from_config(cfg) for cfg in arch["layers"]]
    return SequentialModel(layers, arch["loss"], tuple(arch["input_shape"]), seed=seed)


def serialize(model: SequentialModel) -> bytes:
    header = json.dumps(_header(model), sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload = np.ascontiguousarray(model.params, dtype="<f8").tobytes()
    return b"".join([
        _PREFIX.pack(MAGIC, FORMAT_VERSION, 0, len(header)),
        header,
        _COUNT.pack(model.count_params(), zlib.crc32(payload)),
        payload,
    ])


def deserialize(blob: bytes) -> SequentialModel:
    if len(blob) < _PREFIX.size:
        raise CorruptPayload("model blob is truncated")
    magic, version, _, header_len = _PREFIX.unpack_from(blob, 0)
    if magic != MAGIC:
        raise CorruptPayload("not a canids model (bad magic bytes)")
    if version > FORMAT_VERSION:
        raise VersionMismatch(f"model format version {version} is newer than supported {FORMAT_VERSION}")
    pos = _PREFIX.size
    try:
        header = json.loads(blob[pos:pos + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptPayload(f"unreadable model header: {exc}") from exc
    pos += header_len
    if len(blob) < pos + _COUNT.size:
        raise CorruptPayload("model blob is truncated")
    count, crc = _COUNT.unpack_from(blob, pos)
    pos += _COUNT.size
    payload = blob[pos:]
    if len(payload) != 8 * count:
        raise CorruptPayload(f"expected {8 * count} payload bytes, found {len(payload)}")
    if zlib.crc32(payload) != crc:
        raise CorruptPayload("parameter payload checksum mismatch")
    model = build_from_architecture(header["architecture"], seed=header.get("seed", 0))
    if model.count_params() != count:
        raise CorruptPayload("parameter count disagrees with architecture")
    model.params[...] = np.frombuffer(payload, dtype="<f8")
    model.trained = bool(header.get("trained", False))
    return model


def to_json(model: SequentialModel) -> dict:
    """Human-readable export for debugging; round-trips through ``from_json``."""
    doc = _header(model)
    doc["version"] = FORMAT_VERSION
    doc["parameters"] = [
        {"layer": s.layer, "role": s.role, "shape": list(s.shape),
         "values": model.params[s.offset:s.offset + s.size].tolist()}
        for s in model.layout
    ]
    return doc


def from_json(doc: dict) -> SequentialModel:
    if doc.get("version", 0) > FORMAT_VERSION:
        raise VersionMismatch(f"model JSON version {doc['version']} is newer than supported")
    model = build_from_architecture(doc["architecture"], seed=doc.get("seed", 0))
    slots = {(s.layer, s.role): s for s in model.layout}
    for entry in doc["parameters"]:
        s = slots[(entry["layer"], entry["role"])]
        model.params[s.offset:s.offset + s.size] = np.asarray(entry["values"], dtype=np.float64)
    model.trained = bool(doc.get("trained", False))
    return model
