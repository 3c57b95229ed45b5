"""Binary checkpoints: magic "SINF", version, config, named float32 records.

Layout (all integers little-endian):

    magic      4 bytes  b"SINF"
    version    uint32
    header     uint64 length + that many bytes of JSON
    records    uint32 count, then per record:
                   uint16 name length + utf8 name
                   uint8 ndim, ndim * uint32 dims
                   float32 data, row-major
    checksum   uint32 CRC-32 of everything after the version field

The header JSON holds the model config plus whatever training state the
caller passes (epoch, rng state, optimizer flag, config hash). Record names
are prefixed "param/", "momentum/", or "buffer/". Serialization is fully
deterministic, so save -> load -> save reproduces the file byte for byte.
"""

from __future__ import annotations

import hashlib
import json
import struct
import zlib

import numpy as np

MAGIC = b"SINF"
VERSION = 1


class CheckpointError(RuntimeError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointHashError(CheckpointError):
    pass


def config_hash(config_dict) -> str:
    blob = json.dumps(config_dict, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def _pack_record(name: str, arr: np.ndarray) -> bytes:
    data = np.ascontiguousarray(arr, dtype="<f4")
    nb = name.encode()
    parts = [struct.pack("<H", len(nb)), nb, struct.pack("<B", data.ndim)]
    parts.extend(struct.pack("<I", d) for d in data.shape)
    parts.append(data.tobytes())
    return b"".join(parts)


def serialize(header: dict, records: list[tuple[str, np.ndarray]]) -> bytes:
    hjson = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    body = [struct.pack("<Q", len(hjson)), hjson, struct.pack("<I", len(records))]
    for name, arr in records:
        body.append(_pack_record(name, arr))
    payload = b"".join(body)
    crc = zlib.crc32(payload) & 0xFFFFFFFF
    return MAGIC + struct.pack("<I", VERSION) + payload + struct.pack("<I", crc)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.blob):
            raise CheckpointTruncatedError(
                f"checkpoint ends at byte {len(self.blob)}, needed {self.pos + n}")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def u8(self):
        return struct.unpack("<B", self.take(1))[0]

    def u16(self):
        return struct.unpack("<H", self.take(2))[0]

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]

    def u64(self):
        return struct.unpack("<Q", self.take(8))[0]


def deserialize(blob: bytes) -> tuple[dict, dict]:
    """Returns (header, {name: float32 array}). Verifies magic, version, CRC."""
    if len(blob) < 8 or blob[:4] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version = struct.unpack("<I", blob[4:8])[0]
    if version != VERSION:
        raise CheckpointVersionError(f"checkpoint version {version}, expected {VERSION}")
    if len(blob) < 12:
        raise CheckpointTruncatedError("checkpoint too short for checksum")
    payload, stored = blob[8:-4], struct.unpack("<I", blob[-4:])[0]
    if zlib.crc32(payload) & 0xFFFFFFFF != stored:
        raise CheckpointHashError("checkpoint checksum mismatch")
    r = _Reader(payload)
    hlen = r.u64()
    header = json.loads(r.take(hlen).decode())
    count = r.u32()
    records = {}
    for _ in range(count):
        name = r.take(r.u16()).decode()
        ndim = r.u8()
        shape = tuple(r.u32() for _ in range(ndim))
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(shape).copy()
        records[name] = arr
    return header, records


# ---------------------------------------------------------------------------
# model-level save / load
# ---------------------------------------------------------------------------

def model_records(model, include_momentum=False):
    recs = [(f"param/{name}", p.value) for name, p in model.named_params()]
    recs.extend((f"buffer/{name}", arr) for name, arr in model.named_buffers())
    if include_momentum:
        recs.extend((f"momentum/{name}", p.momentum) for name, p in model.named_params())
    return recs


def save_model(model, path, extra=None, include_momentum=False):
    cfg = model.config.to_dict()
    header = {
        "config": cfg,
        "config_hash": config_hash(cfg),
        "extra": extra or {},
        "has_momentum": bool(include_momentum),
    }
    blob = serialize(header, model_records(model, include_momentum))
    with open(path, "wb") as fh:
        fh.write(blob)
    return blob


def load_model(path, expect_config=None):
    """Rebuild a model from a checkpoint; returns (model, header).

    With expect_config given, its hash must match the stored one.
    """
    from .model import GatedSegModel, ModelConfig

    with open(path, "rb") as fh:
        header, records = deserialize(fh.read())
    if expect_config is not None:
        want = config_hash(expect_config.to_dict()
                           if isinstance(expect_config, ModelConfig) else expect_config)
        if want != header["config_hash"]:
            raise CheckpointHashError(
                f"checkpoint was written for config {header['config_hash'][:12]}, "
                f"caller expects {want[:12]}")
    model = GatedSegModel(ModelConfig.from_dict(header["config"]))
    restore_model(model, header, records)
    return model, header


def restore_model(model, header, records):
    for name, p in model.named_params():
        key = f"param/{name}"
        if key not in records:
            raise CheckpointError(f"checkpoint missing record {key}")
        if records[key].shape != p.value.shape:
            raise CheckpointError(f"{key}: stored shape {records[key].shape} "
                                  f"!= model shape {p.value.shape}")
        p.value[...] = records[key]
        mkey = f"momentum/{name}"
        if header.get("has_momentum") and mkey in records:
            p.momentum[...] = records[mkey]
    buffers = dict(model.named_buffers())
    for name in buffers:
        key = f"buffer/{name}"
        if key in records:
            buffers[name][...] = records[key]
