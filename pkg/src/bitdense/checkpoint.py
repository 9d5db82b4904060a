"""Checkpoint serialization.

Layout: magic, version, a length-prefixed JSON header (model spec, spec
hash, epoch, rng state, array index), the raw little-endian arrays in
index order, and a trailing CRC32 over everything before it.  Loading
verifies magic, version, CRC and, when the caller supplies an expected
spec, refuses a hash mismatch.
"""

from __future__ import annotations

import json
import struct
import zlib

import numpy as np

from .model import ModelSpec, MultiTaskModel, spec_from_dict

MAGIC = b"BDCK"
VERSION = 1

_DTYPES = {"f8": "<f8", "f4": "<f4", "i8": "<i8", "u1": "|u1"}


class CheckpointError(Exception):
    pass


def save_checkpoint(path, model: MultiTaskModel, *, epoch: int,
                    optimizer_arrays: dict[str, np.ndarray] | None = None,
                    optimizer_meta: dict | None = None,
                    rng_state: dict | None = None):
    arrays = dict(model.state_dict())
    for name, arr in (optimizer_arrays or {}).items():
        arrays[f"opt.{name}"] = arr
    index = []
    blobs = []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        code = {np.float64: "f8", np.float32: "f4", np.int64: "i8",
                np.uint8: "u1"}.get(arr.dtype.type)
        if code is None:
            arr = arr.astype(np.float64)
            code = "f8"
        data = arr.astype(_DTYPES[code]).tobytes()
        index.append({"name": name, "dtype": code, "shape": list(arr.shape),
                      "bytes": len(data)})
        blobs.append(data)
    header = {
        "spec": json.loads(model.spec.canonical_json()),
        "spec_hash": model.spec.hash(),
        "epoch": int(epoch),
        "rng_state": rng_state,
        "optimizer": optimizer_meta or {},
        "index": index,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode()
    body = (
        MAGIC + struct.pack("<HI", VERSION, len(header_bytes)) + header_bytes
        + b"".join(blobs)
    )
    with open(path, "wb") as f:
        f.write(body)
        f.write(struct.pack("<I", zlib.crc32(body)))


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Returns (header, arrays)."""
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 14:
        raise CheckpointError("file too short")
    body, crc_bytes = data[:-4], data[-4:]
    if struct.unpack("<I", crc_bytes)[0] != zlib.crc32(body):
        raise CheckpointError("checksum mismatch")
    if body[:4] != MAGIC:
        raise CheckpointError(f"bad magic {body[:4]!r}")
    version, header_len = struct.unpack("<HI", body[4:10])
    if version != VERSION:
        raise CheckpointError(f"unsupported version {version}")
    header = json.loads(body[10 : 10 + header_len].decode())
    arrays = {}
    off = 10 + header_len
    for entry in header["index"]:
        raw = body[off : off + entry["bytes"]]
        if len(raw) < entry["bytes"]:
            raise CheckpointError(f"truncated array {entry['name']}")
        arrays[entry["name"]] = np.frombuffer(
            raw, dtype=_DTYPES[entry["dtype"]]
        ).reshape(entry["shape"]).copy()
        off += entry["bytes"]
    return header, arrays


def load_model(path, expect_spec: ModelSpec | None = None) -> tuple[MultiTaskModel, dict]:
    """Rebuild the checkpointed model.  With ``expect_spec`` given, a
    spec-hash mismatch is refused."""
    header, arrays = load_checkpoint(path)
    spec = spec_from_dict(header["spec"])
    if expect_spec is not None and expect_spec.hash() != header["spec_hash"]:
        raise CheckpointError(
            "spec hash mismatch: checkpoint was written by a different model spec"
        )
    model = MultiTaskModel(spec, rng=np.random.default_rng(0))
    model.load_state_dict({k: v for k, v in arrays.items() if not k.startswith("opt.")})
    return model, header
