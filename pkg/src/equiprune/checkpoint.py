"""Single-file checkpoint container: text header, binary payload, checksum.

Layout:

* line 1: canonical JSON header (sorted keys) with the format version, the
  architecture descriptor, and per-tensor records (name, shape, dtype,
  byte offset into the payload);
* the payload: contiguous little-endian tensor bytes in canonical order;
* final line: sha256 hex digest of everything before it.

Weights are stored as float64 masters regardless of compute precision.
Saving is canonical, so save -> load -> save is byte-identical.
"""

from __future__ import annotations

import hashlib
import json

import numpy as np

from .model import ModelConfig, ModelParams, param_shapes

__all__ = ["save_checkpoint", "load_checkpoint", "CheckpointError"]

FORMAT_NAME = "equiprune-checkpoint"
FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(params: ModelParams, path) -> None:
    names = list(param_shapes(params.config))
    records = []
    payload = bytearray()
    for name in names:
        arr = params[name].astype("<f8")  # 0-d safe; tobytes() emits C order
        records.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "dtype": "<f8",
                "offset": len(payload),
                "nbytes": arr.nbytes,
            }
        )
        payload.extend(arr.tobytes())
    header = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "config": params.config.to_dict(),
        "tensors": records,
        "payload_bytes": len(payload),
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode() + b"\n"
    digest = hashlib.sha256(head + bytes(payload)).hexdigest()
    with open(path, "wb") as fh:
        fh.write(head)
        fh.write(bytes(payload))
        fh.write(b"\n" + digest.encode() + b"\n")


def load_checkpoint(path) -> ModelParams:
    with open(path, "rb") as fh:
        blob = fh.read()
    nl = blob.find(b"\n")
    if nl < 0:
        raise CheckpointError(f"{path}: missing header line")
    head = blob[: nl + 1]
    try:
        header = json.loads(head.decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable header: {exc}") from None
    if header.get("format") != FORMAT_NAME:
        raise CheckpointError(f"{path}: not an {FORMAT_NAME} file")
    if header.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {header.get('version')}")
    n_payload = int(header["payload_bytes"])
    payload = blob[nl + 1 : nl + 1 + n_payload]
    if len(payload) != n_payload:
        raise CheckpointError(f"{path}: truncated payload")
    trailer = blob[nl + 1 + n_payload :]
    stored = trailer.strip().decode(errors="replace")
    digest = hashlib.sha256(head + payload).hexdigest()
    if stored != digest:
        raise CheckpointError(f"{path}: checksum mismatch (corrupt file)")
    config = ModelConfig.from_dict(header["config"])
    expected = param_shapes(config)
    tensors = {}
    for rec in header["tensors"]:
        name = rec["name"]
        shape = tuple(rec["shape"])
        if name not in expected or expected[name] != shape:
            raise CheckpointError(f"{path}: tensor {name} does not fit the architecture")
        start, nbytes = rec["offset"], rec["nbytes"]
        arr = np.frombuffer(payload[start : start + nbytes], dtype=rec["dtype"])
        tensors[name] = arr.reshape(shape).astype(np.float64)
    return ModelParams(config, tensors)
