"""Binary checkpoints.

Layout (little-endian)::

    b"M3P1"                     magic
    uint32                      format version
    32 bytes                    sha256 of the canonical run-config JSON
    uint64                      header length N
    N bytes                     UTF-8 JSON: config, vocab, step, epoch, rng
                                states, and the tensor table
                                [{name, shape, offset, nbytes}, ...]
    ...                         raw float32 tensor data, offsets relative
                                to the start of this block
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"M3P1"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: dict
    config_hash: str
    vocab: list[str]
    tensors: dict[str, np.ndarray]
    step: int = 0
    epoch: int = 0
    rng_states: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION

    def params(self) -> dict[str, np.ndarray]:
        return {k[len("param/"):]: v for k, v in self.tensors.items() if k.startswith("param/")}

    def optimizer_arrays(self) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.tensors.items() if k.startswith("adam_")}


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return {"__ndarray__": obj.tolist(), "dtype": str(obj.dtype)}
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def _from_jsonable(obj):
    if isinstance(obj, dict):
        if "__ndarray__" in obj:
            return np.asarray(obj["__ndarray__"], dtype=obj["dtype"])
        return {k: _from_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_from_jsonable(v) for v in obj]
    return obj


def rng_state(gen: np.random.Generator) -> dict:
    return _jsonable(gen.bit_generator.state)


def restore_rng(gen: np.random.Generator, state: dict) -> None:
    gen.bit_generator.state = _from_jsonable(state)


def encode(ck: Checkpoint) -> bytes:
    table = []
    chunks = []
    offset = 0
    for name in sorted(ck.tensors):
        arr = np.ascontiguousarray(ck.tensors[name], dtype="<f4")
        raw = arr.tobytes()
        table.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = {
        "config": ck.config,
        "vocab": ck.vocab,
        "step": int(ck.step),
        "epoch": int(ck.epoch),
        "rng": ck.rng_states,
        "tensors": table,
    }
    hjson = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    digest = bytes.fromhex(ck.config_hash)
    if len(digest) != 32:
        raise CheckpointError("config hash must be a sha256 hex digest")
    return b"".join([MAGIC, struct.pack("<I", ck.version), digest, struct.pack("<Q", len(hjson)), hjson, *chunks])


def decode(blob: bytes, expected_hash: str | None = None) -> Checkpoint:
    if blob[:4] != MAGIC:
        raise CheckpointError("not an M3P1 checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    digest = blob[8:40].hex()
    if expected_hash is not None and digest != expected_hash:
        raise CheckpointError(f"config hash mismatch: checkpoint {digest[:12]}, expected {expected_hash[:12]}")
    (hlen,) = struct.unpack_from("<Q", blob, 40)
    header = json.loads(blob[48:48 + hlen].decode("utf-8"))
    base = 48 + hlen
    tensors = {}
    for entry in header["tensors"]:
        start = base + entry["offset"]
        arr = np.frombuffer(blob[start:start + entry["nbytes"]], dtype="<f4")
        tensors[entry["name"]] = arr.reshape(entry["shape"]).astype(np.float32)
    return Checkpoint(header["config"], digest, header["vocab"], tensors, header["step"], header["epoch"],
                      header["rng"], version)


def save(path, ck: Checkpoint) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode(ck))
    tmp.replace(path)


def load(path, expected_hash: str | None = None) -> Checkpoint:
    return decode(Path(path).read_bytes(), expected_hash)
