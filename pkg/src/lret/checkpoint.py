"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"LRET"  | u32 version | u64 header_len | header (UTF-8 JSON) | payloads | u64 crc

The JSON header holds the model spec, free-form metadata and a tensor
directory ``name -> {shape, dtype, offset, length}`` with offsets relative
to the start of the payload area.  Payloads are raw little-endian float32.
The trailer is CRC-64/XZ (reflected polynomial 0xC96C5795D7870F42, init
and final xor all ones) over every preceding byte.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

MAGIC = b"LRET"
VERSION = 1
_PREFIX = struct.Struct("<4sIQ")
_TRAILER = struct.Struct("<Q")


class CheckpointError(IOError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointDigestError(CheckpointError):
    pass


def _crc64_table() -> list[int]:
    poly = 0xC96C5795D7870F42
    table = []
    for i in range(256):
        c = i
        for _ in range(8):
            c = (c >> 1) ^ poly if c & 1 else c >> 1
        table.append(c)
    return table


_TABLE = _crc64_table()


def crc64_xz(data: bytes, crc: int = 0) -> int:
    """CRC-64/XZ; pass the previous return value as ``crc`` to continue a stream."""
    c = crc ^ 0xFFFFFFFFFFFFFFFF
    table = _TABLE
    for b in data:
        c = table[(c ^ b) & 0xFF] ^ (c >> 8)
    return c ^ 0xFFFFFFFFFFFFFFFF


@dataclass
class Checkpoint:
    spec: dict
    tensors: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    @property
    def epoch(self) -> Optional[int]:
        return self.meta.get("epoch")

    @property
    def best_val_acc(self) -> Optional[float]:
        return self.meta.get("best_val_acc")


def encode_checkpoint(ckpt: Checkpoint, version: int = VERSION) -> bytes:
    directory, chunks, offset = {}, [], 0
    for name, arr in ckpt.tensors.items():
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        directory[name] = {"shape": list(np.shape(arr)), "dtype": "float32", "offset": offset, "length": len(raw)}
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"spec": ckpt.spec, "meta": ckpt.meta, "tensors": directory}, sort_keys=True,
                        separators=(",", ":")).encode("utf-8")
    body = _PREFIX.pack(MAGIC, version, len(header)) + header + b"".join(chunks)
    return body + _TRAILER.pack(crc64_xz(body))


def decode_checkpoint(buf: bytes, source: str = "<bytes>") -> Checkpoint:
    if len(buf) < _PREFIX.size or buf[:4] != MAGIC:
        if MAGIC.startswith(buf[:4]) and len(buf) < _PREFIX.size:
            raise CheckpointTruncatedError(f"{source}: truncated checkpoint ({len(buf)} bytes)")
        raise CheckpointError(f"{source}: not an LRET checkpoint (bad magic)")
    _, version, hlen = _PREFIX.unpack_from(buf)
    body, trailer = buf[:-_TRAILER.size], buf[-_TRAILER.size:]
    intact = len(buf) >= _PREFIX.size + _TRAILER.size and _TRAILER.unpack(trailer)[0] == crc64_xz(body)
    if not intact:
        expected = _declared_size(buf, hlen)
        if expected is not None and len(buf) < expected:
            raise CheckpointTruncatedError(f"{source}: truncated checkpoint ({len(buf)} of {expected} bytes)")
        raise CheckpointDigestError(f"{source}: checksum mismatch, file is corrupted")
    if version != VERSION:
        raise CheckpointVersionError(f"{source}: checkpoint format version {version}, this build reads {VERSION}")
    start = _PREFIX.size
    header = json.loads(buf[start:start + hlen].decode("utf-8"))
    base = start + hlen
    tensors = {}
    for name, d in header["tensors"].items():
        lo = base + d["offset"]
        arr = np.frombuffer(buf[lo:lo + d["length"]], dtype="<f4").astype(np.float32)
        tensors[name] = arr.reshape(d["shape"])
    return Checkpoint(header["spec"], tensors, header["meta"])


def _declared_size(buf: bytes, hlen: int) -> Optional[int]:
    start = _PREFIX.size
    if len(buf) < start + hlen:
        return start + hlen + _TRAILER.size
    try:
        header = json.loads(buf[start:start + hlen].decode("utf-8"))
        payload = sum(d["length"] for d in header["tensors"].values())
    except (ValueError, KeyError, TypeError, AttributeError):
        return None
    return start + hlen + payload + _TRAILER.size


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Atomic write: temp file in the same directory, fsync, rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = encode_checkpoint(ckpt)
    fd, tmp = tempfile.mkstemp(prefix=path.name + ".", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except FileNotFoundError:
            pass
        raise


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {os.fspath(path)!r}: {exc.strerror}") from exc
    return decode_checkpoint(buf, os.fspath(path))


# --- model <-> checkpoint ---------------------------------------------------------------------------


def checkpoint_from_model(model, optimizer=None, meta: Optional[dict] = None) -> Checkpoint:
    tensors = {f"param/{n}": p.data.copy() for n, p in model.named_parameters()}
    tensors.update({f"buffer/{n}": b.copy() for n, b in model.named_buffers()})
    meta = dict(meta or {})
    if optimizer is not None:
        for n in optimizer.params:
            tensors[f"adam.m/{n}"] = optimizer.m[n].copy()
            tensors[f"adam.v/{n}"] = optimizer.v[n].copy()
        meta["optimizer"] = {"type": "adam", "t": optimizer.t, **optimizer.cfg.to_dict()}
    meta.setdefault("resizer", model.spec.resizer_name)
    return Checkpoint(model.spec.to_dict(), tensors, meta)


def model_from_checkpoint(ckpt: Checkpoint):
    """Rebuild the model and copy every parameter and buffer; nothing partial is returned."""
    from .layers import set_buffer
    from .model import ModelSpec, build_model

    model = build_model(ModelSpec.from_dict(ckpt.spec), seed=0)
    params = dict(model.named_parameters())
    buffers = dict(model.named_buffers())
    expected = {f"param/{n}" for n in params} | {f"buffer/{n}" for n in buffers}
    missing = expected - set(ckpt.tensors)
    if missing:
        raise CheckpointError(f"checkpoint lacks tensors {sorted(missing)[:5]}")
    for n, p in params.items():
        arr = ckpt.tensors[f"param/{n}"]
        if arr.shape != p.shape:
            raise CheckpointError(f"parameter {n}: shape {arr.shape} != {p.shape}")
    for n, p in params.items():
        p.data = ckpt.tensors[f"param/{n}"].astype(p.data.dtype, copy=True)
    for n in buffers:
        set_buffer(model, n, ckpt.tensors[f"buffer/{n}"])
    return model


def restore_optimizer(ckpt: Checkpoint, optimizer) -> None:
    for n in optimizer.params:
        optimizer.m[n] = ckpt.tensors[f"adam.m/{n}"].copy()
        optimizer.v[n] = ckpt.tensors[f"adam.v/{n}"].copy()
    optimizer.t = int(ckpt.meta["optimizer"]["t"])
