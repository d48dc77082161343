"""Versioned binary checkpoints holding both parameter namespaces.

Layout::

    b"CFLOWCKP" | u32 header_len | JSON header | u32 n_records | records...
    record = u16 name_len | name | u8 kind (0 param, 1 buffer) | u8 ndim
             | u64 * ndim shape | float64 little-endian payload

All integers are little-endian. The header carries ``format_version``, the
model config and its digest, the generalist fingerprint, the phase and a
SHA-256 of the record section.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np

from .flowmodel import SPECIALIST_PHASE, FlowConfig, FlowModel

MAGIC = b"CFLOWCKP"
FORMAT_VERSION = 1
_PARAM, _BUFFER = 0, 1


class CheckpointError(Exception):
    pass


class FingerprintMismatch(CheckpointError):
    pass


def _records(model: FlowModel) -> bytes:
    out = bytearray()
    items = [(n, _PARAM, p.data) for n, p in model.named_params()]
    items += [(n, _BUFFER, b) for n, b in sorted(model.buffers().items())]
    out += struct.pack("<I", len(items))
    for name, kind, arr in items:
        arr = np.ascontiguousarray(arr, dtype="<f8")
        raw = name.encode()
        out += struct.pack("<H", len(raw)) + raw
        out += struct.pack("<BB", kind, arr.ndim)
        out += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        out += arr.tobytes()
    return bytes(out)


def save_checkpoint(model: FlowModel, path: str | os.PathLike) -> Path:
    path = Path(path)
    body = _records(model)
    header = {
        "format_version": FORMAT_VERSION,
        "config": model.config.to_dict(),
        "config_digest": model.config.digest(),
        "generalist_fingerprint": model.fingerprint(),
        "phase": model.phase,
        "records_sha256": hashlib.sha256(body).hexdigest(),
    }
    raw = json.dumps(header, sort_keys=True).encode()
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(MAGIC + struct.pack("<I", len(raw)) + raw + body)
    os.replace(tmp, path)
    return path


class _Reader:
    def __init__(self, buf: bytes, path: Path):
        self.buf, self.pos, self.path = buf, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(
                f"{self.path}: truncated at byte {self.pos}, needed {n} more bytes, "
                f"{len(self.buf) - self.pos} available"
            )
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_header(path: str | os.PathLike) -> dict:
    return _read(Path(path))[0]


def _read(path: Path):
    try:
        buf = path.read_bytes()
    except OSError as err:
        raise CheckpointError(f"{path}: cannot read checkpoint ({err.strerror})") from None
    r = _Reader(buf, path)
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    (hlen,) = r.unpack("<I")
    try:
        header = json.loads(r.take(hlen))
    except json.JSONDecodeError as err:
        raise CheckpointError(f"{path}: corrupt header ({err})") from None
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format_version {version} unsupported (expected {FORMAT_VERSION})")
    body = buf[r.pos :]
    if hashlib.sha256(body).hexdigest() != header.get("records_sha256"):
        raise CheckpointError(f"{path}: record digest mismatch")
    return header, r


def load_checkpoint(path: str | os.PathLike, generalist: str | os.PathLike | FlowModel | None = None) -> FlowModel:
    """Rebuild a model from ``path``; optionally check it against a generalist."""
    path = Path(path)
    header, r = _read(path)
    config = FlowConfig.from_dict(header["config"])
    if config.digest() != header["config_digest"]:
        raise CheckpointError(f"{path}: config digest mismatch")
    model = FlowModel(config)
    if header["phase"] == SPECIALIST_PHASE:
        model.attach_specialist()
    params = dict(model.named_params())
    buffers = {}
    (count,) = r.unpack("<I")
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode()
        kind, ndim = r.unpack("<BB")
        shape = r.unpack(f"<{ndim}Q") if ndim else ()
        size = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(r.take(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
        if kind == _BUFFER:
            buffers[name] = arr
            continue
        if name not in params:
            raise CheckpointError(f"{path}: unknown parameter {name!r}")
        if params[name].shape != arr.shape:
            raise CheckpointError(f"{path}: parameter {name!r} has shape {arr.shape}, expected {params[name].shape}")
        params[name].data[...] = arr
    model.load_buffers(buffers)
    fp = model.fingerprint()
    if fp != header["generalist_fingerprint"]:
        raise CheckpointError(f"{path}: generalist fingerprint does not match its parameters")
    model.generalist_fingerprint = fp
    if generalist is not None:
        ref = generalist.fingerprint() if isinstance(generalist, FlowModel) else read_header(generalist)["generalist_fingerprint"]
        if ref != fp:
            raise FingerprintMismatch(
                f"{path}: generalist fingerprint {fp[:12]} does not match reference {ref[:12]}"
            )
    return model
