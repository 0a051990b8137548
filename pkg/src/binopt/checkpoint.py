"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"BNNCKPT1"
    section*   where section = tag[4] | u64 payload length | payload

Sections, in order: ``VERS`` (u32 format version), ``ARCH`` (sha256 hex
digest of the architecture), ``PARM`` and ``BUFS`` (tensor lists), ``OPTM``
(JSON header + tensor list), ``RNGS`` (JSON bit-generator state), ``SNAP``
(tensor list of +-1 initial signs), ``META`` (JSON run position).

A tensor list is u32 count followed by entries of u16 name length, utf-8
name, u8 ndim, ndim x u64 dims, then float64 data.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"BNNCKPT1"
FORMAT_VERSION = 1
SECTION_ORDER = ("VERS", "ARCH", "PARM", "BUFS", "OPTM", "RNGS", "SNAP", "META")


class CheckpointError(Exception):
    pass


class BadMagicError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class ArchitectureMismatchError(CheckpointError):
    pass


class UnsupportedVersionError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    arch_digest: str
    params: list                     # [(name, ndarray)]
    buffers: list = field(default_factory=list)
    optimizer: dict | None = None    # Optimizer.state_dict()
    rng_state: dict | None = None
    snapshot: list = field(default_factory=list)   # [ndarray of +-1]
    meta: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION


def _json_bytes(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def _pack_tensors(named):
    buf = io.BytesIO()
    buf.write(struct.pack("<I", len(named)))
    for name, arr in named:
        arr = np.asarray(arr, dtype="<f8")  # ascontiguousarray would promote 0-d to 1-d
        raw = name.encode()
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(arr.tobytes())
    return buf.getvalue()


class _Reader:
    def __init__(self, data, where):
        self.data = data
        self.pos = 0
        self.where = where

    def take(self, n):
        if self.pos + n > len(self.data):
            raise TruncatedCheckpointError(f"{self.where}: unexpected end of data")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def at_end(self):
        return self.pos == len(self.data)


def _unpack_tensors(payload, where):
    r = _Reader(payload, where)
    (count,) = r.unpack("<I")
    out = []
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode()
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}Q") if ndim else ()
        n = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(r.take(8 * n), dtype="<f8").reshape(shape).astype(np.float64)
        out.append((name, arr))
    return out


def _optimizer_payload(sd):
    if sd is None:
        return _json_bytes(None)
    header = {k: v for k, v in sd.items() if k != "state"}
    header["state_keys"] = [sorted(st) for st in sd["state"]]
    named = [(f"{i}.{k}", st[k]) for i, st in enumerate(sd["state"]) for k in sorted(st)]
    head = _json_bytes(header)
    return struct.pack("<Q", len(head)) + head + _pack_tensors(named)


def _optimizer_from_payload(payload):
    r = _Reader(payload, "OPTM")
    if payload == _json_bytes(None):
        return None
    (hlen,) = r.unpack("<Q")
    header = json.loads(r.take(hlen))
    arrays = dict(_unpack_tensors(payload[r.pos:], "OPTM"))
    keys = header.pop("state_keys")
    header["state"] = [{k: arrays[f"{i}.{k}"] for k in ks} for i, ks in enumerate(keys)]
    return header


def dumps(ckpt):
    sections = {
        "VERS": struct.pack("<I", ckpt.version),
        "ARCH": ckpt.arch_digest.encode(),
        "PARM": _pack_tensors(ckpt.params),
        "BUFS": _pack_tensors(ckpt.buffers),
        "OPTM": _optimizer_payload(ckpt.optimizer),
        "RNGS": _json_bytes(ckpt.rng_state),
        "SNAP": _pack_tensors([(f"snap.{i}", s) for i, s in enumerate(ckpt.snapshot)]),
        "META": _json_bytes(ckpt.meta),
    }
    out = io.BytesIO()
    out.write(MAGIC)
    for tag in SECTION_ORDER:
        payload = sections[tag]
        out.write(tag.encode())
        out.write(struct.pack("<Q", len(payload)))
        out.write(payload)
    return out.getvalue()


def loads(data, expected_digest=None):
    if len(data) < len(MAGIC) or data[:len(MAGIC)] != MAGIC:
        raise BadMagicError("not a checkpoint: magic bytes do not match BNNCKPT1")
    r = _Reader(data, "checkpoint")
    r.take(len(MAGIC))
    sections = {}
    while not r.at_end():
        tag = r.take(4).decode("ascii", errors="replace")
        (length,) = r.unpack("<Q")
        sections[tag] = r.take(length)
    missing = [t for t in SECTION_ORDER if t not in sections]
    if missing:
        raise TruncatedCheckpointError(f"checkpoint is missing sections {missing}")
    (version,) = struct.unpack("<I", sections["VERS"])
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"checkpoint format version {version} is not supported")
    digest = sections["ARCH"].decode()
    if expected_digest is not None and digest != expected_digest:
        raise ArchitectureMismatchError(
            f"checkpoint architecture {digest[:12]} does not match model {expected_digest[:12]}")
    return Checkpoint(
        arch_digest=digest,
        params=_unpack_tensors(sections["PARM"], "PARM"),
        buffers=_unpack_tensors(sections["BUFS"], "BUFS"),
        optimizer=_optimizer_from_payload(sections["OPTM"]),
        rng_state=json.loads(sections["RNGS"]),
        snapshot=[a for _, a in _unpack_tensors(sections["SNAP"], "SNAP")],
        meta=json.loads(sections["META"]),
        version=version,
    )


def save_checkpoint(ckpt, path):
    try:
        with open(path, "wb") as fh:
            fh.write(dumps(ckpt))
    except OSError as exc:
        raise OSError(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path, expected_digest=None):
    with open(path, "rb") as fh:
        return loads(fh.read(), expected_digest)
