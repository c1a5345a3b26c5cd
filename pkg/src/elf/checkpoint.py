"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"ELFK" | version u32 | kind: u32 length + UTF-8 | metadata: u32 length + UTF-8 JSON
    | n_tensors u32 | n_tensors x (name: u32 length + UTF-8, ndim u32, dims u32 * ndim,
    float32 LE payload) | CRC-32 of all preceding bytes (u32)
"""
from __future__ import annotations

import io
import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

MAGIC = b"ELFK"
VERSION = 1
KINDS = ("sfen", "tts", "fts")


class CheckpointError(ValueError):
    pass


class ChecksumError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    kind: str
    meta: dict
    tensors: dict[str, torch.Tensor] = field(default_factory=dict)

    def subset(self, prefix: str) -> dict[str, torch.Tensor]:
        return {k[len(prefix):]: v for k, v in self.tensors.items() if k.startswith(prefix)}


def _put_str(buf: io.BytesIO, s: str) -> None:
    b = s.encode("utf-8")
    buf.write(struct.pack("<I", len(b)))
    buf.write(b)


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    if ckpt.kind not in KINDS:
        raise CheckpointError(f"unknown model kind {ckpt.kind!r}")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    _put_str(buf, ckpt.kind)
    _put_str(buf, json.dumps(ckpt.meta, sort_keys=True))
    buf.write(struct.pack("<I", len(ckpt.tensors)))
    for name, t in ckpt.tensors.items():
        # asarray keeps 0-d tensors 0-d (ascontiguousarray would promote them to 1-d)
        arr = np.asarray(t.detach().cpu().numpy() if torch.is_tensor(t) else t, dtype="<f4", order="C")
        _put_str(buf, name)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    body = buf.getvalue()
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("truncated checkpoint")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def string(self) -> str:
        return self.take(self.u32()).decode("utf-8")


def decode_checkpoint(data: bytes) -> Checkpoint:
    if len(data) < 8 or data[:4] != MAGIC:
        raise CheckpointError("not an ELFK checkpoint")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise ChecksumError("checkpoint CRC mismatch (file corrupt or truncated)")
    r = _Reader(body)
    r.take(4)
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    kind = r.string()
    meta = json.loads(r.string())
    tensors = {}
    for _ in range(r.u32()):
        name = r.string()
        ndim = r.u32()
        shape = struct.unpack(f"<{ndim}I", r.take(4 * ndim))
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(shape)
        tensors[name] = torch.from_numpy(arr.astype(np.float32))
    if r.pos != len(body):
        raise CheckpointError("trailing bytes in checkpoint")
    return Checkpoint(kind, meta, tensors)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode_checkpoint(ckpt))
    tmp.replace(path)


def load_checkpoint(path, kind: str | None = None) -> Checkpoint:
    ckpt = decode_checkpoint(Path(path).read_bytes())
    if kind is not None and ckpt.kind != kind:
        raise CheckpointError(f"{path}: checkpoint holds a {ckpt.kind!r} model, expected {kind!r}")
    return ckpt
