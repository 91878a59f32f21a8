"""Binary checkpoint format.

Layout (all little-endian)::

    b"PHCK" | u16 version | 32-byte config digest | u32 section count
    per section: u32 name length | name (utf-8) | u32 rank | rank x u64 dims | float64 payload
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Optional

import numpy as np

from .errors import BadMagic, CheckpointError, DigestMismatch, VersionMismatch

MAGIC = b"PHCK"
VERSION = 1
DIGEST_BYTES = 32
_HEADER = struct.Struct("<4sH32sI")


def config_digest(config: Optional[Mapping]) -> bytes:
    if config is None:
        return bytes(DIGEST_BYTES)
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str).encode()
    return hashlib.sha256(blob).digest()


@dataclass
class CheckpointInfo:
    path: Path
    total_bytes: int
    payload_bytes: int
    sections: int


@dataclass
class Checkpoint:
    version: int
    digest: bytes
    sections: dict

    @property
    def payload_bytes(self) -> int:
        return sum(a.size * 8 for a in self.sections.values())


def save(path, sections: Mapping[str, np.ndarray], config: Optional[Mapping] = None) -> CheckpointInfo:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    chunks = [_HEADER.pack(MAGIC, VERSION, config_digest(config), len(sections))]
    payload = 0
    for name, arr in sections.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        raw_name = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw_name)))
        chunks.append(raw_name)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        data = arr.tobytes()
        payload += len(data)
        chunks.append(data)
    blob = b"".join(chunks)
    path.write_bytes(blob)
    return CheckpointInfo(path, len(blob), payload, len(sections))


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError(f"truncated checkpoint: wanted {n} bytes at offset {self.pos}")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))


def load(path, config: Optional[Mapping] = None) -> Checkpoint:
    """Read a checkpoint; when ``config`` is given its digest must match the stored one."""
    blob = Path(path).read_bytes()
    if len(blob) < 4 or blob[:4] != MAGIC:
        raise BadMagic(f"{path} is not a PHCK checkpoint")
    r = _Reader(blob)
    _, version, digest, count = r.unpack(_HEADER.format)
    if version != VERSION:
        raise VersionMismatch(f"checkpoint version {version}, expected {VERSION}")
    if config is not None and digest != config_digest(config):
        raise DigestMismatch("checkpoint was written under a different configuration")
    sections = {}
    for _ in range(count):
        (name_len,) = r.unpack("<I")
        name = r.take(name_len).decode("utf-8")
        (rank,) = r.unpack("<I")
        dims = r.unpack(f"<{rank}Q") if rank else ()
        size = int(np.prod(dims)) if dims else 1
        data = np.frombuffer(r.take(8 * size), dtype="<f8").reshape(dims)
        sections[name] = data.astype(np.float64)
    if r.pos != len(blob):
        raise CheckpointError(f"{len(blob) - r.pos} trailing bytes after the last section")
    return Checkpoint(version, digest, sections)


def model_sections(model, velocity: Optional[Mapping[str, np.ndarray]] = None) -> dict:
    """Every model tensor by name, plus optimizer velocity under ``opt/``."""
    out = {name: t.data for name, t in model.named_tensors()}
    for name, v in (velocity or {}).items():
        out[f"opt/{name}"] = v
    return out


def restore_model(model, ckpt: Checkpoint) -> dict:
    """Copy saved tensors into ``model`` in place; returns the optimizer velocity."""
    for name, t in model.named_tensors():
        if name not in ckpt.sections:
            raise CheckpointError(f"checkpoint lacks tensor {name!r}")
        saved = ckpt.sections[name]
        if saved.shape != t.shape:
            raise CheckpointError(f"shape of {name!r}: saved {saved.shape}, model {t.shape}")
        t.data[...] = saved
    return {k[4:]: v.copy() for k, v in ckpt.sections.items() if k.startswith("opt/")}
