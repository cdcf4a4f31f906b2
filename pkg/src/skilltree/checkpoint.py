"""Binary checkpoints: named float32 arrays plus a config snapshot and rng state.

Layout (all integers little-endian)::

    b"SKTR" | u32 version | u32 n_sections
    per section: u16 name_len | name | u8 ndim | u32 dims... | u64 offset | u32 crc32
    u32 config_len | config text | u32 rng_len | rng state JSON
    payload: every section's float32 data, back to back (offset counts from here)
"""
from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CheckpointError

MAGIC = b"SKTR"
VERSION = 1


@dataclass
class Checkpoint:
    sections: dict = field(default_factory=dict)   # name -> float32 array, insertion ordered
    config: str = ""                               # key=value lines
    rng_state: dict | None = None

    def to_bytes(self):
        head = [MAGIC, struct.pack("<II", VERSION, len(self.sections))]
        payload = []
        offset = 0
        for name, arr in self.sections.items():
            data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
            raw = name.encode()
            shape = np.shape(arr)
            head.append(struct.pack("<H", len(raw)) + raw)
            head.append(struct.pack(f"<B{len(shape)}I", len(shape), *shape))
            head.append(struct.pack("<QI", offset, zlib.crc32(data)))
            payload.append(data)
            offset += len(data)
        cfg = self.config.encode()
        rng = b"" if self.rng_state is None else json.dumps(self.rng_state, sort_keys=True).encode()
        head.append(struct.pack("<I", len(cfg)) + cfg)
        head.append(struct.pack("<I", len(rng)) + rng)
        return b"".join(head + payload)

    @classmethod
    def from_bytes(cls, buf):
        r = _Reader(buf)
        if r.take(4, "header") != MAGIC:
            raise CheckpointError("not a checkpoint file", "header")
        version, n = r.unpack("<II", "header")
        if version != VERSION:
            raise CheckpointError(f"format version {version}, expected {VERSION}", "header")
        table = []
        for _ in range(n):
            (ln,) = r.unpack("<H", "table")
            try:
                name = r.take(ln, "table").decode()
            except UnicodeDecodeError:
                raise CheckpointError("unreadable section name", "table") from None
            (ndim,) = r.unpack("<B", name)
            shape = r.unpack(f"<{ndim}I", name)
            offset, crc = r.unpack("<QI", name)
            table.append((name, shape, offset, crc))
        (ln,) = r.unpack("<I", "config")
        config = r.take(ln, "config").decode(errors="strict")
        (ln,) = r.unpack("<I", "rng")
        rng_raw = r.take(ln, "rng")
        try:
            rng_state = json.loads(rng_raw) if rng_raw else None
        except ValueError:
            raise CheckpointError("unreadable rng state", "rng") from None
        base = r.pos
        sections = {}
        end = base
        for name, shape, offset, crc in table:
            nbytes = 4 * int(np.prod(shape, dtype=np.int64))
            start = base + offset
            data = buf[start:start + nbytes]
            if len(data) != nbytes:
                raise CheckpointError("payload truncated", name)
            if zlib.crc32(data) != crc:
                raise CheckpointError("checksum mismatch", name)
            sections[name] = np.frombuffer(data, dtype="<f4").astype(np.float32).reshape(shape)
            end = max(end, start + nbytes)
        if end != len(buf):
            raise CheckpointError("unexpected trailing bytes", "payload")
        return cls(sections, config, rng_state)

    def save(self, path):
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path):
        try:
            buf = Path(path).read_bytes()
        except OSError as e:
            raise CheckpointError(f"cannot read {path}: {e.strerror}", "file") from None
        return cls.from_bytes(buf)

    def group(self, prefix):
        """Sections under ``prefix.`` with the prefix stripped."""
        n = len(prefix) + 1
        return {k[n:]: v for k, v in self.sections.items() if k.startswith(prefix + ".")}

    def require(self, *names):
        for name in names:
            if name not in self.sections and not self.group(name):
                raise CheckpointError("missing section", name)


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n, section):
        out = self.buf[self.pos:self.pos + n]
        if len(out) != n:
            raise CheckpointError("file truncated", section)
        self.pos += n
        return out

    def unpack(self, fmt, section):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), section))
