"""Binary checkpoint format.

Layout (little-endian)::

    b"SPAE"  u32 version
    u32 len  UTF-8 JSON metadata (network spec, seed, step, ...)
    u32 count
    count x [u32 len, UTF-8 name, u8 dtype, u32 rank, rank x u32 dim, raw values]

dtype 1 is float32; values are always stored as 32-bit floats.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .errors import BadMagic, Truncated, VersionUnsupported

MAGIC = b"SPAE"
VERSION = 1
DTYPE_F32 = 1


@dataclass
class Checkpoint:
    meta: dict
    tensors: dict = field(default_factory=dict)
    version: int = VERSION

    @property
    def spec(self) -> dict:
        return self.meta.get("spec", {})

    def __eq__(self, other):
        if not isinstance(other, Checkpoint):
            return NotImplemented
        return (self.version == other.version and self.meta == other.meta
                and list(self.tensors) == list(other.tensors)
                and all(np.array_equal(self.tensors[k], other.tensors[k]) for k in self.tensors))


def to_bytes(ckpt: Checkpoint) -> bytes:
    blob = json.dumps(ckpt.meta, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", ckpt.version), struct.pack("<I", len(blob)), blob,
             struct.pack("<I", len(ckpt.tensors))]
    for name, arr in ckpt.tensors.items():
        arr = np.asarray(arr, dtype="<f4")  # ascontiguousarray would promote 0-d to 1-d
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)) + nb)
        parts.append(struct.pack("<BI", DTYPE_F32, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise Truncated(f"checkpoint ends at byte {len(self.data)}, needed {self.pos + n}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def from_bytes(data: bytes) -> Checkpoint:
    r = _Reader(data)
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagic("not a checkpoint file (bad magic)")
    r.take(4)
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise VersionUnsupported(f"checkpoint version {version} is not supported")
    (n,) = r.unpack("<I")
    try:
        meta = json.loads(r.take(n).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise Truncated(f"corrupt metadata: {e}") from None
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        (ln,) = r.unpack("<I")
        name = r.take(ln).decode("utf-8")
        code, rank = r.unpack("<BI")
        if code != DTYPE_F32:
            raise VersionUnsupported(f"unknown dtype code {code}")
        dims = r.unpack(f"<{rank}I") if rank else ()
        size = int(np.prod(dims)) if dims else 1
        raw = r.take(4 * size)
        tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(dims).copy()
    return Checkpoint(meta, tensors, version)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Write to a temporary file in the same directory, then rename."""
    data = to_bytes(ckpt)
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(prefix=".spae-", dir=d)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return from_bytes(fh.read())


# -- model <-> tensors ----------------------------------------------------------

def module_tensors(module, prefix: str = "") -> dict:
    out = {}
    for name, p in module.named_parameters():
        out[prefix + name] = p.value
    for name, st in module.named_bn_states():
        out[f"{prefix}{name}.running_mean"] = st.running_mean
        out[f"{prefix}{name}.running_var"] = st.running_var
    return out


def load_module_tensors(module, tensors: dict, prefix: str = "", strict: bool = True) -> None:
    """Copy stored values into a module's parameters and batchnorm statistics."""
    from .errors import SpecMismatch

    for name, p in module.named_parameters():
        key = prefix + name
        if key not in tensors:
            if strict:
                raise SpecMismatch(f"checkpoint has no tensor {key!r}")
            continue
        arr = tensors[key]
        if arr.shape != p.value.shape:
            raise SpecMismatch(f"{key}: shape {arr.shape} != {p.value.shape}")
        p.value[...] = arr
    for name, st in module.named_bn_states():
        for field_ in ("running_mean", "running_var"):
            key = f"{prefix}{name}.{field_}"
            if key in tensors:
                setattr(st, field_, tensors[key].astype(np.float64))
            elif strict:
                raise SpecMismatch(f"checkpoint has no tensor {key!r}")
