"""Binary checkpoint files.

Layout (all integers u32 little-endian)::

    b"R3M1" | version | len(config) | config (UTF-8 key=value lines)
    then per array, sorted by name:
    len(name) | name | rank | dims... | float32 LE row-major data
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .numcore import Tensor
from .revformer import ModelConfig, RevformerParams

MAGIC = b"R3M1"
VERSION = 1


class CheckpointFormatError(ValueError):
    pass


def dumps(params: RevformerParams, meta: dict[str, str] | None = None) -> bytes:
    text = params.cfg.to_text()
    for k in sorted(meta or {}):
        text += f"meta.{k}={meta[k]}\n"
    cfg = text.encode("utf-8")
    out = [MAGIC, struct.pack("<II", VERSION, len(cfg)), cfg]
    for name in sorted(params.tensors):
        arr = np.ascontiguousarray(params.tensors[name].data, dtype="<f4")
        nb = name.encode("utf-8")
        out.append(struct.pack("<I", len(nb)))
        out.append(nb)
        out.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


def save(path: str | Path, params: RevformerParams, meta: dict[str, str] | None = None) -> None:
    Path(path).write_bytes(dumps(params, meta))


def loads(blob: bytes) -> tuple[RevformerParams, dict[str, str]]:
    if blob[:4] != MAGIC:
        raise CheckpointFormatError("bad magic; not an R3M1 checkpoint")
    pos = 4

    def take(fmt: str):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(blob):
            raise CheckpointFormatError("truncated checkpoint")
        vals = struct.unpack_from(fmt, blob, pos)
        pos += size
        return vals

    version, clen = take("<II")
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    text = blob[pos : pos + clen].decode("utf-8")
    pos += clen
    cfg = ModelConfig.from_text(text)
    meta = {}
    for line in text.splitlines():
        if line.startswith("meta."):
            k, _, v = line[5:].partition("=")
            meta[k] = v
    tensors: dict[str, Tensor] = {}
    while pos < len(blob):
        (nlen,) = take("<I")
        name = blob[pos : pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = take("<I")
        dims = take(f"<{rank}I")
        count = int(np.prod(dims, dtype=np.int64))
        if pos + 4 * count > len(blob):
            raise CheckpointFormatError(f"truncated array {name!r}")
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=pos).reshape(dims).astype(cfg.dtype)
        pos += 4 * count
        tensors[name] = Tensor(arr, requires_grad=not name.startswith("base."), name=name)
    return RevformerParams(cfg, tensors), meta


def load(path: str | Path) -> tuple[RevformerParams, dict[str, str]]:
    return loads(Path(path).read_bytes())
