"""Binary parameter checkpoints.

Layout (all integers little-endian u32)::

    b"DINN" | version | value width in bytes (4 or 8)
    repeated: name length | name (utf-8) | rank | extents... | raw little-endian values
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .model import ModelParams
from .tensor import ShapeError, Tensor

MAGIC = b"DINN"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(params: ModelParams) -> bytes:
    named = params.named()
    widths = {t.data.dtype.itemsize for _, t in named}
    if len(widths) != 1 or widths - {4, 8}:
        raise CheckpointError(f"parameters must share a float32 or float64 dtype, got widths {widths}")
    width = widths.pop()
    fmt = "<f4" if width == 4 else "<f8"
    out = [MAGIC, struct.pack("<II", VERSION, width)]
    for name, t in named:
        raw = name.encode()
        out.append(struct.pack(f"<I{len(raw)}sI", len(raw), raw, t.ndim))
        out.append(struct.pack(f"<{t.ndim}I", *t.shape))
        out.append(np.ascontiguousarray(t.data, dtype=fmt).tobytes())
    return b"".join(out)


def loads(buf: bytes, template: ModelParams | None = None) -> ModelParams:
    """Parse a checkpoint; with ``template`` every name and shape must match it."""
    if buf[:4] != MAGIC:
        raise CheckpointError(f"bad magic {buf[:4]!r}, expected {MAGIC!r} ('DINN')")
    try:
        version, width = struct.unpack_from("<II", buf, 4)
    except struct.error as exc:
        raise CheckpointError("truncated checkpoint header") from exc
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    if width not in (4, 8):
        raise CheckpointError(f"unsupported value width {width}")
    fmt = "<f4" if width == 4 else "<f8"
    params = ModelParams()
    off = 12
    try:
        while off < len(buf):
            (n,) = struct.unpack_from("<I", buf, off)
            name = buf[off + 4 : off + 4 + n].decode()
            if len(name) != n:
                raise struct.error("short name")
            off += 4 + n
            (rank,) = struct.unpack_from("<I", buf, off)
            shape = struct.unpack_from(f"<{rank}I", buf, off + 4)
            off += 4 + 4 * rank
            count = int(np.prod(shape))
            if off + count * width > len(buf):
                raise struct.error("short payload")
            data = np.frombuffer(buf, fmt, count, off).reshape(shape).astype(fmt[1:])
            off += count * width
            group, _, key = name.partition(".")
            if group not in params.groups():
                raise CheckpointError(f"unknown parameter group in {name!r}")
            getattr(params, group)[key] = Tensor(data, requires_grad=True)
    except (struct.error, UnicodeDecodeError) as exc:
        raise CheckpointError("truncated or corrupt checkpoint") from exc
    if template is not None:
        _match(params, template)
    return params


def _match(params: ModelParams, template: ModelParams):
    got = dict(params.named())
    for name, t in template.named():
        if name not in got:
            raise ShapeError(f"checkpoint is missing layer {name}")
        if got[name].shape != t.shape:
            raise ShapeError(f"layer {name}: checkpoint shape {got[name].shape} != model shape {t.shape}")
    extra = sorted(set(got) - {n for n, _ in template.named()})
    if extra:
        raise ShapeError(f"checkpoint has unexpected layers {extra}")


def save_checkpoint(path, params: ModelParams) -> None:
    Path(path).write_bytes(dumps(params))


def load_checkpoint(path, template: ModelParams | None = None) -> ModelParams:
    return loads(Path(path).read_bytes(), template)
