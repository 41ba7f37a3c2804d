"""Binary checkpoint format.

Layout (all integers little-endian):

    b"FMEM"                      magic
    uint32                       version (currently 1)
    uint32 + bytes               UTF-8 JSON config blob, sorted keys:
                                 {"backbone": {...}, "consolidator": {...} | null}
    repeated until EOF:
        uint16 + bytes           tensor name ("backbone/<param>" or "consolidator/<param>")
        uint8                    dtype tag, 0 = float32, 1 = float64
        uint8                    ndim
        ndim x uint64            dims
        raw row-major data
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .autodiff.tensor import Parameter
from .backbone import Backbone, BackboneConfig, init_backbone
from .consolidator import Consolidator, ConsolidatorConfig, inherit_weights
from .errors import FormatError

MAGIC = b"FMEM"
VERSION = 1
_TAGS = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_DTYPES = {v: k for k, v in _TAGS.items()}


def _records(backbone: Backbone, consolidator: Consolidator | None):
    for name, p in backbone.named_parameters():
        yield f"backbone/{name}", p
    if consolidator is not None:
        for name, p in consolidator.named_parameters():
            yield f"consolidator/{name}", p


def encode(backbone: Backbone, consolidator: Consolidator | None = None) -> bytes:
    cfg = {
        "backbone": backbone.config.to_dict(),
        "consolidator": consolidator.config.to_dict() if consolidator is not None else None,
    }
    blob = json.dumps(cfg, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(blob)), blob]
    for name, p in _records(backbone, consolidator):
        arr = np.ascontiguousarray(p.data, dtype=p.data.dtype.newbyteorder("<"))
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<BB", _TAGS[arr.dtype], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def save_checkpoint(path, backbone: Backbone, consolidator: Consolidator | None = None) -> None:
    Path(path).write_bytes(encode(backbone, consolidator))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, field: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated checkpoint while reading {field} at byte {self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, field: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), field))

    @property
    def done(self) -> bool:
        return self.pos >= len(self.buf)


def decode(buf: bytes) -> tuple[Backbone, Consolidator | None]:
    r = _Reader(buf)
    if r.take(4, "magic") != MAGIC:
        raise FormatError("bad magic: not a checkpoint file")
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise FormatError(f"unsupported version {version} (expected {VERSION})")
    (blob_len,) = r.unpack("<I", "config length")
    try:
        cfg = json.loads(r.take(blob_len, "config blob").decode("utf-8"))
        bcfg = BackboneConfig.from_dict(cfg["backbone"])
        ccfg = ConsolidatorConfig.from_dict(cfg["consolidator"]) if cfg.get("consolidator") else None
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"invalid config blob: {exc}") from exc

    tensors: dict[str, np.ndarray] = {}
    while not r.done:
        (n,) = r.unpack("<H", "tensor name length")
        name = r.take(n, "tensor name").decode("utf-8", errors="replace")
        tag, ndim = r.unpack("<BB", f"dtype tag of {name}")
        if tag not in _DTYPES:
            raise FormatError(f"unknown dtype tag {tag} for tensor {name}")
        dims = r.unpack(f"<{ndim}Q", f"dims of {name}")
        dt = _DTYPES[tag]
        count = int(np.prod(dims, dtype=np.int64)) if ndim else 1
        raw = r.take(count * dt.itemsize, f"data of {name}")
        if name in tensors:
            raise FormatError(f"duplicate tensor {name}")
        tensors[name] = np.frombuffer(raw, dtype=dt).reshape(dims).astype(dt.newbyteorder("="))

    backbone = init_backbone(bcfg, seed=0)
    _fill(backbone.named_parameters(), tensors, "backbone/")
    consolidator = None
    if ccfg is not None:
        consolidator = inherit_weights(backbone, ccfg, seed=0)
        _fill(consolidator.named_parameters(), tensors, "consolidator/")
    if tensors:
        raise FormatError(f"unexpected tensor {sorted(tensors)[0]}")
    return backbone, consolidator


def _fill(named, tensors: dict, prefix: str) -> None:
    for name, p in named:
        key = prefix + name
        if key not in tensors:
            raise FormatError(f"missing tensor {key}")
        arr = tensors.pop(key)
        if arr.shape != p.data.shape or arr.dtype != p.data.dtype:
            raise FormatError(
                f"tensor {key} has shape {arr.shape}/{arr.dtype}, expected {p.data.shape}/{p.data.dtype}"
            )
        p.data = arr.copy()
        if isinstance(p, Parameter):
            p.grad = np.zeros_like(p.data)


def load_checkpoint(path) -> tuple[Backbone, Consolidator | None]:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read checkpoint {path}: {exc}") from exc
    return decode(buf)
