"""Binary checkpoint container.

Layout::

    b"NCRF" | version (1 byte) | header length (uint32 LE) | UTF-8 JSON header | payload

The JSON header maps each parameter name to ``{"dtype": "f32", "shape": [...],
"byte_offset": n}`` (offsets relative to the payload start); the reserved key
``"__meta__"`` holds the architecture and run metadata.  Payload values are
little-endian float32, concatenated in header order.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .extractor import CRF_WEIGHT, Architecture, ExtractorParams
from .numerics import Tensor

MAGIC = b"NCRF"
VERSION = 1
META_KEY = "__meta__"


class CheckpointError(ValueError):
    pass


def _encode_header(header: dict) -> bytes:
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")


def dumps(params: ExtractorParams, meta: Optional[dict] = None) -> bytes:
    header: dict = {META_KEY: {"architecture": params.arch.to_dict(), **(meta or {})}}
    chunks = []
    offset = 0
    for name in sorted(params.tensors):
        arr = np.ascontiguousarray(params.tensors[name].data, dtype="<f4")
        header[name] = {"dtype": "f32", "shape": list(arr.shape), "byte_offset": offset}
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    head = _encode_header(header)
    return MAGIC + struct.pack("<BI", VERSION, len(head)) + head + b"".join(chunks)


def read_header(blob: bytes) -> tuple[dict, int]:
    if len(blob) < 9 or blob[:4] != MAGIC:
        raise CheckpointError("not an NCRF checkpoint (bad magic bytes)")
    version, length = struct.unpack("<BI", blob[4:9])
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        header = json.loads(blob[9 : 9 + length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from exc
    return header, 9 + length


def loads(blob: bytes, expect: Optional[Architecture] = None) -> tuple[ExtractorParams, dict]:
    """Parse a checkpoint; with ``expect`` the stored architecture is validated against it."""
    header, start = read_header(blob)
    meta = header.pop(META_KEY, {})
    arch = Architecture(**meta.get("architecture", {}))
    if expect is not None:
        if expect.crf_enabled and CRF_WEIGHT not in header:
            raise CheckpointError(
                f"checkpoint has no '{CRF_WEIGHT}' entry (trained with --no-crf); refusing NCRF inference"
            )
        stored = arch.to_dict()
        wanted = expect.to_dict()
        stored.pop("crf_enabled")
        wanted.pop("crf_enabled")
        if stored != wanted:
            raise CheckpointError(f"checkpoint architecture {stored} does not match configuration {wanted}")
        if not expect.crf_enabled:
            arch = expect
    shapes = arch.param_shapes()
    tensors = {}
    for name, entry in header.items():
        if entry.get("dtype") != "f32":
            raise CheckpointError(f"unsupported dtype {entry.get('dtype')!r} for {name}")
        shape = tuple(entry["shape"])
        if name in shapes and shapes[name] != shape:
            raise CheckpointError(f"parameter {name} has shape {shape}, architecture expects {shapes[name]}")
        count = int(np.prod(shape))
        lo = start + entry["byte_offset"]
        raw = np.frombuffer(blob, dtype="<f4", count=count, offset=lo).reshape(shape)
        tensors[name] = Tensor(raw.copy(), requires_grad=True, name=name)
    missing = set(shapes) - set(tensors)
    if missing:
        raise CheckpointError(f"checkpoint lacks parameters {sorted(missing)}")
    tensors = {n: tensors[n] for n in shapes}
    return ExtractorParams(arch, tensors), meta


def save(path: Union[str, Path], params: ExtractorParams, meta: Optional[dict] = None) -> None:
    Path(path).write_bytes(dumps(params, meta))


def load(path: Union[str, Path], expect: Optional[Architecture] = None) -> tuple[ExtractorParams, dict]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    return loads(path.read_bytes(), expect)
