"""Binary checkpoint serialization.

Layout: magic ``CKP1``, u32 tensor count, then per tensor a u16-length
name, u8 rank, one u32 per dim, and float32 row-major data; the file ends
with a JSON config blob. Tensor names live in a ``blocks/<module>/<tensor>``
namespace derived from the module tree's dotted parameter paths; parameters
owned by the root module use the reserved module name ``model``.

Entries are written in sorted name order so identical states produce
identical bytes.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import ConfigError, FormatError
from .nn import Module

MAGIC = b"CKP1"
_ROOT = "model"


def tensor_key(param_path: str) -> str:
    """Dotted parameter path -> checkpoint namespace key."""
    if "." in param_path:
        module, tensor = param_path.rsplit(".", 1)
    else:
        module, tensor = _ROOT, param_path
    return f"blocks/{module}/{tensor}"


def param_path(key: str) -> str:
    """Checkpoint namespace key -> dotted parameter path."""
    if not key.startswith("blocks/") or key.count("/") < 2:
        raise FormatError(f"malformed tensor key {key!r}")
    module, tensor = key[len("blocks/") :].rsplit("/", 1)
    return tensor if module == _ROOT else f"{module}.{tensor}"


def save_checkpoint(path, module: Module, config: dict | None = None) -> None:
    entries = {tensor_key(name): p.data for name, p in module.named_parameters().items()}
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(entries)))
        for name in sorted(entries):
            data = entries[name]
            raw = name.encode("utf-8")
            if len(raw) > 0xFFFF:
                raise FormatError(f"tensor name too long: {name!r}")
            if data.ndim > 0xFF:
                raise FormatError(f"rank {data.ndim} exceeds u8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", data.ndim))
            fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
            fh.write(np.ascontiguousarray(data, dtype="<f4").tobytes())
        fh.write(json.dumps(config or {}, sort_keys=True).encode("utf-8"))


def _take(buf: bytes, offset: int, count: int, what: str) -> tuple[bytes, int]:
    if offset + count > len(buf):
        raise FormatError(f"checkpoint truncated reading {what}")
    return buf[offset : offset + count], offset + count


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    """Read tensors (as float64 arrays keyed by namespace name) and the config blob."""
    with open(path, "rb") as fh:
        buf = fh.read()
    magic, off = _take(buf, 0, 4, "magic")
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    raw, off = _take(buf, off, 4, "tensor count")
    (count,) = struct.unpack("<I", raw)
    tensors: dict[str, np.ndarray] = {}
    for i in range(count):
        raw, off = _take(buf, off, 2, f"name length of tensor {i}")
        (name_len,) = struct.unpack("<H", raw)
        raw, off = _take(buf, off, name_len, f"name of tensor {i}")
        name = raw.decode("utf-8")
        raw, off = _take(buf, off, 1, f"rank of {name}")
        rank = raw[0]
        raw, off = _take(buf, off, 4 * rank, f"dims of {name}")
        shape = struct.unpack(f"<{rank}I", raw)
        n_items = int(np.prod(shape, dtype=np.int64)) if rank else 1
        raw, off = _take(buf, off, 4 * n_items, f"data of {name}")
        tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float64)
    blob = buf[off:]
    try:
        config = json.loads(blob.decode("utf-8")) if blob else {}
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise FormatError(f"bad config blob: {err}") from None
    return tensors, config


def restore_module(module: Module, tensors: dict[str, np.ndarray], strict: bool = True) -> list[str]:
    """Copy checkpoint tensors into matching parameters; returns restored paths.

    Missing or shape-mismatched tensors raise ConfigError naming every
    offender when strict; non-strict skips missing ones silently but still
    rejects shape mismatches.
    """
    params = module.named_parameters()
    missing = []
    mismatched = []
    restored = []
    for path, p in params.items():
        key = tensor_key(path)
        if key not in tensors:
            missing.append(key)
            continue
        incoming = tensors[key]
        if incoming.shape != p.shape:
            mismatched.append(f"{key}: checkpoint {incoming.shape} vs model {p.shape}")
            continue
        p.data[...] = incoming
        restored.append(path)
    if mismatched or (strict and missing):
        raise ConfigError(
            "checkpoint does not fit model; missing: "
            f"{missing or 'none'}; mismatched: {mismatched or 'none'}"
        )
    return restored
