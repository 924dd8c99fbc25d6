"""FMX1 feature file format.

Layout: magic b"FMX1", u32-le rows, u32-le cols, rows*cols float32-le
row-major, then a u16-le length-prefixed UTF-8 JSON metadata blob
(typically {"dim_labels": [...], "config_hash": "..."}).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, NumericError, ShapeError

MAGIC = b"FMX1"


@dataclass
class FeatureMatrix:
    """Row-major (frames x dims) real matrix with named columns."""

    data: np.ndarray
    dim_labels: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim == 1:
            self.data = self.data[None, :]
        if self.data.ndim != 2:
            raise FormatError(f"FeatureMatrix needs a 2-d array, got ndim={self.data.ndim}")
        if self.dim_labels and len(self.dim_labels) != self.data.shape[1]:
            raise ShapeError(
                f"{len(self.dim_labels)} dim_labels for {self.data.shape[1]} columns"
            )
        if not np.all(np.isfinite(self.data)):
            raise NumericError("FeatureMatrix entries must be finite")

    @property
    def n_frames(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]


def write_fmx(path, matrix: FeatureMatrix | np.ndarray, metadata: dict | None = None) -> None:
    """Write a feature matrix to an FMX1 file.

    Data is stored float32; extra `metadata` keys are merged with the
    dim_labels entry.
    """
    if isinstance(matrix, FeatureMatrix):
        data, labels = matrix.data, matrix.dim_labels
    else:
        data, labels = np.asarray(matrix), []
    if data.ndim == 1:
        data = data[None, :]
    meta = {"dim_labels": list(labels)}
    if metadata:
        meta.update(metadata)
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    if len(blob) > 0xFFFF:
        raise FormatError(f"metadata blob too large for u16 prefix ({len(blob)} bytes)")
    rows, cols = data.shape
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", rows, cols))
        fh.write(np.ascontiguousarray(data, dtype="<f4").tobytes())
        fh.write(struct.pack("<H", len(blob)))
        fh.write(blob)


def read_fmx(path) -> tuple[FeatureMatrix, dict]:
    """Read an FMX1 file; returns (FeatureMatrix, metadata dict)."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
        header = fh.read(8)
        if len(header) != 8:
            raise FormatError(f"{path}: truncated header")
        rows, cols = struct.unpack("<II", header)
        payload = fh.read(rows * cols * 4)
        if len(payload) != rows * cols * 4:
            raise FormatError(f"{path}: truncated payload ({len(payload)} bytes)")
        data = np.frombuffer(payload, dtype="<f4").reshape(rows, cols)
        lenbytes = fh.read(2)
        if len(lenbytes) != 2:
            raise FormatError(f"{path}: missing metadata length")
        (blob_len,) = struct.unpack("<H", lenbytes)
        blob = fh.read(blob_len)
        if len(blob) != blob_len:
            raise FormatError(f"{path}: truncated metadata blob")
        try:
            meta = json.loads(blob.decode("utf-8")) if blob_len else {}
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"{path}: bad metadata blob: {exc}") from exc
    labels = meta.get("dim_labels", [])
    return FeatureMatrix(data.astype(np.float64), list(labels)), meta
