"""Reader and streaming writer for the safetensors container layout.

Layout: an unsigned little-endian 64-bit header length ``n``, then ``n``
bytes of UTF-8 JSON mapping each tensor name to ``{"dtype", "shape",
"data_offsets": [begin, end)}`` (plus an optional ``"__metadata__"`` string
map), then the raw little-endian tensor bytes. Offsets are relative to the
start of the data section.
"""

from __future__ import annotations

import json
import math
import os
import struct
import tempfile
import threading
from pathlib import Path
from typing import Iterable, Mapping

import ml_dtypes
import numpy as np

from ..errors import MalformedHeaderError, OffsetOutOfRangeError, UnsupportedDtypeError

DTYPES: dict[str, np.dtype] = {
    "F16": np.dtype("<f2"),
    "BF16": np.dtype(ml_dtypes.bfloat16),
    "F32": np.dtype("<f4"),
    "F64": np.dtype("<f8"),
    "I8": np.dtype("i1"),
    "I16": np.dtype("<i2"),
    "I32": np.dtype("<i4"),
    "I64": np.dtype("<i8"),
    "U8": np.dtype("u1"),
    "U16": np.dtype("<u2"),
    "U32": np.dtype("<u4"),
    "U64": np.dtype("<u8"),
    "BOOL": np.dtype("?"),
}
FLOAT_DTYPES = frozenset({"F16", "BF16", "F32", "F64"})
MAX_HEADER = 100 * 1024 * 1024


def dtype_name(dtype) -> str:
    dt = np.dtype(dtype)
    if dt == DTYPES["BF16"]:
        return "BF16"
    dt = dt.newbyteorder("<") if dt.byteorder == ">" else dt
    for name, ref in DTYPES.items():
        if name != "BF16" and dt == ref:
            return name
    raise UnsupportedDtypeError(f"numpy dtype {np.dtype(dtype)} has no container equivalent")


def to_dtype(array: np.ndarray, name: str) -> np.ndarray:
    """Cast to a container dtype (round-to-nearest-even for floats)."""
    if name not in DTYPES:
        raise UnsupportedDtypeError(f"unknown dtype {name!r}")
    return np.ascontiguousarray(np.asarray(array).astype(DTYPES[name], copy=False))


class TensorFile:
    """Lazily read tensors from one container file; the header is read eagerly."""

    def __init__(self, path):
        self.path = Path(path)
        self._lock = threading.Lock()
        size = self.path.stat().st_size
        with open(self.path, "rb") as fh:
            raw = fh.read(8)
            if len(raw) < 8:
                raise MalformedHeaderError(f"{self.path}: file shorter than 8 bytes")
            (n,) = struct.unpack("<Q", raw)
            if n > MAX_HEADER or 8 + n > size:
                raise MalformedHeaderError(f"{self.path}: header length {n} exceeds file size")
            header_bytes = fh.read(n)
        self._data_start = 8 + n
        self._data_len = size - self._data_start
        self.metadata, self._entries = self._parse_header(header_bytes)

    def _parse_header(self, header_bytes: bytes):
        try:
            header = json.loads(header_bytes.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise MalformedHeaderError(f"{self.path}: header is not UTF-8 JSON ({exc})")
        if not isinstance(header, dict):
            raise MalformedHeaderError(f"{self.path}: header is not a JSON object")
        metadata = header.pop("__metadata__", None) or {}
        if not isinstance(metadata, dict) or not all(
                isinstance(k, str) and isinstance(v, str) for k, v in metadata.items()):
            raise MalformedHeaderError(f"{self.path}: __metadata__ must map strings to strings")
        entries = {}
        spans = []
        for name, info in header.items():
            if not isinstance(info, dict) or set(info) != {"dtype", "shape", "data_offsets"}:
                raise MalformedHeaderError(f"{self.path}: bad entry for tensor {name!r}")
            dt, shape, offsets = info["dtype"], info["shape"], info["data_offsets"]
            if not isinstance(dt, str):
                raise MalformedHeaderError(f"{self.path}: dtype of {name!r} is not a string")
            if dt not in DTYPES:
                raise UnsupportedDtypeError(f"{self.path}: tensor {name!r} has dtype {dt}")
            if not (isinstance(shape, list) and all(_is_uint(s) for s in shape)):
                raise MalformedHeaderError(f"{self.path}: bad shape for {name!r}")
            if not (isinstance(offsets, list) and len(offsets) == 2
                    and all(_is_uint(o) for o in offsets) and offsets[0] <= offsets[1]):
                raise MalformedHeaderError(f"{self.path}: bad data_offsets for {name!r}")
            begin, end = offsets
            if end - begin != math.prod(shape) * DTYPES[dt].itemsize:
                raise MalformedHeaderError(
                    f"{self.path}: {name!r} spans {end - begin} bytes, shape {shape} "
                    f"of {dt} needs {math.prod(shape) * DTYPES[dt].itemsize}")
            if end > self._data_len:
                raise OffsetOutOfRangeError(
                    f"{self.path}: {name!r} ends at {end}, data section has {self._data_len} bytes",
                    tensor=name)
            entries[name] = (dt, tuple(shape), begin, end)
            if end > begin:
                spans.append((begin, end, name))
        spans.sort()
        for (b0, e0, n0), (b1, e1, n1) in zip(spans, spans[1:]):
            if b1 < e0:
                raise OffsetOutOfRangeError(f"{self.path}: tensors {n0!r} and {n1!r} overlap",
                                            tensor=n1)
        return metadata, entries

    def keys(self) -> list[str]:
        return sorted(self._entries)

    def __contains__(self, name) -> bool:
        return name in self._entries

    def info(self, name: str) -> tuple[str, tuple[int, ...]]:
        dt, shape, _, _ = self._entries[name]
        return dt, shape

    def nbytes(self, name: str) -> int:
        _, _, b, e = self._entries[name]
        return e - b

    def get(self, name: str) -> np.ndarray:
        dt, shape, begin, end = self._entries[name]
        with self._lock, open(self.path, "rb") as fh:
            fh.seek(self._data_start + begin)
            buf = fh.read(end - begin)
        if len(buf) != end - begin:
            raise OffsetOutOfRangeError(f"{self.path}: short read for {name!r}", tensor=name)
        return np.frombuffer(buf, dtype=DTYPES[dt]).reshape(shape).copy()


def _is_uint(x) -> bool:
    return isinstance(x, int) and not isinstance(x, bool) and x >= 0


def load_tensor_file(path) -> dict[str, np.ndarray]:
    f = TensorFile(path)
    return {name: f.get(name) for name in f.keys()}


class TensorWriter:
    """Streams tensors into a container file in a fixed, pre-declared order.

    The header is written up front from ``entries`` (name, dtype, shape);
    tensors must then be written in that order. Data goes to a temporary
    file that is renamed over ``path`` only when every tensor was written,
    so a failed run leaves no partial output.
    """

    def __init__(self, path, entries: Iterable[tuple[str, str, tuple[int, ...]]],
                 metadata: Mapping[str, str] | None = None):
        self.path = Path(path)
        self._entries = list(entries)
        header = {}
        if metadata:
            header["__metadata__"] = {str(k): str(v) for k, v in sorted(metadata.items())}
        offset = 0
        for name, dt, shape in self._entries:
            if dt not in DTYPES:
                raise UnsupportedDtypeError(f"cannot write dtype {dt!r}", tensor=name)
            size = math.prod(shape) * DTYPES[dt].itemsize
            header[name] = {"dtype": dt, "shape": list(shape),
                            "data_offsets": [offset, offset + size]}
            offset += size
        blob = json.dumps(header, separators=(",", ":"), ensure_ascii=False).encode("utf-8")
        blob += b" " * (-len(blob) % 8)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        fd, self._tmp = tempfile.mkstemp(prefix=f".{self.path.name}.", suffix=".tmp",
                                         dir=self.path.parent)
        self._fh = os.fdopen(fd, "wb")
        self._fh.write(struct.pack("<Q", len(blob)))
        self._fh.write(blob)
        self._next = 0

    def write(self, name: str, array: np.ndarray) -> None:
        exp_name, dt, shape = self._entries[self._next]
        if name != exp_name:
            raise ValueError(f"expected tensor {exp_name!r} next, got {name!r}")
        arr = np.asarray(array)
        if tuple(arr.shape) != tuple(shape):
            raise ValueError(f"{name!r}: shape {arr.shape} does not match declared {shape}")
        self._fh.write(to_dtype(arr, dt).tobytes())
        self._next += 1

    def close(self) -> None:
        if self._next != len(self._entries):
            self.abort()
            raise ValueError(f"only {self._next} of {len(self._entries)} tensors were written")
        self._fh.close()
        os.replace(self._tmp, self.path)

    def abort(self) -> None:
        if not self._fh.closed:
            self._fh.close()
        if os.path.exists(self._tmp):
            os.unlink(self._tmp)

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None:
            self.close()
        else:
            self.abort()
        return False


def store_tensor_file(path, tensors: Mapping[str, np.ndarray],
                      dtypes: Mapping[str, str] | None = None,
                      metadata: Mapping[str, str] | None = None) -> None:
    """Write a tensor map; ``dtypes`` overrides the per-tensor output dtype."""
    dtypes = dtypes or {}
    names = sorted(tensors)
    entries = [(n, dtypes.get(n) or dtype_name(np.asarray(tensors[n]).dtype),
                tuple(np.shape(tensors[n]))) for n in names]
    with TensorWriter(path, entries, metadata) as w:
        for n in names:
            w.write(n, tensors[n])
