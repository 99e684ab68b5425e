"""Checkpoint sets, layout normalization and OFT adapter packing."""

from __future__ import annotations

import fnmatch
import json
import math
import threading
import weakref
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from ..errors import BadBlockLayoutError, MalformedHeaderError, ShapeMismatchError
from ..manifold import SkewGenerator, block_slices
from .tensorfile import FLOAT_DTYPES, TensorFile, store_tensor_file

OFT_SUFFIX = ".oft_q"


class ShardedCheckpoint:
    """A checkpoint split over several files listed by an index JSON.

    The index must contain ``{"weight_map": {tensor_name: shard_file}}``;
    shard paths are relative to the index file.
    """

    def __init__(self, index_path):
        self.path = Path(index_path)
        try:
            index = json.loads(self.path.read_text("utf-8"))
            weight_map = index["weight_map"]
        except (ValueError, KeyError, TypeError) as exc:
            raise MalformedHeaderError(f"{self.path}: not a shard index ({exc})")
        self.metadata = {str(k): str(v) for k, v in (index.get("metadata") or {}).items()}
        shards = {f: TensorFile(self.path.parent / f) for f in sorted(set(weight_map.values()))}
        self._where = {}
        for name, f in weight_map.items():
            if name not in shards[f]:
                raise MalformedHeaderError(f"{self.path}: {name!r} missing from shard {f}")
            self._where[name] = shards[f]

    def keys(self):
        return sorted(self._where)

    def __contains__(self, name):
        return name in self._where

    def info(self, name):
        return self._where[name].info(name)

    def nbytes(self, name):
        return self._where[name].nbytes(name)

    def get(self, name):
        return self._where[name].get(name)


def open_checkpoint(path):
    path = Path(path)
    if path.suffix == ".json":
        return ShardedCheckpoint(path)
    return TensorFile(path)


class MemoryTracker:
    """Counts bytes of live working tensors handed out by a CheckpointSet."""

    def __init__(self):
        self._lock = threading.Lock()
        self.current = 0
        self.peak = 0

    def track(self, array: np.ndarray) -> np.ndarray:
        n = array.nbytes
        with self._lock:
            self.current += n
            self.peak = max(self.peak, self.current)
        weakref.finalize(array, self._release, n)
        return array

    def _release(self, n):
        with self._lock:
            self.current -= n


def is_adapter(ckpt) -> bool:
    return any(k.endswith(OFT_SUFFIX) for k in ckpt.keys())


def matches(name: str, include: Sequence[str], exclude: Sequence[str]) -> bool:
    return (any(fnmatch.fnmatchcase(name, p) for p in include)
            and not any(fnmatch.fnmatchcase(name, p) for p in exclude))


@dataclass
class CheckpointSet:
    """A base checkpoint plus N expert checkpoints (full weights or OFT adapters).

    With ``transpose`` 2-D tensors are stored as (d_out, d_in) on disk and
    flipped on load, so that callers always see (d_in, d_out).
    """

    base: object
    experts: list
    transpose: bool = False
    tracker: MemoryTracker = field(default_factory=MemoryTracker)

    @classmethod
    def open(cls, base_path, expert_paths: Sequence, transpose: bool = False) -> "CheckpointSet":
        return cls(open_checkpoint(base_path), [open_checkpoint(p) for p in expert_paths],
                   transpose)

    @property
    def num_experts(self) -> int:
        return len(self.experts)

    def adapter_flags(self) -> list[bool]:
        return [is_adapter(e) for e in self.experts]

    def shape(self, name: str) -> tuple[int, ...]:
        """Normalized (in-memory) shape of a base tensor."""
        _, shape = self.base.info(name)
        return tuple(reversed(shape)) if self.transpose and len(shape) == 2 else shape

    def _normalize(self, arr: np.ndarray) -> np.ndarray:
        if self.transpose and arr.ndim == 2:
            return np.ascontiguousarray(arr.T)
        return arr

    def denormalize(self, arr: np.ndarray) -> np.ndarray:
        return self._normalize(arr)

    def raw_base(self, name: str) -> np.ndarray:
        return self.base.get(name)

    def base_f64(self, name: str) -> np.ndarray:
        return self.tracker.track(self._normalize(self.base.get(name).astype(np.float64)))

    def expert_f64(self, i: int, name: str) -> np.ndarray:
        return self.tracker.track(
            self._normalize(self.experts[i].get(name).astype(np.float64)))

    def manifest(self) -> dict:
        base_names = set(self.base.keys())
        per_expert = []
        for i, e in enumerate(self.experts):
            if is_adapter(e):
                names = {k[: -len(OFT_SUFFIX)] for k in e.keys() if k.endswith(OFT_SUFFIX)}
                kind = "oft_adapter"
            else:
                names = set(e.keys())
                kind = "full"
            per_expert.append({
                "index": i,
                "path": str(getattr(e, "path", "")),
                "kind": kind,
                "missing_from_expert": sorted(base_names - names),
                "extra_in_expert": sorted(names - base_names),
            })
        full = [set(e.keys()) for e in self.experts if not is_adapter(e)]
        common = base_names.intersection(*full) if full else set(base_names)
        union = base_names.union(*[set(e.keys()) for e in self.experts])
        return {
            "base": str(getattr(self.base, "path", "")),
            "num_tensors_base": len(base_names),
            "intersection": sorted(common),
            "union_size": len(union),
            "experts": per_expert,
        }

    def check_tensor(self, name: str) -> None:
        """Every merged tensor must exist with identical shape in all full experts."""
        _, shape = self.base.info(name)
        for i, e in enumerate(self.experts):
            if is_adapter(e):
                continue
            if name not in e:
                raise ShapeMismatchError(f"tensor missing from expert {i}", tensor=name, task=i)
            _, es = e.info(name)
            if es != shape:
                raise ShapeMismatchError(f"expert {i} has shape {list(es)}, base has {list(shape)}",
                                         tensor=name, task=i)

    def is_float(self, name: str) -> bool:
        return self.base.info(name)[0] in FLOAT_DTYPES


# --------------------------------------------------------------------------
# OFT adapters
# --------------------------------------------------------------------------
# Convention: for a base tensor "<name>" of (normalized) shape (d_in, d_out),
# the adapter stores "<name>.oft_q" with shape (n_blocks, b*(b-1)/2): the
# strict upper triangle of each b x b skew block, packed row-major, with
# n_blocks * b == d_in.

def _block_from_packed(length: int) -> int | None:
    b = (1 + math.isqrt(1 + 8 * length)) // 2
    return b if b * (b - 1) // 2 == length and b >= 2 else None


def pack_generator(q: SkewGenerator) -> np.ndarray:
    b = q.block_size or q.dim
    iu = np.triu_indices(b, 1)
    return np.stack([q.data[sl, sl][iu] for sl in block_slices(q.dim, q.block_size)])


def unpack_generator(packed: np.ndarray, d_in: int, *, name: str = "") -> SkewGenerator:
    packed = np.asarray(packed, dtype=np.float64)
    if packed.ndim != 2:
        raise BadBlockLayoutError(f"adapter tensor must be 2-D, got shape {packed.shape}",
                                  tensor=name)
    n_blocks, length = packed.shape
    b = _block_from_packed(length)
    if b is None or n_blocks * b != d_in:
        raise BadBlockLayoutError(
            f"{n_blocks} blocks of {length} packed entries do not tile d_in={d_in}", tensor=name)
    iu = np.triu_indices(b, 1)
    q = np.zeros((d_in, d_in))
    for k in range(n_blocks):
        blk = np.zeros((b, b))
        blk[iu] = packed[k]
        q[k * b:(k + 1) * b, k * b:(k + 1) * b] = blk - blk.T
    return SkewGenerator(q, None if n_blocks == 1 else b)


def load_oft_adapter(path_or_ckpt, base_shapes: Mapping[str, tuple]) -> dict[str, SkewGenerator]:
    """Generators keyed by base tensor name.

    ``base_shapes`` holds normalized (d_in, d_out) shapes; an adapter entry
    without a matching 2-D base tensor is a SHAPE_MISMATCH.
    """
    ckpt = path_or_ckpt if hasattr(path_or_ckpt, "get") else open_checkpoint(path_or_ckpt)
    out = {}
    for key in ckpt.keys():
        if not key.endswith(OFT_SUFFIX):
            continue
        name = key[: -len(OFT_SUFFIX)]
        shape = base_shapes.get(name)
        if shape is None or len(shape) != 2:
            raise ShapeMismatchError(f"adapter {key!r} has no 2-D base tensor", tensor=name)
        out[name] = unpack_generator(ckpt.get(key), shape[0], name=name)
    return out


def store_oft_adapter(path, generators: Mapping[str, SkewGenerator], dtype: str = "F32",
                      metadata: Mapping[str, str] | None = None) -> None:
    tensors = {name + OFT_SUFFIX: pack_generator(q) for name, q in generators.items()}
    meta = {"format": "orthomerge-oft"}
    meta.update(metadata or {})
    store_tensor_file(path, tensors, dtypes={k: dtype for k in tensors}, metadata=meta)
