"""Euclidean merging backends: task arithmetic, TIES, DARE, simple average.

These run standalone on task vectors and as the residual merger of the
orthogonal-residual decoupling.

DARE randomness is drawn from a PCG64 stream keyed by
``SeedSequence(seed, spawn_key=(crc32(tensor_name), task_index))``, so the
mask for a given (tensor, task) does not depend on the order in which
tensors are processed.
"""

from __future__ import annotations

import enum
import math
import zlib
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .errors import EmptyInputError, RecipeError, ShapeMismatchError


class EuclideanKind(str, enum.Enum):
    TA = "ta"
    TIES = "ties"
    DARE = "dare"
    SIMPLE_AVG = "simple_avg"


@dataclass(frozen=True)
class EuclideanMethod:
    """Hyperparameters of a Euclidean merger.

    ``scale`` is the task-arithmetic coefficient (lambda). ``None`` means the
    context default: 1.0 when merging task vectors standalone, 1/N when
    merging decoupling residuals.
    """

    kind: EuclideanKind = EuclideanKind.TA
    scale: float | None = None
    ties_keep_fraction: float = 0.2
    dare_drop_prob: float = 0.9
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", EuclideanKind(self.kind))
        if self.scale is not None and not self.scale > 0:
            raise RecipeError(f"lambda must be > 0, got {self.scale}")
        if not 0 < self.ties_keep_fraction <= 1:
            raise RecipeError(f"ties_keep_fraction must be in (0, 1], got {self.ties_keep_fraction}")
        if not 0 <= self.dare_drop_prob < 1:
            raise RecipeError(f"dare_drop_prob must be in [0, 1), got {self.dare_drop_prob}")

    def resolved(self, default_scale: float) -> "EuclideanMethod":
        if self.scale is not None:
            return self
        return replace(self, scale=default_scale)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "lambda": self.scale,
            "ties_keep_fraction": self.ties_keep_fraction,
            "dare_drop_prob": self.dare_drop_prob,
            "seed": self.seed,
        }


def task_rng(seed: int, tensor_name: str, task_index: int) -> np.random.Generator:
    key = zlib.crc32(tensor_name.encode("utf-8"))
    return np.random.Generator(np.random.PCG64(
        np.random.SeedSequence(seed, spawn_key=(key, task_index))))


def _stack(deltas: Sequence) -> np.ndarray:
    if len(deltas) == 0:
        raise EmptyInputError("no task vectors to merge")
    arrs = [np.asarray(d, dtype=np.float64) for d in deltas]
    for i, a in enumerate(arrs[1:], start=1):
        if a.shape != arrs[0].shape:
            raise ShapeMismatchError(
                f"task vector {i} has shape {a.shape}, expected {arrs[0].shape}", task=i)
    return np.stack(arrs)


def ties_trim(delta: np.ndarray, keep_fraction: float) -> np.ndarray:
    """Keep the ``ceil(keep_fraction * size)`` largest-magnitude entries.

    Ties in magnitude are resolved by flat index (lower index kept).
    """
    flat = delta.ravel()
    k = min(flat.size, math.ceil(keep_fraction * flat.size))
    out = np.zeros_like(flat)
    if k > 0:
        idx = np.argsort(-np.abs(flat), kind="stable")[:k]
        out[idx] = flat[idx]
    return out.reshape(delta.shape)


def ties_merge(stacked: np.ndarray, keep_fraction: float, scale: float) -> np.ndarray:
    trimmed = np.stack([ties_trim(t, keep_fraction) for t in stacked])
    # sign election; an exact zero sum elects +
    elected = np.where(trimmed.sum(axis=0) >= 0, 1.0, -1.0)
    agree = (trimmed != 0) & (np.sign(trimmed) == elected)
    count = agree.sum(axis=0)
    total = np.where(agree, trimmed, 0.0).sum(axis=0)
    mean = np.divide(total, count, out=np.zeros_like(total), where=count > 0)
    return scale * mean


def dare_sparsify(delta: np.ndarray, drop_prob: float, rng: np.random.Generator) -> np.ndarray:
    if drop_prob == 0:
        return np.array(delta, dtype=np.float64)
    keep = rng.random(delta.shape) >= drop_prob
    return np.where(keep, delta / (1.0 - drop_prob), 0.0)


def euclidean_merge(deltas: Sequence, method: EuclideanMethod | None = None, *,
                    tensor_name: str = "", default_scale: float = 1.0) -> np.ndarray:
    """Merge task vectors (or residuals) in Euclidean space.

    * TA: ``lambda * sum(delta_i)``
    * SIMPLE_AVG: ``mean(delta_i)``
    * TIES: per-tensor trim to the top ``ties_keep_fraction`` by magnitude,
      elect each entry's sign from the sum of trimmed values, then
      ``lambda *`` the mean over tasks whose trimmed entry is nonzero and
      agrees with the elected sign.
    * DARE: drop each entry with probability ``p`` and rescale survivors by
      ``1 / (1 - p)``, independently per task, then combine as TA.

    ``tensor_name`` keys the DARE random stream.
    """
    method = (method or EuclideanMethod()).resolved(default_scale)
    stacked = _stack(deltas)
    kind = method.kind
    if kind is EuclideanKind.SIMPLE_AVG:
        return stacked.mean(axis=0)
    if kind is EuclideanKind.TA:
        return method.scale * stacked.sum(axis=0)
    if kind is EuclideanKind.TIES:
        return ties_merge(stacked, method.ties_keep_fraction, method.scale)
    if kind is EuclideanKind.DARE:
        sparse = np.stack([
            dare_sparsify(d, method.dare_drop_prob, task_rng(method.seed, tensor_name, i))
            for i, d in enumerate(stacked)])
        return method.scale * sparse.sum(axis=0)
    raise RecipeError(f"unknown Euclidean method {kind!r}")
