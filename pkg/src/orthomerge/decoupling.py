"""Orthogonal-residual decoupling of non-OFT experts.

Each expert ``W_i`` is split into a rotation ``R_i`` of the base (fitted
by Procrustes against a per-task target) plus an additive residual
``rho_i = W_i - R_i W_0``. Rotations are merged in so(d), residuals by a
Euclidean backend, and the result is ``R_merged W_0 + rho_merged``.

Weights are (d_in, d_out) with columns as neurons; rotations act on the
left, i.e. on the d_in axis.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .errors import EmptyInputError, OrthoMergeError, ShapeMismatchError
from .euclidean import EuclideanMethod, euclidean_merge
from .manifold import (
    RotationMatrix,
    cayley,
    inverse_cayley,
    magnitude_corrected_merge,
    orthogonality_error,
    procrustes,
)


class DecoupleStrategy(str, enum.Enum):
    GLOBAL = "global"
    CONFLICT_AWARE = "conflict_aware"


@dataclass(frozen=True)
class TaskVector:
    delta: np.ndarray
    conflict_mask: np.ndarray | None = None
    residual: np.ndarray | None = None
    degenerate_svd: bool = False


def _as_weights(w_base, experts):
    base = np.asarray(w_base, dtype=np.float64)
    if len(experts) == 0:
        raise EmptyInputError("no experts to merge")
    out = []
    for i, w in enumerate(experts):
        w = np.asarray(w, dtype=np.float64)
        if w.shape != base.shape:
            raise ShapeMismatchError(
                f"expert {i} has shape {w.shape}, base has {base.shape}", task=i)
        out.append(w)
    return base, out


def column_cosines(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Column-wise cosine similarity; a zero column on either side gives 0."""
    dots = np.einsum("ij,ij->j", a, b)
    na = np.linalg.norm(a, axis=0)
    nb = np.linalg.norm(b, axis=0)
    denom = na * nb
    return np.divide(dots, denom, out=np.zeros_like(dots), where=denom > 0)


def conflict_masks(task_vectors: Sequence[np.ndarray]) -> list[np.ndarray]:
    """Columns whose update points against the mean task vector."""
    mean = np.mean(np.stack(task_vectors), axis=0)
    return [column_cosines(t, mean) < 0 for t in task_vectors]


def build_targets(w_base, experts, strategy=DecoupleStrategy.GLOBAL, *,
                  return_masks: bool = False):
    """Procrustes targets for each expert.

    GLOBAL uses the experts themselves. CONFLICT_AWARE keeps only the
    columns of each task vector that conflict with the mean task vector and
    adds them back onto the base.
    """
    strategy = DecoupleStrategy(strategy)
    base, experts = _as_weights(w_base, experts)
    if strategy is DecoupleStrategy.GLOBAL:
        targets = [w.copy() for w in experts]
        masks = [None] * len(experts)
    else:
        taus = [w - base for w in experts]
        masks = conflict_masks(taus)
        targets = [base + np.where(m[None, :], t, 0.0) for t, m in zip(taus, masks)]
    return (targets, masks) if return_masks else targets


def extract_rotation_and_residual(w_base, expert, target, *, block_size: int | None = None,
                                  conflict_mask: np.ndarray | None = None):
    """Fit ``R`` on the target, then take the residual against the expert.

    Returns ``(RotationMatrix, TaskVector)``; ``R W_0 + residual == expert``
    up to float64 rounding.
    """
    base = np.asarray(w_base, dtype=np.float64)
    expert = np.asarray(expert, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if not (base.shape == expert.shape == target.shape):
        raise ShapeMismatchError(
            f"shapes differ: base {base.shape}, expert {expert.shape}, target {target.shape}")
    res = procrustes(target, base, block_size=block_size, full_output=True)
    rotated = res.rotation.data @ base
    tv = TaskVector(delta=expert - base, conflict_mask=conflict_mask,
                    residual=expert - rotated, degenerate_svd=res.degenerate)
    return res.rotation, tv


def decompose(w_base, experts, strategy=DecoupleStrategy.GLOBAL, *,
              block_size: int | None = None):
    """Per-task rotations and task vectors, before any merging."""
    base, experts = _as_weights(w_base, experts)
    targets, masks = build_targets(base, experts, strategy, return_masks=True)
    rotations, tvs = [], []
    for i, (w, t, m) in enumerate(zip(experts, targets, masks)):
        try:
            r, tv = extract_rotation_and_residual(base, w, t, block_size=block_size,
                                                  conflict_mask=m)
        except OrthoMergeError as exc:
            raise exc.with_context(task=i)
        rotations.append(r)
        tvs.append(tv)
    return rotations, tvs


def hybrid_merge(w_base, experts, strategy=DecoupleStrategy.GLOBAL,
                 residual_backend: EuclideanMethod | None = None, *,
                 tensor_name: str = "", block_size: int | None = None,
                 per_block: bool = True):
    """Full decoupled merge of one weight matrix.

    The residual backend's lambda defaults to 1/N. Returns
    ``(W_final, MergeDiagnostics)``; the diagnostics also carry per-task
    DEGENERATE_SVD flags and Cayley-chart margins.
    """
    base, experts = _as_weights(w_base, experts)
    n = len(experts)
    rotations, tvs = decompose(base, experts, strategy, block_size=block_size)

    generators, margins = [], []
    for i, r in enumerate(rotations):
        try:
            q, margin = inverse_cayley(r, full_output=True)
        except OrthoMergeError as exc:
            raise exc.with_context(tensor=tensor_name or None, task=i)
        generators.append(q)
        margins.append(margin)
    q_merged, diag = magnitude_corrected_merge(generators, per_block=per_block)
    r_merged = cayley(q_merged)

    rho_merged = euclidean_merge([tv.residual for tv in tvs], residual_backend,
                                 tensor_name=tensor_name, default_scale=1.0 / n)
    w_final = r_merged.data @ base + rho_merged
    diag = replace(diag, degenerate_svd=tuple(tv.degenerate_svd for tv in tvs),
                   cayley_margins=tuple(margins),
                   orthogonality_error=orthogonality_error(r_merged))
    return w_final, diag


def merged_rotation(w_base, experts, strategy=DecoupleStrategy.GLOBAL, *,
                    block_size: int | None = None) -> RotationMatrix:
    """Only the orthogonal branch of :func:`hybrid_merge`."""
    rotations, _ = decompose(w_base, experts, strategy, block_size=block_size)
    q, _ = magnitude_corrected_merge([inverse_cayley(r) for r in rotations])
    return cayley(q)
