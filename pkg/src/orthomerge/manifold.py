"""Operations on the rotation group SO(d) and its Lie algebra so(d).

Rotations are always handled in float64. Block-diagonal matrices are
processed one diagonal block at a time, each block on a contiguous copy, so
a block-diagonal input gives exactly the same numbers as feeding each block
through separately.
"""

from __future__ import annotations

import contextlib
import contextvars
import enum
from dataclasses import dataclass, replace
from typing import NamedTuple, Sequence

import numpy as np
import scipy.linalg
from scipy.linalg import lapack

from .errors import (
    BadBlockLayoutError,
    CayleyDomainError,
    EmptyInputError,
    NotOrthogonalError,
    OrthoMergeError,
    ShapeMismatchError,
    SingularSolveError,
)

ZERO_SUM = "ZERO_SUM"

SINGULAR_RCOND = 1e-12
CAYLEY_DOMAIN_SIGMA = 1e-8
DEGENERATE_SVD_RATIO = 1e-10
ZERO_SUM_RATIO = 1e-12


@dataclass(frozen=True)
class Tolerances:
    ortho: float = 1e-6
    det: float = 1e-6
    skew: float = 1e-10
    roundtrip: float = 1e-8


_TOLERANCES: contextvars.ContextVar[Tolerances] = contextvars.ContextVar(
    "orthomerge_tolerances", default=Tolerances())


def get_tolerances() -> Tolerances:
    return _TOLERANCES.get()


@contextlib.contextmanager
def use_tolerances(tol: Tolerances):
    """Temporarily replace the validation tolerances for the current context."""
    token = _TOLERANCES.set(tol)
    try:
        yield tol
    finally:
        _TOLERANCES.reset(token)


def block_slices(d: int, block_size: int | None) -> list[slice]:
    if block_size is None:
        return [slice(0, d)]
    if block_size <= 0 or d % block_size:
        raise BadBlockLayoutError(f"block size {block_size} does not divide {d}")
    return [slice(i, i + block_size) for i in range(0, d, block_size)]


def _check_square(a: np.ndarray, what: str) -> None:
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeMismatchError(f"{what} must be square, got shape {a.shape}")


def _check_block_zeros(a: np.ndarray, block_size: int | None, what: str) -> None:
    if block_size is None:
        return
    mask = np.ones(a.shape, dtype=bool)
    for sl in block_slices(a.shape[0], block_size):
        mask[sl, sl] = False
    if np.any(a[mask] != 0):
        raise BadBlockLayoutError(f"{what} has nonzero entries outside its diagonal blocks")


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64, order="C", copy=True)
    a.setflags(write=False)
    return a


def orthogonality_error(r) -> float:
    """``||R^T R - I||_F`` for a RotationMatrix or a plain square array."""
    a = r.data if isinstance(r, RotationMatrix) else np.asarray(r, dtype=np.float64)
    return float(np.linalg.norm(a.T @ a - np.eye(a.shape[0])))


@dataclass(frozen=True)
class RotationMatrix:
    """A special-orthogonal matrix, optionally block-diagonal."""

    data: np.ndarray
    block_size: int | None = None

    def __post_init__(self):
        a = _frozen(self.data)
        _check_square(a, "rotation")
        if not np.all(np.isfinite(a)):
            raise NotOrthogonalError("rotation contains non-finite entries")
        _check_block_zeros(a, self.block_size, "rotation")
        tol = get_tolerances()
        err = orthogonality_error(a)
        if err > tol.ortho:
            raise NotOrthogonalError(f"||R^T R - I||_F = {err:.3e} exceeds {tol.ortho:.1e}")
        for sl in block_slices(a.shape[0], self.block_size):
            det = np.linalg.det(a[sl, sl])
            if abs(det - 1.0) > tol.det:
                raise NotOrthogonalError(
                    f"det = {det:.6f}; only the identity component of O(d) is representable")
        object.__setattr__(self, "data", a)

    @property
    def dim(self) -> int:
        return self.data.shape[0]

    @classmethod
    def identity(cls, d: int, block_size: int | None = None) -> "RotationMatrix":
        return cls(np.eye(d), block_size)

    def __matmul__(self, other):
        if isinstance(other, RotationMatrix):
            return other.__rmatmul__(self.data)
        return self.data @ other

    def __rmatmul__(self, other):
        return np.asarray(other) @ self.data


@dataclass(frozen=True)
class SkewGenerator:
    """A skew-symmetric matrix in so(d), antisymmetrized on construction."""

    data: np.ndarray
    block_size: int | None = None

    def __post_init__(self):
        a = np.asarray(self.data, dtype=np.float64)
        _check_square(a, "generator")
        a = _frozen((a - a.T) / 2.0)
        _check_block_zeros(a, self.block_size, "generator")
        object.__setattr__(self, "data", a)

    @property
    def dim(self) -> int:
        return self.data.shape[0]

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.data))

    @classmethod
    def zeros(cls, d: int, block_size: int | None = None) -> "SkewGenerator":
        return cls(np.zeros((d, d)), block_size)


@dataclass(frozen=True)
class MergeDiagnostics:
    """Bookkeeping for one magnitude-corrected merge.

    ``correction_factor`` and ``collapse_ratio`` are computed over the whole
    matrix. When the merge was done per block the factors actually applied
    are in ``block_correction_factors``.
    """

    per_task_norms: tuple[float, ...]
    sum_norm: float
    correction_factor: float | str
    collapse_ratio: float
    block_correction_factors: tuple[float | str, ...] | None = None
    degenerate_svd: tuple[bool, ...] = ()
    cayley_margins: tuple[float, ...] = ()
    orthogonality_error: float | None = None

    @property
    def zero_sum(self) -> bool:
        return self.correction_factor == ZERO_SUM

    def to_dict(self) -> dict:
        out = {
            "per_task_norms": list(self.per_task_norms),
            "sum_norm": self.sum_norm,
            "correction_factor": self.correction_factor,
            "collapse_ratio": self.collapse_ratio,
        }
        if self.block_correction_factors is not None:
            out["block_correction_factors"] = list(self.block_correction_factors)
        if self.degenerate_svd:
            out["degenerate_svd"] = list(self.degenerate_svd)
        if self.cayley_margins:
            out["cayley_margins"] = list(self.cayley_margins)
        if self.orthogonality_error is not None:
            out["orthogonality_error"] = self.orthogonality_error
        return out


class OftStrategy(str, enum.Enum):
    ORTHO_MERGE = "ortho_merge"
    SIMPLE_AVG_R = "simple_avg_r"
    SEQ_PRODUCT_R = "seq_product_r"
    SIMPLE_AVG_Q = "simple_avg_q"


# --------------------------------------------------------------------------
# Cayley maps
# --------------------------------------------------------------------------

def _cayley_block(q: np.ndarray) -> np.ndarray:
    eye = np.eye(q.shape[0])
    a = eye - q
    if not np.all(np.isfinite(a)):
        raise SingularSolveError("generator contains non-finite entries")
    lu, piv, info = lapack.dgetrf(a)
    if info > 0:
        raise SingularSolveError("I - Q is exactly singular")
    rcond, _ = lapack.dgecon(lu, np.abs(a).sum(axis=0).max(), norm="1")
    if not rcond >= SINGULAR_RCOND:
        raise SingularSolveError(f"reciprocal condition of I - Q is {rcond:.3e}")
    # (I + Q)(I - Q)^{-1}, computed as the transpose of (I - Q)^{-T} (I + Q)^T
    return scipy.linalg.lu_solve((lu, piv), (eye + q).T, trans=1).T


def _inverse_cayley_block(r: np.ndarray) -> np.ndarray:
    eye = np.eye(r.shape[0])
    b = r + eye
    smin = scipy.linalg.svdvals(b)[-1]
    if smin < CAYLEY_DOMAIN_SIGMA:
        raise CayleyDomainError(f"smallest singular value of R + I is {smin:.3e}")
    return scipy.linalg.solve(b.T, (r - eye).T).T, smin


def cayley(q: SkewGenerator) -> RotationMatrix:
    """Map a generator to a rotation, ``R = (I + Q)(I - Q)^{-1}``."""
    out = np.zeros_like(q.data)
    for sl in block_slices(q.dim, q.block_size):
        out[sl, sl] = _cayley_block(np.ascontiguousarray(q.data[sl, sl]))
    return RotationMatrix(out, q.block_size)


def inverse_cayley(r: RotationMatrix, *, full_output: bool = False):
    """Map a rotation back to its generator, ``Q = (R - I)(R + I)^{-1}``.

    Raises CayleyDomainError when ``R`` has an eigenvalue at (or numerically
    near) -1. With ``full_output`` also returns the chart margin, the
    smallest singular value of ``R + I``.
    """
    out = np.zeros_like(r.data)
    margin = np.inf
    for sl in block_slices(r.dim, r.block_size):
        out[sl, sl], m = _inverse_cayley_block(np.ascontiguousarray(r.data[sl, sl]))
        margin = min(margin, m)
    q = SkewGenerator(out, r.block_size)
    return (q, float(margin)) if full_output else q


# --------------------------------------------------------------------------
# Procrustes
# --------------------------------------------------------------------------

class ProcrustesResult(NamedTuple):
    rotation: RotationMatrix
    degenerate: bool
    singular_values: np.ndarray


def _procrustes_block(target: np.ndarray, base: np.ndarray):
    m = target @ base.T
    u, s, vt = np.linalg.svd(m)
    d = m.shape[0]
    if not s[0] > 0:
        return np.eye(d), True, s
    degenerate = bool(s[-1] < DEGENERATE_SVD_RATIO * s[0])
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        u[:, -1] = -u[:, -1]
    return u @ vt, degenerate, s


def procrustes(w_target, w_base, *, block_size: int | None = None,
               full_output: bool = False):
    """Rotation ``R`` in SO(d_in) minimizing ``||W_target - R W_base||_F``.

    Solved from the SVD of ``W_target W_base^T``. If the unconstrained
    optimum is a reflection the last left-singular vector is negated so the
    result stays in SO(d_in). With ``block_size`` the problem is solved
    independently for each block of rows, giving a block-diagonal rotation.

    A rank-deficient cross-covariance (smallest singular value below 1e-10
    of the largest) makes the optimum non-unique; the returned rotation is
    still valid and ``degenerate`` is set in the full output. If the
    cross-covariance vanishes entirely the identity is returned.
    """
    target = np.asarray(w_target, dtype=np.float64)
    base = np.asarray(w_base, dtype=np.float64)
    if target.ndim != 2 or target.shape != base.shape:
        raise ShapeMismatchError(
            f"procrustes needs matching 2-D shapes, got {target.shape} and {base.shape}")
    d = base.shape[0]
    out = np.zeros((d, d))
    degenerate = False
    svals = []
    for sl in block_slices(d, block_size):
        rb, deg, s = _procrustes_block(np.ascontiguousarray(target[sl]),
                                       np.ascontiguousarray(base[sl]))
        out[sl, sl] = rb
        degenerate |= deg
        svals.append(s)
    if np.array_equal(target, base):
        out = np.eye(d)
    rot = RotationMatrix(out, block_size)
    if full_output:
        return ProcrustesResult(rot, degenerate, np.concatenate(svals))
    return rot


# --------------------------------------------------------------------------
# Merging in the Lie algebra
# --------------------------------------------------------------------------

def _check_same_layout(items: Sequence, what: str) -> None:
    if not items:
        raise EmptyInputError(f"no {what} to merge")
    first = items[0]
    for i, it in enumerate(items[1:], start=1):
        if it.data.shape != first.data.shape or it.block_size != first.block_size:
            raise ShapeMismatchError(
                f"{what} {i} has shape {it.data.shape}/block {it.block_size}, "
                f"expected {first.data.shape}/block {first.block_size}", task=i)


def _correction(qs: list[np.ndarray]):
    norms = [float(np.linalg.norm(q)) for q in qs]
    total = qs[0].copy()
    for q in qs[1:]:
        total += q
    sum_norm = float(np.linalg.norm(total))
    if sum_norm <= ZERO_SUM_RATIO * max(norms):
        return np.zeros_like(total), ZERO_SUM, norms, sum_norm
    c = sum(norms) / sum_norm
    return c * (total / len(qs)), c, norms, sum_norm


def magnitude_corrected_merge(generators: Sequence[SkewGenerator], *,
                              per_block: bool = True):
    """Average generators and rescale the mean to the mean per-task norm.

    ``Q_merged = c * mean(Q_i)`` with ``c = sum ||Q_i|| / ||sum Q_i||``.
    When the sum cancels (``||sum Q_i|| <= 1e-12 max ||Q_i||``) the merged
    generator is zero and ``c`` is reported as ``ZERO_SUM``.

    For block-diagonal generators a separate ``c`` is used per block unless
    ``per_block`` is False.

    Returns ``(SkewGenerator, MergeDiagnostics)``.
    """
    generators = list(generators)
    _check_same_layout(generators, "generators")
    block_size = generators[0].block_size
    d = generators[0].dim

    merged_whole, c_whole, norms, sum_norm = _correction([g.data for g in generators])
    block_factors = None
    if block_size is not None and per_block:
        merged = np.zeros((d, d))
        block_factors = []
        for sl in block_slices(d, block_size):
            mb, cb, _, _ = _correction(
                [np.ascontiguousarray(g.data[sl, sl]) for g in generators])
            merged[sl, sl] = mb
            block_factors.append(cb)
        block_factors = tuple(block_factors)
    else:
        merged = merged_whole

    total = sum(norms)
    diag = MergeDiagnostics(
        per_task_norms=tuple(norms),
        sum_norm=sum_norm,
        correction_factor=c_whole,
        collapse_ratio=sum_norm / total if total > 0 else 0.0,
        block_correction_factors=block_factors,
    )
    return SkewGenerator(merged, block_size), diag


def mean_generator(generators: Sequence[SkewGenerator]) -> SkewGenerator:
    generators = list(generators)
    _check_same_layout(generators, "generators")
    total = generators[0].data.copy()
    for g in generators[1:]:
        total += g.data
    return SkewGenerator(total / len(generators), generators[0].block_size)


def _inverse_all(rotations: Sequence[RotationMatrix]):
    """Generators and Cayley-chart margins of each rotation."""
    gens, margins = [], []
    for i, r in enumerate(rotations):
        try:
            q, margin = inverse_cayley(r, full_output=True)
        except OrthoMergeError as exc:
            raise exc.with_context(task=i)
        gens.append(q)
        margins.append(margin)
    return gens, tuple(margins)


def _collapse_diag(generators: Sequence[SkewGenerator]) -> MergeDiagnostics:
    _, diag = magnitude_corrected_merge(generators, per_block=False)
    return diag


def merge_oft(rotations: Sequence[RotationMatrix], strategy=OftStrategy.ORTHO_MERGE, *,
              per_block: bool = True, full_output: bool = False):
    """Merge task rotations with one of the four strategies.

    ``SIMPLE_AVG_R`` returns a plain ndarray since the average of rotations
    is generally not orthogonal; every other strategy returns a
    RotationMatrix. ``SEQ_PRODUCT_R`` multiplies in the given order, the
    first rotation acting first. With ``full_output`` a MergeDiagnostics (or
    None for the R-space strategies) is returned alongside.
    """
    strategy = OftStrategy(strategy)
    rotations = list(rotations)
    _check_same_layout(rotations, "rotations")
    diag = None
    if strategy is OftStrategy.SIMPLE_AVG_R:
        total = rotations[0].data.copy()
        for r in rotations[1:]:
            total += r.data
        result = total / len(rotations)
    elif strategy is OftStrategy.SEQ_PRODUCT_R:
        prod = rotations[0].data
        for r in rotations[1:]:
            prod = r.data @ prod
        result = RotationMatrix(prod, rotations[0].block_size)
    else:
        gens, margins = _inverse_all(rotations)
        result, diag = merge_oft_generators(gens, strategy, per_block=per_block,
                                            full_output=True)
        diag = replace(diag, cayley_margins=margins)
    return (result, diag) if full_output else result


def merge_oft_generators(generators: Sequence[SkewGenerator],
                         strategy=OftStrategy.ORTHO_MERGE, *,
                         per_block: bool = True, full_output: bool = False):
    """Like :func:`merge_oft`, starting from generators (e.g. OFT adapters)."""
    strategy = OftStrategy(strategy)
    generators = list(generators)
    _check_same_layout(generators, "generators")
    if strategy is OftStrategy.ORTHO_MERGE:
        q, diag = magnitude_corrected_merge(generators, per_block=per_block)
        result = cayley(q)
    elif strategy is OftStrategy.SIMPLE_AVG_Q:
        diag = _collapse_diag(generators)
        result = cayley(mean_generator(generators))
    else:
        return merge_oft([cayley(g) for g in generators], strategy,
                         per_block=per_block, full_output=full_output)
    return (result, diag) if full_output else result


def random_skew(d: int, rng: np.random.Generator, *, norm: float | None = None,
                block_size: int | None = None, low: float = -0.5,
                high: float = 0.5) -> SkewGenerator:
    """Random generator with upper-triangle entries uniform in ``[low, high)``.

    With ``norm`` the result is rescaled to that exact Frobenius norm.
    """
    a = np.zeros((d, d))
    for sl in block_slices(d, block_size):
        b = sl.stop - sl.start
        iu = np.triu_indices(b, 1)
        blk = np.zeros((b, b))
        blk[iu] = rng.uniform(low, high, size=len(iu[0]))
        a[sl, sl] = blk - blk.T
    if norm is not None:
        n = np.linalg.norm(a)
        if n > 0:
            a *= norm / n
    return SkewGenerator(a, block_size)
