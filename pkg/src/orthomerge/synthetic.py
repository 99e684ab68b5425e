"""Planted-rotation fixtures and quadratic task losses.

Experts are built as exact rotations of a base matrix (plus optional noise),
so every claim about the merge pipeline can be checked against the known
generators instead of a trained model.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .manifold import RotationMatrix, SkewGenerator, cayley, random_skew


@dataclass(frozen=True)
class SyntheticSpec:
    """Fixture parameters.

    ``alignment`` in [-1, 1] mixes a shared random generator direction into
    every task: 1 gives identical tasks, 0 independent ones. For negative
    values the shared component alternates sign between consecutive tasks,
    which makes neighbouring tasks anti-correlated.
    """

    d_in: int
    d_out: int
    num_tasks: int = 2
    rotation_magnitude: float = 0.3
    noise_scale: float = 0.0
    alignment: float = 0.0
    block_size: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.d_in < 1 or self.d_out < 1 or self.num_tasks < 1:
            raise ValueError("d_in, d_out and num_tasks must be positive")
        if self.rotation_magnitude < 0 or self.noise_scale < 0:
            raise ValueError("rotation_magnitude and noise_scale must be non-negative")
        if not -1 <= self.alignment <= 1:
            raise ValueError("alignment must lie in [-1, 1]")


@dataclass(frozen=True)
class PlantedFixture:
    w_base: np.ndarray
    experts: list[np.ndarray]
    generators: list[SkewGenerator]
    rotations: list[RotationMatrix]


def _rng(spec: SyntheticSpec, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(spec.seed, spawn_key=(stream,)))


def planted_generators(spec: SyntheticSpec, rng: np.random.Generator) -> list[SkewGenerator]:
    d, bs, m = spec.d_in, spec.block_size, spec.rotation_magnitude
    shared = random_skew(d, rng, norm=1.0, block_size=bs).data
    a = spec.alignment
    w_shared, w_own = abs(a), np.sqrt(max(0.0, 1.0 - a * a))
    out = []
    for i in range(spec.num_tasks):
        own = random_skew(d, rng, norm=1.0, block_size=bs).data
        sign = 1.0 if a >= 0 or i % 2 == 0 else -1.0
        raw = sign * w_shared * shared + w_own * own
        n = np.linalg.norm(raw)
        q = raw * (m / n) if n > 0 else raw
        out.append(SkewGenerator(q, bs))
    return out


def gen_planted(spec: SyntheticSpec) -> PlantedFixture:
    rng = _rng(spec, 0)
    w0 = rng.uniform(-1.0, 1.0, size=(spec.d_in, spec.d_out))
    norms = np.linalg.norm(w0, axis=0)
    w0 = w0 / np.where(norms > 0, norms, 1.0)
    generators = planted_generators(spec, rng)
    rotations = [cayley(q) for q in generators]
    experts = []
    for r in rotations:
        w = r.data @ w0
        if spec.noise_scale > 0:
            w = w + spec.noise_scale * rng.standard_normal(w.shape)
        experts.append(w)
    return PlantedFixture(w0, experts, generators, rotations)


class QuadraticTask:
    """``loss(W) = ||(W - W_task) X||_F^2`` for a fixed probe matrix ``X``."""

    def __init__(self, target: np.ndarray, probe: np.ndarray):
        self.target = np.asarray(target, dtype=np.float64)
        self.probe = np.asarray(probe, dtype=np.float64)
        self._gram = self.probe @ self.probe.T

    def _as_matrix(self, w) -> np.ndarray:
        return np.asarray(w, dtype=np.float64).reshape(self.target.shape)

    def loss(self, w) -> float:
        r = (self._as_matrix(w) - self.target) @ self.probe
        return float(np.sum(r * r))

    def grad(self, w) -> np.ndarray:
        return 2.0 * (self._as_matrix(w) - self.target) @ self._gram

    __call__ = loss


class JointQuadraticLoss:
    """Mean of several task losses; accepts flat parameter vectors."""

    def __init__(self, tasks: Sequence[QuadraticTask]):
        self.tasks = list(tasks)

    def loss(self, w) -> float:
        return float(np.mean([t.loss(w) for t in self.tasks]))

    def grad(self, w) -> np.ndarray:
        return np.mean([t.grad(w) for t in self.tasks], axis=0)

    __call__ = loss


def gen_quadratic_tasks(spec: SyntheticSpec, experts: Sequence[np.ndarray] | None = None, *,
                        probe_rank: int | None = None) -> list[QuadraticTask]:
    """One quadratic loss per expert, each with its own Gaussian probe.

    Probes have ``probe_rank`` columns (default ``d_out``), scaled by
    ``1/sqrt(probe_rank)``.
    """
    if experts is None:
        experts = gen_planted(spec).experts
    k = probe_rank or spec.d_out
    rng = _rng(spec, 1)
    return [QuadraticTask(w, rng.standard_normal((spec.d_out, k)) / np.sqrt(k))
            for w in experts]
