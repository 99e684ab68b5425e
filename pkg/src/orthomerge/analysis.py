"""Geometry diagnostics: hyperspherical energy, spectral norm, component
norms of decoupled experts, and 2-D loss-landscape planes.

CSV outputs write floats with 17 significant digits.
"""

from __future__ import annotations

import csv
import io
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Mapping, NamedTuple, Sequence

import numpy as np
from scipy.spatial.distance import pdist

from .decoupling import DecoupleStrategy, decompose
from .errors import DegenerateDirectionsError, ShapeMismatchError

DUPLICATE_TOL = 1e-12


def fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(int(x))
    return format(float(x), ".17g")


# --------------------------------------------------------------------------
# Hyperspherical energy / spectral norm
# --------------------------------------------------------------------------

class EnergyResult(NamedTuple):
    energy: float
    zero_columns: int
    duplicate_pairs: int


def hyperspherical_energy(w, s: float = 2.0, *, full_output: bool = False):
    """Riesz s-energy of the unit-normalized columns of ``w``.

    ``sum_{i != j} ||w_i/|w_i| - w_j/|w_j|||^{-s}`` over ordered pairs of
    columns. Zero columns are dropped (and counted). If two normalized
    columns coincide within 1e-12 the energy is ``inf``.
    """
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2:
        raise ShapeMismatchError(f"energy needs a 2-D matrix, got shape {w.shape}")
    norms = np.linalg.norm(w, axis=0)
    keep = norms > 0
    unit = (w[:, keep] / norms[keep]).T
    zero_cols = int(np.count_nonzero(~keep))
    if unit.shape[0] < 2:
        res = EnergyResult(0.0, zero_cols, 0)
    else:
        dist = pdist(unit)
        dup = int(np.count_nonzero(dist <= DUPLICATE_TOL))
        energy = np.inf if dup else 2.0 * float(np.sum(dist ** (-s)))
        res = EnergyResult(energy, zero_cols, dup)
    return res if full_output else res.energy


class SpectralResult(NamedTuple):
    value: float
    iterations: int
    converged: bool


def spectral_norm(w, *, rtol: float = 1e-9, max_iter: int = 10_000, seed: int = 0,
                  full_output: bool = False):
    """Largest singular value by power iteration on ``W^T W``.

    Stops when the relative change of the estimate drops below ``rtol``.
    If ``max_iter`` is reached the best estimate is returned with
    ``converged=False`` (NO_CONVERGENCE).
    """
    w = np.asarray(w, dtype=np.float64)
    if w.ndim == 1:
        w = w[:, None]
    v = np.random.default_rng(seed).standard_normal(w.shape[1])
    v /= np.linalg.norm(v)
    est = 0.0
    for it in range(1, max_iter + 1):
        u = w.T @ (w @ v)
        lam = float(np.linalg.norm(u))
        if lam == 0.0:
            return SpectralResult(0.0, it, True) if full_output else 0.0
        v = u / lam
        new = np.sqrt(lam)
        if abs(new - est) <= rtol * new:
            res = SpectralResult(float(new), it, True)
            return res if full_output else res.value
        est = new
    res = SpectralResult(float(est), max_iter, False)
    return res if full_output else res.value


# --------------------------------------------------------------------------
# Component norms of decoupled experts
# --------------------------------------------------------------------------

_LAYER_RE = re.compile(r"(?:^|\.)(\d+)(?:\.|$)")


def parse_tensor_name(name: str) -> tuple[int | None, str]:
    """(layer index, module tag) from names like ``model.layers.3.mlp.up_proj.weight``."""
    m = _LAYER_RE.search(name)
    layer = int(m.group(1)) if m else None
    parts = name.split(".")
    if len(parts) > 1 and parts[-1] in ("weight", "bias"):
        parts = parts[:-1]
    return layer, parts[-1]


@dataclass(frozen=True)
class NormRow:
    checkpoint: str
    tensor: str
    layer: int | None
    module_tag: str
    full_norm: float
    ortho_norm: float
    residual_norm: float
    task: int = 0


CSV_HEADER = ("checkpoint", "tensor", "layer", "module_tag",
              "full_norm", "ortho_norm", "residual_norm")


@dataclass
class NormReport:
    rows: list[NormRow]

    def sorted(self) -> "NormReport":
        return NormReport(sorted(self.rows, key=lambda r: (r.tensor, r.task)))

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for r in self.sorted().rows:
            writer.writerow([r.checkpoint, r.tensor, fmt(r.layer), r.module_tag,
                             fmt(r.full_norm), fmt(r.ortho_norm), fmt(r.residual_norm)])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", encoding="utf-8", newline="") as fh:
                fh.write(text)
        return text


def tensor_norm_rows(name: str, w_base, experts: Sequence, strategy=DecoupleStrategy.GLOBAL,
                     labels: Sequence[str] | None = None,
                     block_size: int | None = None) -> list[NormRow]:
    base = np.asarray(w_base, dtype=np.float64)
    rotations, tvs = decompose(base, experts, strategy, block_size=block_size)
    layer, tag = parse_tensor_name(name)
    rows = []
    for i, (r, tv) in enumerate(zip(rotations, tvs)):
        rows.append(NormRow(
            checkpoint=labels[i] if labels else f"expert_{i}",
            tensor=name, layer=layer, module_tag=tag,
            full_norm=float(np.linalg.norm(tv.delta)),
            ortho_norm=float(np.linalg.norm(r.data @ base - base)),
            residual_norm=float(np.linalg.norm(tv.residual)),
            task=i,
        ))
    return rows


def norm_report(w_base, experts, strategy=DecoupleStrategy.GLOBAL, *,
                labels: Sequence[str] | None = None) -> NormReport:
    """Full / orthogonal / residual norms per (tensor, task).

    ``w_base`` is a tensor map (``experts`` then a list of maps) or a single
    matrix (``experts`` a list of matrices). Only 2-D tensors with both
    dimensions >= 2 are reported.
    """
    if not isinstance(w_base, Mapping):
        w_base = {"weight": w_base}
        experts = [{"weight": e} for e in experts]
    rows = []
    for name in sorted(w_base):
        base = np.asarray(w_base[name])
        if base.ndim != 2 or min(base.shape) < 2:
            continue
        rows += tensor_norm_rows(name, base, [e[name] for e in experts], strategy, labels)
    return NormReport(rows).sorted()


# --------------------------------------------------------------------------
# Loss-landscape plane
# --------------------------------------------------------------------------

@dataclass
class LandscapePlane:
    origin: np.ndarray
    basis: np.ndarray
    points: np.ndarray
    off_plane: np.ndarray
    xs: np.ndarray
    ys: np.ndarray
    losses: np.ndarray
    labels: list[str]

    def grid_csv(self, path=None) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(("x", "y", "loss"))
        for j, y in enumerate(self.ys):
            for i, x in enumerate(self.xs):
                writer.writerow((fmt(x), fmt(y), fmt(self.losses[j, i])))
        return _maybe_write(buf.getvalue(), path)

    def points_csv(self, path=None, losses: Sequence[float] | None = None) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(("model", "x", "y", "off_plane", "loss"))
        for k, (label, (x, y), off) in enumerate(zip(self.labels, self.points, self.off_plane)):
            writer.writerow((label, fmt(x), fmt(y), fmt(off),
                             fmt(losses[k]) if losses is not None else ""))
        return _maybe_write(buf.getvalue(), path)


def _maybe_write(text: str, path) -> str:
    if path is not None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    return text


def plane_basis(d1: np.ndarray, d2: np.ndarray) -> np.ndarray:
    """Orthonormal basis of span(d1, d2) by (twice-applied) Gram-Schmidt."""
    n1 = np.linalg.norm(d1)
    n2 = np.linalg.norm(d2)
    if n1 == 0 or n2 == 0:
        raise DegenerateDirectionsError("a model coincides with the base")
    e1 = d1 / n1
    r = d2 - (e1 @ d2) * e1
    if np.linalg.norm(r) < 1e-10 * n2:
        raise DegenerateDirectionsError("the two model directions are parallel")
    r = r - (e1 @ r) * e1
    return np.stack([e1, r / np.linalg.norm(r)])


def landscape_plane(base, models: Sequence, loss_eval: Callable[[np.ndarray], float],
                    grid=(21, 21, None), *, labels: Sequence[str] | None = None,
                    margin: float = 0.25, threads: int = 1) -> LandscapePlane:
    """Evaluate ``loss_eval`` on a grid in the plane through ``base`` that
    contains the first two model directions.

    ``grid`` is ``(nx, ny, extent)``; ``extent`` is a scalar ``e`` for the
    square ``[-e, e]^2``, a 4-tuple ``(xmin, xmax, ymin, ymax)``, or None to
    cover the origin and every projected model with a relative ``margin``.
    """
    origin = np.ravel(np.asarray(base, dtype=np.float64))
    flat = [np.ravel(np.asarray(m, dtype=np.float64)) for m in models]
    if len(flat) < 2:
        raise DegenerateDirectionsError("need at least two models to span a plane")
    for i, m in enumerate(flat):
        if m.shape != origin.shape:
            raise ShapeMismatchError(f"model {i} has {m.size} parameters, base has {origin.size}",
                                     task=i)
    basis = plane_basis(flat[0] - origin, flat[1] - origin)
    dirs = np.stack([m - origin for m in flat])
    points = dirs @ basis.T
    off = np.linalg.norm(dirs - points @ basis, axis=1)

    nx, ny, extent = grid
    if extent is None:
        pts = np.vstack([points, [[0.0, 0.0]]])
        lo, hi = pts.min(axis=0), pts.max(axis=0)
        pad = margin * np.maximum(hi - lo, 1e-12)
        extent = (lo[0] - pad[0], hi[0] + pad[0], lo[1] - pad[1], hi[1] + pad[1])
    elif np.isscalar(extent):
        extent = (-extent, extent, -extent, extent)
    xs = np.linspace(extent[0], extent[1], nx)
    ys = np.linspace(extent[2], extent[3], ny)

    coords = [(x, y) for y in ys for x in xs]

    def evaluate(xy):
        return float(loss_eval(origin + xy[0] * basis[0] + xy[1] * basis[1]))

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            vals = list(pool.map(evaluate, coords))
    else:
        vals = [evaluate(c) for c in coords]
    losses = np.array(vals).reshape(ny, nx)
    return LandscapePlane(origin, basis, points, off, xs, ys, losses,
                          list(labels) if labels else [f"model_{i}" for i in range(len(flat))])
