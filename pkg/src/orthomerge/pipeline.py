"""Checkpoint-level drivers behind the CLI: merge, inspect, stats, landscape, synth.

A merge streams one tensor name at a time (base plus the N expert copies)
and writes results in sorted name order, whatever the thread count.
"""

from __future__ import annotations

import collections
import contextvars
import json
import logging
import os
import tempfile
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .analysis import (
    NormReport,
    hyperspherical_energy,
    landscape_plane,
    spectral_norm,
    tensor_norm_rows,
)
from .checkpoint_io import (
    FLOAT_DTYPES,
    OFT_SUFFIX,
    CheckpointSet,
    MergeMethod,
    MergeRecipe,
    TensorWriter,
    is_adapter,
    matches,
    open_checkpoint,
    store_oft_adapter,
    store_tensor_file,
    unpack_generator,
)
from .decoupling import DecoupleStrategy, hybrid_merge
from .errors import BadBlockLayoutError, OrthoMergeError, RecipeError, ShapeMismatchError
from .euclidean import euclidean_merge
from .manifold import (
    RotationMatrix,
    SkewGenerator,
    cayley,
    merge_oft,
    merge_oft_generators,
    orthogonality_error,
    procrustes,
    use_tolerances,
)
from .synthetic import QuadraticTask, SyntheticSpec, gen_planted

log = logging.getLogger("orthomerge")

PASSTHROUGH = "passthrough"
EUCLIDEAN = "euclidean"
RESIDUAL = "residual"
DECOUPLE = "decouple"
OFT = "oft"


@dataclass(frozen=True)
class TensorPlan:
    name: str
    route: str
    dtype_in: str
    dtype_out: str
    shape: tuple[int, ...]

    def to_dict(self) -> dict:
        return {"name": self.name, "route": self.route, "dtype_in": self.dtype_in,
                "dtype_out": self.dtype_out, "shape": list(self.shape)}


def _manifold_shape(shape) -> bool:
    return len(shape) == 2 and min(shape) >= 2


def plan_merge(recipe: MergeRecipe, cs: CheckpointSet) -> list[TensorPlan]:
    """Assign every base tensor to a route and validate expert coverage."""
    flags = cs.adapter_flags()
    method = recipe.method
    if any(flags) and not all(flags):
        raise RecipeError("experts must be all OFT adapters or all full checkpoints")
    adapters = all(flags)
    if adapters and method.oft_strategy is None:
        raise RecipeError(f"method {method.value} needs full expert checkpoints, got adapters")
    if adapters:
        base_names = set(cs.base.keys())
        for i, e in enumerate(cs.experts):
            for k in e.keys():
                if k.endswith(OFT_SUFFIX) and k[: -len(OFT_SUFFIX)] not in base_names:
                    raise ShapeMismatchError(f"adapter entry {k!r} has no base tensor",
                                             tensor=k, task=i)

    plans = []
    for name in cs.base.keys():
        dt, stored_shape = cs.base.info(name)
        shape = cs.shape(name)
        route = PASSTHROUGH
        if dt in FLOAT_DTYPES and matches(name, recipe.include, recipe.exclude):
            if method.euclidean_kind is not None:
                route = EUCLIDEAN
            elif method is MergeMethod.DECOUPLE:
                route = DECOUPLE if _manifold_shape(shape) else RESIDUAL
            elif adapters:
                has = any(name + OFT_SUFFIX in e for e in cs.experts)
                route = OFT if has and _manifold_shape(shape) else PASSTHROUGH
            else:
                route = OFT if _manifold_shape(shape) else RESIDUAL
        if route != PASSTHROUGH and not adapters:
            cs.check_tensor(name)
        out_dt = dt
        if route != PASSTHROUGH and recipe.output_dtype != "base":
            out_dt = recipe.output_dtype
        plans.append(TensorPlan(name, route, dt, out_dt, tuple(stored_shape)))
    return plans


def _oft_rotations_from_weights(base, experts, block_size):
    rotations, degenerate = [], []
    for i, w in enumerate(experts):
        try:
            res = procrustes(w, base, block_size=block_size, full_output=True)
        except OrthoMergeError as exc:
            raise exc.with_context(task=i)
        rotations.append(res.rotation)
        degenerate.append(res.degenerate)
    return rotations, degenerate


def _adapter_generators(cs: CheckpointSet, name: str, d_in: int, block_size):
    gens = []
    for i, e in enumerate(cs.experts):
        key = name + OFT_SUFFIX
        if key in e:
            try:
                q = unpack_generator(e.get(key), d_in, name=name)
            except OrthoMergeError as exc:
                raise exc.with_context(task=i)
        else:
            q = None
        gens.append(q)
    layout = next(q.block_size for q in gens if q is not None)
    if block_size is not None and block_size != (layout or d_in):
        raise BadBlockLayoutError(
            f"recipe block_size {block_size} does not match adapter block size {layout or d_in}",
            tensor=name)
    return [q if q is not None else SkewGenerator.zeros(d_in, layout) for q in gens]


def merge_tensor(plan: TensorPlan, cs: CheckpointSet, recipe: MergeRecipe):
    """Merge one tensor; returns (array in normalized layout, diagnostics dict)."""
    name = plan.name
    diag: dict = {"route": plan.route}
    if plan.route == PASSTHROUGH:
        return cs.raw_base(name), diag

    n = cs.num_experts
    base = cs.base_f64(name)
    if plan.route in (EUCLIDEAN, RESIDUAL):
        if plan.route == EUCLIDEAN:
            method = replace(recipe.residual_backend, kind=recipe.method.euclidean_kind)
            default_scale = 1.0
        else:
            method = recipe.residual_backend
            default_scale = 1.0 / n
        taus = [cs.expert_f64(i, name) - base for i in range(n)]
        merged = base + euclidean_merge(taus, method, tensor_name=name,
                                        default_scale=default_scale)
        diag["backend"] = method.resolved(default_scale).to_dict()
        return merged, diag

    if plan.route == DECOUPLE:
        experts = [cs.expert_f64(i, name) for i in range(n)]
        merged, md = hybrid_merge(base, experts, recipe.strategy, recipe.residual_backend,
                                  tensor_name=name, block_size=recipe.block_size,
                                  per_block=recipe.per_block_correction)
        diag.update(md.to_dict())
        return merged, diag

    # OFT route
    strategy = recipe.method.oft_strategy
    if all(cs.adapter_flags()):
        gens = _adapter_generators(cs, name, base.shape[0], recipe.block_size)
        result, md = merge_oft_generators(gens, strategy, per_block=recipe.per_block_correction,
                                          full_output=True)
        diag["source"] = "oft_adapter"
    else:
        experts = [cs.expert_f64(i, name) for i in range(n)]
        rotations, degenerate = _oft_rotations_from_weights(base, experts, recipe.block_size)
        del experts
        result, md = merge_oft(rotations, strategy, per_block=recipe.per_block_correction,
                               full_output=True)
        diag["source"] = "procrustes"
        diag["degenerate_svd"] = degenerate
    if md is not None:
        diag.update(md.to_dict())
    r = result.data if isinstance(result, RotationMatrix) else result
    diag["orthogonality_error"] = orthogonality_error(r)
    return r @ base, diag


def _bounded_map(fn, items, threads: int):
    """Ordered map keeping at most ``threads`` tasks in flight."""
    if threads <= 1:
        for it in items:
            yield fn(it)
        return
    with ThreadPoolExecutor(threads) as pool:
        pending = collections.deque()
        for it in items:
            ctx = contextvars.copy_context()
            pending.append(pool.submit(ctx.run, fn, it))
            if len(pending) >= threads:
                yield pending.popleft().result()
        while pending:
            yield pending.popleft().result()


def _json_safe(x):
    if isinstance(x, dict):
        return {k: _json_safe(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_json_safe(v) for v in x]
    if isinstance(x, (bool, np.bool_)):
        return bool(x)
    if isinstance(x, (float, np.floating)):
        return float(x) if np.isfinite(x) else str(float(x))
    if isinstance(x, np.integer):
        return int(x)
    return x


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _summary(plans, tensors: dict) -> dict:
    routes = collections.Counter(p.route for p in plans)
    ortho = [d["orthogonality_error"] for d in tensors.values() if "orthogonality_error" in d]
    margins = [m for d in tensors.values() for m in d.get("cayley_margins", [])]
    return {
        "routes": dict(sorted(routes.items())),
        "max_orthogonality_error": max(ortho) if ortho else None,
        "min_cayley_margin": min(margins) if margins else None,
        "zero_sum_tensors": sorted(k for k, d in tensors.items()
                                   if d.get("correction_factor") == "ZERO_SUM"),
        "degenerate_svd_tensors": sorted(k for k, d in tensors.items()
                                         if any(d.get("degenerate_svd", []))),
    }


def run_merge(recipe: MergeRecipe, *, dry_run: bool = False, tracker=None) -> dict:
    """Execute a recipe. Returns the diagnostics document (or the plan for a dry run)."""
    with use_tolerances(recipe.tolerances):
        cs = CheckpointSet.open(recipe.base, recipe.experts, recipe.transpose)
        if tracker is not None:
            cs.tracker = tracker
        plans = plan_merge(recipe, cs)
        if dry_run:
            return {"dry_run": True, "recipe": recipe.to_dict(), "manifest": cs.manifest(),
                    "plan": [p.to_dict() for p in plans]}

        metadata = dict(cs.base.metadata)
        metadata.update({"orthomerge_method": recipe.method.value,
                         "orthomerge_version": __version__})
        entries = [(p.name, p.dtype_out, p.shape) for p in plans]
        tensors = {}

        def work(plan):
            try:
                merged, diag = merge_tensor(plan, cs, recipe)
            except OrthoMergeError as exc:
                raise exc.with_context(tensor=plan.name)
            return plan, cs.denormalize(merged), diag

        with TensorWriter(recipe.output, entries, metadata) as writer:
            for k, (plan, arr, diag) in enumerate(_bounded_map(work, plans, recipe.threads)):
                log.info("[%d/%d] %s (%s)", k + 1, len(plans), plan.name, plan.route)
                writer.write(plan.name, arr)
                tensors[plan.name] = diag
                del arr

        doc = {
            "format": "orthomerge-diagnostics",
            "version": 1,
            "recipe": recipe.to_dict(),
            "num_experts": cs.num_experts,
            "tensors": tensors,
            "summary": _summary(plans, tensors),
        }
        doc = _json_safe(doc)
        atomic_write_text(recipe.diagnostics_path,
                          json.dumps(doc, indent=2, sort_keys=True) + "\n")
        return doc


# --------------------------------------------------------------------------
# inspect
# --------------------------------------------------------------------------

def implied_rotation(w, w_base) -> np.ndarray | None:
    """Least-squares ``R`` with ``R W_0 = W``; None unless W_0 has full row rank."""
    w_base = np.asarray(w_base, dtype=np.float64)
    if w_base.shape[0] > w_base.shape[1] or np.linalg.matrix_rank(w_base) < w_base.shape[0]:
        return None
    rt, *_ = np.linalg.lstsq(w_base.T, np.asarray(w, dtype=np.float64).T, rcond=None)
    return rt.T


def inspect_checkpoint(path, base=None, *, transpose: bool = False,
                       include: Sequence[str] = ("*",),
                       exclude: Sequence[str] = ()) -> dict:
    ckpt = open_checkpoint(path)
    base_ckpt = open_checkpoint(base) if base else None
    norm = (lambda a: np.ascontiguousarray(a.T)) if transpose else (lambda a: a)
    adapter = is_adapter(ckpt)
    report = {"path": str(path), "kind": "oft_adapter" if adapter else "full",
              "metadata": dict(ckpt.metadata), "tensors": []}
    for name in ckpt.keys():
        dt, shape = ckpt.info(name)
        entry = {"name": name, "dtype": dt, "shape": list(shape)}
        report["tensors"].append(entry)
        if dt not in FLOAT_DTYPES or not matches(name, include, exclude):
            continue
        if adapter and name.endswith(OFT_SUFFIX):
            bname = name[: -len(OFT_SUFFIX)]
            d_in = None
            if base_ckpt is not None and bname in base_ckpt:
                bshape = base_ckpt.info(bname)[1]
                d_in = (bshape[::-1] if transpose else bshape)[0]
            if d_in is None:
                n_blocks, length = shape
                b = (1 + int(np.sqrt(1 + 8 * length))) // 2
                d_in = n_blocks * b
            q = unpack_generator(ckpt.get(name), d_in, name=bname)
            entry.update({"block_size": q.block_size, "generator_norm": q.norm,
                          "orthogonality_error": orthogonality_error(cayley(q))})
            continue
        if len(shape) != 2:
            continue
        w = norm(ckpt.get(name).astype(np.float64))
        entry["frobenius_norm"] = float(np.linalg.norm(w))
        sn = spectral_norm(w, full_output=True)
        entry["spectral_norm"] = sn.value
        entry["spectral_converged"] = sn.converged
        if base_ckpt is not None and name in base_ckpt:
            w0 = norm(base_ckpt.get(name).astype(np.float64))
            if w0.shape != w.shape:
                continue
            s0 = spectral_norm(w0)
            entry["spectral_ratio_to_base"] = sn.value / s0 if s0 > 0 else None
            he, he0 = hyperspherical_energy(w), hyperspherical_energy(w0)
            entry["energy_rel_change"] = (abs(he - he0) / he0
                                          if np.isfinite(he) and np.isfinite(he0) and he0 > 0
                                          else None)
            r = implied_rotation(w, w0)
            entry["implied_rotation_orthogonality_error"] = (
                orthogonality_error(r) if r is not None else None)
    return _json_safe(report)


# --------------------------------------------------------------------------
# stats
# --------------------------------------------------------------------------

def run_stats(base, experts: Sequence, strategy=DecoupleStrategy.GLOBAL, *,
              include=("*",), exclude=(), transpose: bool = False,
              block_size: int | None = None) -> NormReport:
    cs = CheckpointSet.open(base, experts, transpose)
    if any(cs.adapter_flags()):
        raise RecipeError("stats needs full expert checkpoints")
    labels = [Path(p).stem for p in experts]
    rows = []
    for name in cs.base.keys():
        if not (cs.is_float(name) and matches(name, include, exclude)
                and _manifold_shape(cs.shape(name))):
            continue
        cs.check_tensor(name)
        try:
            rows += tensor_norm_rows(name, cs.base_f64(name),
                                     [cs.expert_f64(i, name) for i in range(cs.num_experts)],
                                     strategy, labels, block_size)
        except OrthoMergeError as exc:
            raise exc.with_context(tensor=name)
    return NormReport(rows).sorted()


# --------------------------------------------------------------------------
# landscape
# --------------------------------------------------------------------------

class CheckpointQuadraticLoss:
    """Joint quadratic loss over the eligible tensors of a checkpoint set.

    Each (tensor, expert) pair gets a Gaussian probe seeded from
    ``(seed, crc32(tensor), expert index)``; the loss is the mean over
    experts of the summed per-tensor losses, on the flattened parameters.
    """

    def __init__(self, names, shapes, experts: Sequence[Sequence[np.ndarray]], *,
                 seed: int = 0, probe_rank: int | None = None):
        self.names = list(names)
        self.shapes = [tuple(s) for s in shapes]
        self.sizes = [int(np.prod(s)) for s in self.shapes]
        self.tasks = []
        for i, ws in enumerate(experts):
            per = []
            for name, shape, w in zip(self.names, self.shapes, ws):
                k = probe_rank or shape[1]
                rng = np.random.default_rng(np.random.SeedSequence(
                    seed, spawn_key=(zlib.crc32(name.encode()), i)))
                per.append(QuadraticTask(w, rng.standard_normal((shape[1], k)) / np.sqrt(k)))
            self.tasks.append(per)

    def split(self, flat):
        out, off = [], 0
        for shape, size in zip(self.shapes, self.sizes):
            out.append(flat[off:off + size].reshape(shape))
            off += size
        return out

    def __call__(self, flat) -> float:
        parts = self.split(np.asarray(flat, dtype=np.float64))
        return float(np.mean([sum(t.loss(p) for t, p in zip(per, parts))
                              for per in self.tasks]))


def _flatten(ckpt, names, transpose):
    arrs = []
    for n in names:
        a = ckpt.get(n).astype(np.float64)
        arrs.append(a.T if transpose and a.ndim == 2 else a)
    return arrs


def run_landscape(base, experts: Sequence, models: Sequence, *, grid=(21, 21, None),
                  include=("*",), exclude=(), transpose: bool = False, seed: int = 0,
                  probe_rank: int | None = None, threads: int = 1):
    base_ckpt = open_checkpoint(base)
    names = [n for n in base_ckpt.keys()
             if base_ckpt.info(n)[0] in FLOAT_DTYPES and matches(n, include, exclude)
             and _manifold_shape(base_ckpt.info(n)[1])]
    if not names:
        raise RecipeError("no eligible 2-D tensors for the landscape")
    base_arrs = _flatten(base_ckpt, names, transpose)
    shapes = [a.shape for a in base_arrs]
    expert_arrs = [_flatten(open_checkpoint(p), names, transpose) for p in experts]
    loss = CheckpointQuadraticLoss(names, shapes, expert_arrs, seed=seed, probe_rank=probe_rank)
    origin = np.concatenate([a.ravel() for a in base_arrs])
    model_vecs = []
    for p in models:
        arrs = _flatten(open_checkpoint(p), names, transpose)
        if [a.shape for a in arrs] != shapes:
            raise ShapeMismatchError(f"model {p} does not match the base tensor shapes")
        model_vecs.append(np.concatenate([a.ravel() for a in arrs]))
    plane = landscape_plane(origin, model_vecs, loss, grid,
                            labels=[Path(p).stem for p in models], threads=threads)
    model_losses = [loss(v) for v in model_vecs]
    return plane, model_losses, loss(origin)


# --------------------------------------------------------------------------
# synth
# --------------------------------------------------------------------------

def layer_name(k: int) -> str:
    return f"model.layers.{k}.mlp.up_proj"


def run_synth(out_dir, spec: SyntheticSpec, *, layers: int = 2, dtype: str = "F32",
              adapters: bool = False) -> dict:
    """Write base/expert checkpoints built from planted rotations.

    Each layer has a ``.weight`` of shape (d_in, d_out) from an independent
    fixture, a ``.bias`` of length d_out (experts add ``noise_scale``
    Gaussian noise) and an integer ``position_ids`` tensor that every
    merge passes through untouched.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    n = spec.num_tasks
    base = {"position_ids": np.arange(spec.d_out, dtype=np.int64)}
    experts = [dict(base) for _ in range(n)]
    gens: list[dict] = [{} for _ in range(n)]
    truth = {}
    for k in range(layers):
        fx = gen_planted(replace(spec, seed=int(np.random.SeedSequence(
            spec.seed, spawn_key=(k,)).generate_state(1)[0])))
        name = layer_name(k)
        rng = np.random.default_rng(np.random.SeedSequence(spec.seed, spawn_key=(k, 1)))
        bias = rng.uniform(-0.1, 0.1, size=spec.d_out)
        base[name + ".weight"] = fx.w_base
        base[name + ".bias"] = bias
        for i in range(n):
            experts[i][name + ".weight"] = fx.experts[i]
            experts[i][name + ".bias"] = bias + spec.noise_scale * rng.standard_normal(spec.d_out)
            gens[i][name + ".weight"] = fx.generators[i]
            truth[f"{name}.task{i}.q_star"] = fx.generators[i].data
    floats = {k for k, v in base.items() if v.dtype.kind == "f"}
    dts = {k: dtype for k in floats}
    paths = {"base": str(out_dir / "base.safetensors"), "experts": [], "adapters": []}
    store_tensor_file(paths["base"], base, dtypes=dts)
    for i in range(n):
        p = out_dir / f"expert_{i}.safetensors"
        store_tensor_file(p, experts[i], dtypes=dts)
        paths["experts"].append(str(p))
        if adapters:
            a = out_dir / f"expert_{i}.oft.safetensors"
            store_oft_adapter(a, gens[i], dtype="F64")
            paths["adapters"].append(str(a))
    paths["ground_truth"] = str(out_dir / "ground_truth.safetensors")
    store_tensor_file(paths["ground_truth"], truth)
    spec_doc = {k: getattr(spec, k) for k in spec.__dataclass_fields__}
    atomic_write_text(out_dir / "fixture.json",
                      json.dumps({"spec": spec_doc, "layers": layers, "dtype": dtype,
                                  "files": paths}, indent=2, sort_keys=True) + "\n")
    return paths
