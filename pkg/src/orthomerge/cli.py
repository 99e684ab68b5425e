"""Command-line interface.

Progress goes to stderr; with ``--json`` stdout carries a single JSON
document and nothing else.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import __version__
from .checkpoint_io import MergeRecipe, read_recipe_document_or_empty, validate_recipe_dict
from .decoupling import DecoupleStrategy
from .errors import (
    EXIT_FORMAT,
    EXIT_INTERNAL,
    EXIT_NUMERIC,
    EXIT_OK,
    EXIT_RECIPE,
    EXIT_SHAPE,
    OrthoMergeError,
)
from .synthetic import SyntheticSpec

EPILOG = f"""\
exit codes:
  {EXIT_OK}  success
  {EXIT_INTERNAL}  unexpected internal error
  {EXIT_RECIPE}  invalid recipe or arguments (RECIPE_INVALID)
  {EXIT_FORMAT}  unreadable or unwritable file (MALFORMED_HEADER, OFFSET_OUT_OF_RANGE,
     UNSUPPORTED_DTYPE, missing or inaccessible paths)
  {EXIT_SHAPE}  inconsistent inputs (SHAPE_MISMATCH, BAD_BLOCK_LAYOUT, EMPTY_INPUT)
  {EXIT_NUMERIC}  numerical failure (CAYLEY_DOMAIN, SINGULAR_SOLVE, NOT_ORTHOGONAL, DEGENERATE_DIRECTIONS)
"""

log = logging.getLogger("orthomerge")


def _emit(args, doc, text=None):
    if args.json:
        sys.stdout.write(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    elif text is not None:
        sys.stdout.write(text if text.endswith("\n") else text + "\n")


# --------------------------------------------------------------------------
# merge / decouple-merge / validate-recipe
# --------------------------------------------------------------------------

def _recipe_overrides(args) -> dict:
    out = {}
    for key, attr in [("method", "method"), ("base", "base"), ("output", "output"),
                      ("diagnostics", "diagnostics"), ("strategy", "strategy"),
                      ("block_size", "block_size"), ("output_dtype", "output_dtype"),
                      ("seed", "seed"), ("threads", "threads")]:
        v = getattr(args, attr, None)
        if v is not None:
            out[key] = v
    if args.expert:
        out["experts"] = args.expert
    if args.include:
        out["include"] = args.include
    if args.exclude:
        out["exclude"] = args.exclude
    if args.transpose:
        out["transpose"] = True
    rb = {}
    for key, attr in [("kind", "backend"), ("lambda", "lam"),
                      ("ties_keep_fraction", "ties_keep"), ("dare_drop_prob", "dare_drop")]:
        v = getattr(args, attr, None)
        if v is not None:
            rb[key] = v
    if rb:
        out["residual_backend"] = rb
    return out


def build_recipe(args, force_method: str | None = None) -> MergeRecipe:
    doc = read_recipe_document_or_empty(args.recipe)
    over = _recipe_overrides(args)
    if "residual_backend" in over:
        merged_rb = dict(doc.get("residual_backend", {}))
        merged_rb.update(over.pop("residual_backend"))
        doc["residual_backend"] = merged_rb
    doc.update(over)
    if force_method:
        doc["method"] = force_method
    return MergeRecipe.from_dict(doc)


def cmd_merge(args, force_method=None) -> int:
    from .pipeline import run_merge

    recipe = build_recipe(args, force_method)
    doc = run_merge(recipe, dry_run=args.dry_run)
    if args.dry_run:
        lines = [f"{p['route']:<12} {p['dtype_in']}->{p['dtype_out']:<5} {p['name']} {p['shape']}"
                 for p in doc["plan"]]
        _emit(args, doc, "\n".join(["dry run: nothing written"] + lines))
        return EXIT_OK
    s = doc["summary"]
    text = (f"wrote {recipe.output}\n"
            f"diagnostics {recipe.diagnostics_path}\n"
            f"routes {s['routes']}\n"
            f"max ||R^T R - I||_F {s['max_orthogonality_error']}")
    _emit(args, {"output": recipe.output, "diagnostics": str(recipe.diagnostics_path),
                 "summary": s}, text)
    return EXIT_OK


def cmd_validate(args) -> int:
    doc = read_recipe_document_or_empty(args.recipe_file)
    validate_recipe_dict(doc)
    recipe = MergeRecipe.from_dict(doc)
    _emit(args, {"valid": True, "recipe": recipe.to_dict()}, f"{args.recipe_file}: valid")
    return EXIT_OK


# --------------------------------------------------------------------------
# inspect / stats / landscape / synth
# --------------------------------------------------------------------------

def cmd_inspect(args) -> int:
    from .pipeline import inspect_checkpoint

    rep = inspect_checkpoint(args.checkpoint, args.base, transpose=args.transpose,
                             include=args.include or ["*"], exclude=args.exclude or [])
    lines = [f"{rep['path']} ({rep['kind']}, {len(rep['tensors'])} tensors)"]
    for t in rep["tensors"]:
        extra = []
        for key in ("spectral_norm", "spectral_ratio_to_base", "energy_rel_change",
                    "implied_rotation_orthogonality_error", "orthogonality_error",
                    "block_size"):
            if t.get(key) is not None:
                v = t[key]
                extra.append(f"{key}={v:.6g}" if isinstance(v, float) else f"{key}={v}")
        lines.append(f"  {t['name']} {t['dtype']} {t['shape']} " + " ".join(extra))
    _emit(args, rep, "\n".join(lines))
    return EXIT_OK


def cmd_stats(args) -> int:
    from .pipeline import run_stats

    report = run_stats(args.base, args.expert, args.strategy, include=args.include or ["*"],
                       exclude=args.exclude or [], transpose=args.transpose,
                       block_size=args.block_size)
    if args.output:
        from .pipeline import atomic_write_text
        atomic_write_text(args.output, report.to_csv())
        _emit(args, {"output": args.output, "rows": len(report.rows)},
              f"wrote {len(report.rows)} rows to {args.output}")
    elif args.json:
        _emit(args, {"rows": [r.__dict__ for r in report.rows]})
    else:
        sys.stdout.write(report.to_csv())
    return EXIT_OK


def cmd_landscape(args) -> int:
    from .pipeline import atomic_write_text, run_landscape

    plane, model_losses, base_loss = run_landscape(
        args.base, args.expert, args.model, grid=(args.nx, args.ny, args.extent),
        include=args.include or ["*"], exclude=args.exclude or [], transpose=args.transpose,
        seed=args.seed, probe_rank=args.probe_rank, threads=args.threads)
    atomic_write_text(args.output, plane.grid_csv())
    points = args.points or args.output + ".points.csv"
    atomic_write_text(points, plane.points_csv(losses=model_losses))
    doc = {"grid": args.output, "points": points, "base_loss": base_loss,
           "model_losses": dict(zip(plane.labels, model_losses))}
    _emit(args, doc, f"wrote {args.output} and {points}; base loss {base_loss:.6g}; " +
          ", ".join(f"{k} {v:.6g}" for k, v in doc["model_losses"].items()))
    return EXIT_OK


def cmd_synth(args) -> int:
    from .pipeline import run_synth

    spec = SyntheticSpec(d_in=args.d_in, d_out=args.d_out, num_tasks=args.tasks,
                         rotation_magnitude=args.magnitude, noise_scale=args.noise,
                         alignment=args.alignment, block_size=args.block_size, seed=args.seed)
    paths = run_synth(args.out_dir, spec, layers=args.layers, dtype=args.dtype,
                      adapters=args.adapters)
    _emit(args, paths, f"wrote fixtures to {args.out_dir}")
    return EXIT_OK


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def _add_filters(p):
    p.add_argument("--include", action="append", metavar="GLOB",
                   help="tensor name pattern to merge (repeatable; default '*')")
    p.add_argument("--exclude", action="append", metavar="GLOB",
                   help="tensor name pattern to pass through (repeatable)")
    p.add_argument("--transpose", action="store_true",
                   help="2-D tensors are stored as (d_out, d_in)")


def _add_merge_args(p, with_method=True):
    p.add_argument("--recipe", help="merge recipe JSON; flags override its fields")
    if with_method:
        p.add_argument("--method", choices=[
            "ortho_merge_oft", "decouple", "ta", "ties", "dare", "simple_avg",
            "ablation_simple_avg_r", "ablation_seq_product_r", "ablation_simple_avg_q"])
    p.add_argument("--base")
    p.add_argument("--expert", action="append", metavar="PATH", help="repeatable")
    p.add_argument("--output")
    p.add_argument("--diagnostics", help="sidecar path (default OUTPUT.diagnostics.json)")
    p.add_argument("--strategy", choices=[s.value for s in DecoupleStrategy])
    p.add_argument("--backend", choices=["ta", "ties", "dare", "simple_avg"],
                   help="residual backend for decoupling")
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--ties-keep", type=float)
    p.add_argument("--dare-drop", type=float)
    p.add_argument("--block-size", type=int)
    p.add_argument("--output-dtype", choices=["base", "F16", "BF16", "F32", "F64"])
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int)
    p.add_argument("--dry-run", action="store_true",
                   help="validate and print the tensor plan without writing")
    _add_filters(p)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="orthomerge", description="Merge finetuned checkpoints on the orthogonal group.",
        epilog=EPILOG, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="count", default=0)
    common.add_argument("--json", action="store_true", help="machine-readable stdout")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_, **kw):
        return sub.add_parser(name, help=help_, parents=[common], epilog=EPILOG,
                              formatter_class=argparse.RawDescriptionHelpFormatter, **kw)

    _add_merge_args(add("merge", "run a merge recipe"))
    _add_merge_args(add("decouple-merge", "orthogonal-residual decoupling merge"),
                    with_method=False)

    p = add("validate-recipe", "validate a recipe against the schema")
    p.add_argument("recipe_file")

    p = add("inspect", "tensor manifest and geometry summary")
    p.add_argument("checkpoint")
    p.add_argument("--base", help="compare against this base checkpoint")
    _add_filters(p)

    p = add("stats", "full / orthogonal / residual norm report (CSV)")
    p.add_argument("--base", required=True)
    p.add_argument("--expert", action="append", required=True, metavar="PATH")
    p.add_argument("--strategy", default="global", choices=[s.value for s in DecoupleStrategy])
    p.add_argument("--block-size", type=int)
    p.add_argument("--output", help="CSV path (default stdout)")
    _add_filters(p)

    p = add("landscape", "joint quadratic loss on the plane spanned by merged models")
    p.add_argument("--base", required=True)
    p.add_argument("--expert", action="append", required=True, metavar="PATH",
                   help="defines the per-task losses")
    p.add_argument("--model", action="append", required=True, metavar="PATH",
                   help="merged model; the first two span the plane")
    p.add_argument("--nx", type=int, default=21)
    p.add_argument("--ny", type=int, default=21)
    p.add_argument("--extent", type=float, help="half-width of the square grid (default auto)")
    p.add_argument("--probe-rank", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--output", required=True, help="grid CSV (x, y, loss)")
    p.add_argument("--points", help="projected model CSV (default OUTPUT.points.csv)")
    _add_filters(p)

    p = add("synth", "write planted-rotation fixture checkpoints")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--d-in", type=int, default=16)
    p.add_argument("--d-out", type=int, default=32)
    p.add_argument("--tasks", type=int, default=3)
    p.add_argument("--magnitude", type=float, default=0.3)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--alignment", type=float, default=0.0)
    p.add_argument("--block-size", type=int)
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dtype", default="F32", choices=["F16", "BF16", "F32", "F64"])
    p.add_argument("--adapters", action="store_true", help="also write OFT adapter files")
    return parser


COMMANDS = {
    "merge": cmd_merge,
    "decouple-merge": lambda a: cmd_merge(a, force_method="decouple"),
    "validate-recipe": cmd_validate,
    "inspect": cmd_inspect,
    "stats": cmd_stats,
    "landscape": cmd_landscape,
    "synth": cmd_synth,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, stream=sys.stderr, format="%(levelname)s %(message)s",
                        force=True)
    try:
        return COMMANDS[args.command](args)
    except OrthoMergeError as exc:
        sys.stderr.write(f"error: {exc}\n")
        if exc.hint:
            sys.stderr.write(f"hint: {exc.hint}\n")
        if getattr(args, "json", False):
            _emit(args, {"error": {"code": exc.code, "message": exc.message,
                                   "tensor": exc.tensor, "task": exc.task, "hint": exc.hint}})
        return exc.exit_code
    except OSError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_FORMAT
    except ValueError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
