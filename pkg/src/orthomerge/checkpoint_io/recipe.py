"""Merge recipes: a JSON document validated against :data:`RECIPE_SCHEMA`."""

from __future__ import annotations

import enum
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import jsonschema

from ..decoupling import DecoupleStrategy
from ..errors import RecipeError
from ..euclidean import EuclideanKind, EuclideanMethod
from ..manifold import OftStrategy, Tolerances


class MergeMethod(str, enum.Enum):
    ORTHO_MERGE_OFT = "ortho_merge_oft"
    DECOUPLE = "decouple"
    TA = "ta"
    TIES = "ties"
    DARE = "dare"
    SIMPLE_AVG = "simple_avg"
    ABLATION_SIMPLE_AVG_R = "ablation_simple_avg_r"
    ABLATION_SEQ_PRODUCT_R = "ablation_seq_product_r"
    ABLATION_SIMPLE_AVG_Q = "ablation_simple_avg_q"

    @property
    def oft_strategy(self) -> OftStrategy | None:
        return {
            MergeMethod.ORTHO_MERGE_OFT: OftStrategy.ORTHO_MERGE,
            MergeMethod.ABLATION_SIMPLE_AVG_R: OftStrategy.SIMPLE_AVG_R,
            MergeMethod.ABLATION_SEQ_PRODUCT_R: OftStrategy.SEQ_PRODUCT_R,
            MergeMethod.ABLATION_SIMPLE_AVG_Q: OftStrategy.SIMPLE_AVG_Q,
        }.get(self)

    @property
    def euclidean_kind(self) -> EuclideanKind | None:
        try:
            return EuclideanKind(self.value)
        except ValueError:
            return None


_POS = {"type": "number", "exclusiveMinimum": 0}

RECIPE_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "$id": "https://orthomerge.invalid/recipe.schema.json",
    "title": "MergeRecipe",
    "type": "object",
    "additionalProperties": False,
    "required": ["method", "base", "experts", "output"],
    "properties": {
        "method": {"enum": [m.value for m in MergeMethod]},
        "base": {"type": "string", "minLength": 1},
        "experts": {"type": "array", "minItems": 1,
                    "items": {"type": "string", "minLength": 1}},
        "output": {"type": "string", "minLength": 1},
        "diagnostics": {"type": ["string", "null"]},
        "strategy": {"enum": [s.value for s in DecoupleStrategy]},
        "residual_backend": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "kind": {"enum": [k.value for k in EuclideanKind]},
                "lambda": {"oneOf": [_POS, {"type": "null"}]},
                "ties_keep_fraction": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "dare_drop_prob": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
            },
        },
        "include": {"type": "array", "items": {"type": "string"}},
        "exclude": {"type": "array", "items": {"type": "string"}},
        "block_size": {"oneOf": [{"type": "integer", "minimum": 1}, {"type": "null"}]},
        "per_block_correction": {"type": "boolean"},
        "transpose": {"type": "boolean"},
        "output_dtype": {"enum": ["base", "F16", "BF16", "F32", "F64"]},
        "tolerances": {
            "type": "object",
            "additionalProperties": False,
            "properties": {k: _POS for k in ("ortho", "det", "skew", "roundtrip")},
        },
        "seed": {"type": "integer", "minimum": 0, "maximum": 2**64 - 1},
        "threads": {"type": "integer", "minimum": 1},
    },
}


def validate_recipe_dict(doc) -> None:
    validator = jsonschema.Draft202012Validator(RECIPE_SCHEMA)
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        lines = [f"{'/'.join(map(str, e.absolute_path)) or '<root>'}: {e.message}"
                 for e in errors]
        raise RecipeError("recipe does not match schema:\n  " + "\n  ".join(lines))


@dataclass(frozen=True)
class MergeRecipe:
    method: MergeMethod
    base: str
    experts: tuple[str, ...]
    output: str
    diagnostics: str | None = None
    strategy: DecoupleStrategy = DecoupleStrategy.GLOBAL
    residual_backend: EuclideanMethod = field(default_factory=EuclideanMethod)
    include: tuple[str, ...] = ("*",)
    exclude: tuple[str, ...] = ()
    block_size: int | None = None
    per_block_correction: bool = True
    transpose: bool = False
    output_dtype: str = "base"
    tolerances: Tolerances = field(default_factory=Tolerances)
    seed: int = 0
    threads: int = 1

    @property
    def diagnostics_path(self) -> Path:
        return Path(self.diagnostics) if self.diagnostics else Path(self.output + ".diagnostics.json")

    @classmethod
    def from_dict(cls, doc: dict) -> "MergeRecipe":
        validate_recipe_dict(doc)
        rb = doc.get("residual_backend", {})
        seed = doc.get("seed", 0)
        backend = EuclideanMethod(
            kind=rb.get("kind", "ta"),
            scale=rb.get("lambda"),
            ties_keep_fraction=rb.get("ties_keep_fraction", 0.2),
            dare_drop_prob=rb.get("dare_drop_prob", 0.9),
            seed=seed,
        )
        return cls(
            method=MergeMethod(doc["method"]),
            base=doc["base"],
            experts=tuple(doc["experts"]),
            output=doc["output"],
            diagnostics=doc.get("diagnostics"),
            strategy=DecoupleStrategy(doc.get("strategy", "global")),
            residual_backend=backend,
            include=tuple(doc.get("include", ["*"])),
            exclude=tuple(doc.get("exclude", [])),
            block_size=doc.get("block_size"),
            per_block_correction=doc.get("per_block_correction", True),
            transpose=doc.get("transpose", False),
            output_dtype=doc.get("output_dtype", "base"),
            tolerances=Tolerances(**doc.get("tolerances", {})),
            seed=seed,
            threads=doc.get("threads", 1),
        )

    def to_dict(self) -> dict:
        rb = self.residual_backend
        return {
            "method": self.method.value,
            "base": self.base,
            "experts": list(self.experts),
            "output": self.output,
            "diagnostics": self.diagnostics,
            "strategy": self.strategy.value,
            "residual_backend": {
                "kind": rb.kind.value,
                "lambda": rb.scale,
                "ties_keep_fraction": rb.ties_keep_fraction,
                "dare_drop_prob": rb.dare_drop_prob,
            },
            "include": list(self.include),
            "exclude": list(self.exclude),
            "block_size": self.block_size,
            "per_block_correction": self.per_block_correction,
            "transpose": self.transpose,
            "output_dtype": self.output_dtype,
            "tolerances": asdict(self.tolerances),
            "seed": self.seed,
            "threads": self.threads,
        }


def read_recipe_document(path) -> dict:
    try:
        doc = json.loads(Path(path).read_text("utf-8"))
    except (OSError, ValueError) as exc:
        raise RecipeError(f"cannot read recipe {path}: {exc}")
    if not isinstance(doc, dict):
        raise RecipeError("recipe must be a JSON object")
    return doc


def read_recipe_document_or_empty(path) -> dict:
    return read_recipe_document(path) if path else {}


def load_recipe(path) -> MergeRecipe:
    return MergeRecipe.from_dict(read_recipe_document(path))
