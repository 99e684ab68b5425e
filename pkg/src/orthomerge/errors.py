"""Exception hierarchy.

Every error carries a machine-readable ``code``; the CLI maps each code's
``family`` to a distinct exit status.
"""

from __future__ import annotations

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_RECIPE = 2
EXIT_FORMAT = 3
EXIT_SHAPE = 4
EXIT_NUMERIC = 5


class OrthoMergeError(Exception):
    code = "ERROR"
    exit_code = EXIT_INTERNAL
    hint = ""

    def __init__(self, message: str = "", *, tensor: str | None = None,
                 task: int | None = None, hint: str | None = None):
        super().__init__(message)
        self.message = message
        self.tensor = tensor
        self.task = task
        if hint is not None:
            self.hint = hint

    def with_context(self, *, tensor=None, task=None):
        if tensor is not None and self.tensor is None:
            self.tensor = tensor
        if task is not None and self.task is None:
            self.task = task
        return self

    def __str__(self):
        parts = [f"{self.code}: {self.message}"]
        if self.tensor is not None:
            parts.append(f"tensor={self.tensor}")
        if self.task is not None:
            parts.append(f"task={self.task}")
        return " ".join(parts)


class RecipeError(OrthoMergeError):
    code = "RECIPE_INVALID"
    exit_code = EXIT_RECIPE
    hint = "check the recipe against docs/recipe.schema.json"


class MalformedHeaderError(OrthoMergeError):
    code = "MALFORMED_HEADER"
    exit_code = EXIT_FORMAT
    hint = "the file is not a valid tensor container; re-export it"


class OffsetOutOfRangeError(OrthoMergeError):
    code = "OFFSET_OUT_OF_RANGE"
    exit_code = EXIT_FORMAT
    hint = "the file looks truncated or its offsets overlap"


class UnsupportedDtypeError(OrthoMergeError):
    code = "UNSUPPORTED_DTYPE"
    exit_code = EXIT_FORMAT
    hint = "supported dtypes: F16, BF16, F32, F64 and plain integer/bool types"


class ShapeMismatchError(OrthoMergeError):
    code = "SHAPE_MISMATCH"
    exit_code = EXIT_SHAPE
    hint = "all experts must share the base checkpoint's tensor names and shapes"


class BadBlockLayoutError(OrthoMergeError):
    code = "BAD_BLOCK_LAYOUT"
    exit_code = EXIT_SHAPE
    hint = "block count x block size must equal the tensor's input dimension"


class EmptyInputError(OrthoMergeError):
    code = "EMPTY_INPUT"
    exit_code = EXIT_SHAPE
    hint = "provide at least one expert"


class NotOrthogonalError(OrthoMergeError):
    code = "NOT_ORTHOGONAL"
    exit_code = EXIT_NUMERIC
    hint = "input is not a rotation within ORTHO_TOL/DET_TOL"


class CayleyDomainError(OrthoMergeError):
    code = "CAYLEY_DOMAIN"
    exit_code = EXIT_NUMERIC
    hint = ("the rotation has an eigenvalue near -1 and lies outside the "
            "Cayley chart; exclude this tensor or use a decoupling strategy")


class SingularSolveError(OrthoMergeError):
    code = "SINGULAR_SOLVE"
    exit_code = EXIT_NUMERIC
    hint = "I - Q is singular; the generator is corrupted (NaN/Inf or not skew)"


class DegenerateDirectionsError(OrthoMergeError):
    code = "DEGENERATE_DIRECTIONS"
    exit_code = EXIT_NUMERIC
    hint = "the supplied models do not span a plane around the base"
