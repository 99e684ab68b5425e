"""Model merging on the orthogonal group.

Merges finetuned weight matrices by mapping their rotations into the Lie
algebra so(d) through the Cayley transform, averaging with a magnitude
correction, and mapping back; non-OFT experts are split into a rotation
and an additive residual first.
"""

__version__ = "0.1.0"

from .decoupling import (
    DecoupleStrategy,
    TaskVector,
    build_targets,
    decompose,
    extract_rotation_and_residual,
    hybrid_merge,
)
from .errors import OrthoMergeError
from .euclidean import EuclideanKind, EuclideanMethod, euclidean_merge
from .manifold import (
    ZERO_SUM,
    MergeDiagnostics,
    OftStrategy,
    RotationMatrix,
    SkewGenerator,
    Tolerances,
    cayley,
    inverse_cayley,
    magnitude_corrected_merge,
    merge_oft,
    merge_oft_generators,
    procrustes,
)

__all__ = [
    "DecoupleStrategy",
    "TaskVector",
    "build_targets",
    "decompose",
    "extract_rotation_and_residual",
    "hybrid_merge",
    "ZERO_SUM",
    "MergeDiagnostics",
    "OftStrategy",
    "RotationMatrix",
    "SkewGenerator",
    "Tolerances",
    "cayley",
    "inverse_cayley",
    "magnitude_corrected_merge",
    "merge_oft",
    "merge_oft_generators",
    "procrustes",
    "OrthoMergeError",
    "EuclideanKind",
    "EuclideanMethod",
    "euclidean_merge",
]
