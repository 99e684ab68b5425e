from .checkpoint import (
    OFT_SUFFIX,
    CheckpointSet,
    MemoryTracker,
    ShardedCheckpoint,
    is_adapter,
    load_oft_adapter,
    matches,
    open_checkpoint,
    pack_generator,
    store_oft_adapter,
    unpack_generator,
)
from .recipe import (
    RECIPE_SCHEMA,
    MergeMethod,
    MergeRecipe,
    load_recipe,
    read_recipe_document,
    read_recipe_document_or_empty,
    validate_recipe_dict,
)
from .tensorfile import (
    DTYPES,
    FLOAT_DTYPES,
    TensorFile,
    TensorWriter,
    dtype_name,
    load_tensor_file,
    store_tensor_file,
)

__all__ = [
    "OFT_SUFFIX",
    "CheckpointSet",
    "MemoryTracker",
    "ShardedCheckpoint",
    "is_adapter",
    "load_oft_adapter",
    "matches",
    "open_checkpoint",
    "pack_generator",
    "store_oft_adapter",
    "unpack_generator",
    "RECIPE_SCHEMA",
    "MergeMethod",
    "MergeRecipe",
    "load_recipe",
    "read_recipe_document",
    "read_recipe_document_or_empty",
    "validate_recipe_dict",
    "DTYPES",
    "FLOAT_DTYPES",
    "TensorFile",
    "TensorWriter",
    "dtype_name",
    "load_tensor_file",
    "store_tensor_file",
]
