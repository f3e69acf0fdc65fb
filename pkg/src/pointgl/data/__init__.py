from .corruption import (
    KINDS,
    SCHEDULE,
    SEVERITIES,
    CorruptionSpec,
    chamfer_distance,
    corrupt,
    mce,
)
from .io import (
    XYZParseError,
    load_dataset,
    load_xyz,
    read_error_table,
    save_dataset,
    save_xyz,
    write_error_table,
)
from .synthetic import FAMILIES, Dataset, SyntheticSpec, generate_dataset, make_cloud, sample_surface

__all__ = [
    "FAMILIES", "KINDS", "SCHEDULE", "SEVERITIES", "CorruptionSpec", "Dataset",
    "SyntheticSpec", "XYZParseError", "chamfer_distance", "corrupt",
    "generate_dataset", "load_dataset", "load_xyz", "make_cloud", "mce",
    "read_error_table", "sample_surface", "save_dataset", "save_xyz",
    "write_error_table",
]
