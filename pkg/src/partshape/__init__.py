"""Partial shape-constrained function-on-scalar regression and testing."""

from .longdata import (
    CsvSchema, DataError, Hypothesis, LongitudinalSample, SchemaError, Shape,
    ShapeConstraint, SubjectRecord, from_arrays, load_csv, normalize_domain,
    restrict_to_interval,
)
from .qpcore import ConeProjector, QpSolution, QuadraticProgram, pava, solve

__all__ = [
    "CsvSchema", "DataError", "Hypothesis", "LongitudinalSample", "SchemaError",
    "Shape", "ShapeConstraint", "SubjectRecord", "from_arrays", "load_csv",
    "normalize_domain", "restrict_to_interval", "ConeProjector", "QpSolution",
    "QuadraticProgram", "pava", "solve",
]

__version__ = "0.1.0"
