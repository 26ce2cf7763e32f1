"""
Utility functions and error types for the homogenization toolkit.
"""

from .helpers import (
    file_sha256,
    fingerprint,
    ensure_output_directory,
    is_integer_ratio
)
from .errors import HomogenizationError, format_error

__all__ = [
    "file_sha256",
    "fingerprint",
    "ensure_output_directory",
    "is_integer_ratio",
    "HomogenizationError",
    "format_error"
]
