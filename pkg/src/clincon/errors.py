"""Exception hierarchy shared by every clincon module."""

from __future__ import annotations


class ClinconError(Exception):
    """Base class for all clincon failures."""


class DataError(ClinconError, ValueError):
    """Bad input data: malformed manifests, invalid configs, empty pools."""


class NumericError(ClinconError, ArithmeticError):
    """Numerical failure during training or evaluation (NaN loss, zero norm)."""
