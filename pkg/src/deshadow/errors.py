"""Exception types shared across the package.

The CLI maps these onto its stable exit codes: validation problems exit
with 2, I/O problems (plain ``OSError``) with 3, numeric aborts with 4.
"""

from __future__ import annotations


class ValidationError(ValueError):
    """Raised when an input violates a documented precondition or invariant.

    ``problems`` optionally carries a per-item breakdown (e.g. one entry per
    unpaired dataset file).
    """

    def __init__(self, message: str, problems: list[str] | None = None):
        super().__init__(message)
        self.problems = problems or []


class NumericsError(ArithmeticError):
    """Raised when a computation produces non-finite values and must abort."""
