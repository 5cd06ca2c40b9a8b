"""Error types shared by every module.

Each error carries a short machine-readable ``code``. The CLI maps the two
families to exit codes: input problems exit with 2, numerical failures with 3.
"""
from __future__ import annotations


class EpiError(Exception):
    """Base class; ``code`` is a stable upper-case identifier."""

    exit_code = 3

    def __init__(self, code: str, message: str = "", **details):
        self.code = code
        self.details = details
        super().__init__(f"{code}: {message}" if message else code)


class InputError(EpiError):
    """Invalid configuration, parameters or call arguments."""

    exit_code = 2


class ValidationError(InputError):
    """Raised by ``validate_spec`` with every violated constraint listed.

    ``violations`` is a list of ``(field, code, message)`` tuples.
    """

    def __init__(self, violations):
        self.violations = list(violations)
        first = self.violations[0][1] if self.violations else "VALIDATION"
        text = "; ".join(f"{f}: {c} ({m})" for f, c, m in self.violations)
        super().__init__(first, text)

    @property
    def codes(self) -> list[str]:
        return [c for _, c, _ in self.violations]


class NumericalError(EpiError):
    """A solver or sampler could not produce a trustworthy result."""

    exit_code = 3
