"""Exception hierarchy shared by every layer of the package."""

from __future__ import annotations

from typing import Sequence


class FeederMicrogridError(Exception):
    """Base class for all errors raised by this package."""


class ScenarioError(FeederMicrogridError):
    """Invalid or incomplete scenario input.

    ``code`` is a short machine-readable reason and ``key`` names the
    offending config key, series or node.
    """

    def __init__(self, code: str, key: str, message: str):
        self.code = code
        self.key = key
        super().__init__(f"[{code}] {key}: {message}")


class ModelError(FeederMicrogridError):
    """Ill-formed optimization model."""


class InfeasibleModelError(FeederMicrogridError):
    """A scheduling or dispatch model has no feasible point."""

    def __init__(self, message: str, diagnosis: Sequence[str] = ()):
        self.diagnosis = list(diagnosis)
        detail = f" ({'; '.join(self.diagnosis)})" if self.diagnosis else ""
        super().__init__(f"{message}{detail}")


class SolverError(FeederMicrogridError):
    """The solver returned a status the caller cannot act on."""


class ReportError(FeederMicrogridError):
    """Writing run artifacts failed."""
