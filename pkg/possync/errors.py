"""Exception hierarchy shared by the library and the CLI."""

from typing import List, Optional, Tuple


class PossyncError(Exception):
    """Base class for every error raised on purpose by this package."""


class NumericalFailure(PossyncError):
    """A factorization or solve failed; `condition` holds an estimate when one is available."""

    def __init__(self, message: str, condition: Optional[float] = None):
        super().__init__(message)
        self.condition = condition


class SingularGeometry(PossyncError, ValueError):
    """Azimuth or elevation undefined because the UN sits (almost) on the AN."""


class ConfigError(PossyncError, ValueError):
    """Invalid configuration. `problems` lists (dotted.path, message) pairs."""

    def __init__(self, message: str, problems: Optional[List[Tuple[str, str]]] = None):
        super().__init__(message)
        self.problems = list(problems or [])

    def __str__(self):
        base = super().__str__()
        if not self.problems:
            return base
        lines = [f"  {path or '<root>'}: {msg}" for path, msg in self.problems]
        return base + "\n" + "\n".join(lines)


class OutputError(PossyncError):
    """Run outputs could not be written."""
