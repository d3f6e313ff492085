"""Exception hierarchy shared by every module of the package."""


class OldnashError(Exception):
    """Base class; ``code`` doubles as the CLI exit code."""

    code = 1


class GridError(OldnashError, ValueError):
    code = 10


class RegionError(OldnashError, ValueError):
    code = 11


class KernelError(OldnashError, ValueError):
    code = 12


class SolverError(OldnashError, RuntimeError):
    code = 20


class SmallnessViolation(SolverError):
    code = 21


class ConvergenceError(SolverError):
    code = 22


class DualMinimizationError(SolverError):
    code = 23


class CheckpointError(OldnashError, IOError):
    code = 30


class ConfigError(OldnashError, ValueError):
    """Configuration problem.

    ``kind`` is one of ``unknown_key``, ``missing_key``, ``bad_value``,
    ``region`` or ``syntax`` and selects the exit code.
    """

    codes = {
        "syntax": 40,
        "unknown_key": 41,
        "missing_key": 42,
        "bad_value": 43,
        "region": 44,
    }

    def __init__(self, message, kind="bad_value", line=None):
        self.kind = kind
        self.line = line
        self.code = self.codes.get(kind, 40)
        where = f" (line {line})" if line is not None else ""
        super().__init__(f"{message}{where}")
