"""
Exception types for KDLab

All errors derive from KDLabError. The ones that describe bad input also derive
from ValueError so existing ``except ValueError`` handlers keep working.
"""


class KDLabError(Exception):
    """Base class for all KDLab errors"""


class ConfigurationError(KDLabError, ValueError):
    """Malformed or inconsistent configuration (unknown instruction, bad schema, ...)"""


class ContractViolation(KDLabError, ValueError):
    """A caller broke an operation's pre-condition"""


class EnumerationBudgetExceeded(KDLabError):
    """Exact enumeration would visit more paths than the configured cap"""

    def __init__(self, n_paths, cap):
        self.n_paths = n_paths
        self.cap = cap
        super().__init__(
            f"Enumeration needs {n_paths} paths, cap is {cap}; refusing to truncate"
        )


class NumericalGuardError(KDLabError):
    """A quantity that must stay finite (e.g. log pi of a taken action) did not"""


class DivergenceError(KDLabError):
    """Training diverged; ``diagnostics`` holds the state at the time of abort"""

    def __init__(self, message, diagnostics=None):
        self.diagnostics = diagnostics or {}
        super().__init__(message)


class CheckpointMissingError(KDLabError, FileNotFoundError):
    """A required checkpoint or manifest file is absent"""

    def __init__(self, expected_path):
        self.expected_path = str(expected_path)
        super().__init__(f"Checkpoint manifest not found: {self.expected_path}")
