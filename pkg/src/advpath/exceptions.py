"""Exception hierarchy shared by every module of the toolkit."""


class AdvPathError(Exception):
    """Base class for all toolkit errors."""


class DimensionError(AdvPathError, ValueError):
    """Raised when tensor shapes do not conform."""


class ContractError(AdvPathError, ValueError):
    """Raised when an operation's precondition is violated."""


class DataError(AdvPathError, ValueError):
    """Raised for unusable datasets (empty, single-class, too small)."""


class ConfigError(AdvPathError, ValueError):
    """Raised for invalid configuration values.

    ``violations`` lists every problem found, not just the first one.
    """

    def __init__(self, violations):
        if isinstance(violations, str):
            violations = [violations]
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class SpecError(ConfigError):
    """Raised when a model spec has non-conforming layers."""


class LoadError(AdvPathError, OSError):
    """Raised when a file on disk cannot be parsed."""


class FormatError(LoadError):
    """Raised for corrupt or foreign binary containers."""
