"""Exception types shared across the package.

The CLI maps these onto exit codes: configuration problems exit with 2,
missing artifacts with 3 and numerical blow-ups with 4.
"""


class InvalidInputError(ValueError):
    """An argument violates an operation's precondition."""


class InvalidConfigError(ValueError):
    """A configuration document or dataclass is malformed."""


class InvalidSpecError(ValueError):
    """A scene or mixed-batch specification is inconsistent."""


class MissingDependencyError(FileNotFoundError):
    """A stage needs an artifact that is not on disk."""


class NumericalError(RuntimeError):
    """A loss became NaN or infinite during training."""
