"""Exception types shared across the package."""


class InvalidArgument(ValueError):
    pass


class DegenerateConfiguration(ValueError):
    """Rigid alignment is ill-posed (too few points or rank-deficient covariance)."""

    def __init__(self, message, rank=None):
        super().__init__(message)
        self.rank = rank


class GenerationFailure(RuntimeError):
    pass


class FormatError(ValueError):
    """Malformed binary file; ``offset`` is the byte position of the problem."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class DegenerateFeature(ValueError):
    def __init__(self, message, row=None):
        super().__init__(message)
        self.row = row


class DegenerateBatch(ValueError):
    """Centered Gram matrix vanished; the alignment term is skipped for the batch."""


class UndefinedMetric(ValueError):
    pass


class DivergedError(RuntimeError):
    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class NonFiniteGradient(FloatingPointError):
    def __init__(self, name):
        super().__init__(f"non-finite gradient for parameter {name!r}")
        self.name = name


class ConfigError(ValueError):
    pass
