"""Exception types raised across sqforge."""


class SQForgeError(Exception):
    """Base class for all library errors."""


class Infeasible(SQForgeError):
    """No complement distribution matched the moment targets."""

    def __init__(self, message: str, residual: float = float("nan"), y: float | None = None):
        super().__init__(message)
        self.residual = residual
        self.y = y


class NumericalRankFailure(SQForgeError):
    """A support reduction step lost moment accuracy."""


class CertificateViolation(SQForgeError):
    """A nonnegative test polynomial separated the mixture from N(0, 1)."""

    def __init__(self, message: str, witness=None, slack: float = float("nan")):
        super().__init__(message)
        self.witness = witness
        self.slack = slack


class PackingExhausted(SQForgeError):
    """Rejection sampling could not place another near-orthogonal direction."""


class DatasetTooSmall(SQForgeError):
    pass


class GridTooCoarse(SQForgeError):
    pass


class DecoderFailure(SQForgeError):
    """A list decoder raised while processing one arm of the reduction."""

    def __init__(self, message: str, arm: int):
        super().__init__(message)
        self.arm = arm


class DatasetFormatError(SQForgeError):
    """A dataset file could not be parsed; ``line`` is 1-based."""

    def __init__(self, message: str, line: int | None = None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line
