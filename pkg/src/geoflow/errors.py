"""Exception hierarchy shared across the package."""


class GeoFlowError(Exception):
    """Base class for every error raised by the package."""


class ParameterError(GeoFlowError, ValueError):
    """An argument is outside its admissible range."""


class DimensionError(GeoFlowError, ValueError):
    """Array shapes or channel counts do not agree."""


class DomainError(GeoFlowError, ValueError):
    """The input is outside the mathematical domain of the operation."""


class ContractError(GeoFlowError, RuntimeError):
    """A call violates a usage contract (non-scalar loss, unfrozen encoder, ...)."""


class CapacityError(GeoFlowError, ValueError):
    """The problem is larger than the solver is built for."""


class ConfigError(GeoFlowError, ValueError):
    """A checkpoint or config does not match the model it is loaded into."""


class ReportError(GeoFlowError, RuntimeError):
    """A study could not produce a meaningful report."""


class TrainingError(GeoFlowError, RuntimeError):
    """Training diverged (non-finite loss)."""


class FormatError(GeoFlowError, ValueError):
    """A binary file is malformed. ``offset`` is the byte position of the fault."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class TheoremViolation(GeoFlowError, AssertionError):
    """A bound that must hold by construction was violated; carries the report."""

    def __init__(self, report):
        super().__init__(f"bound violated: lhs={report.lhs!r} > rhs={report.rhs!r}")
        self.report = report
