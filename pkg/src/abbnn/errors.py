"""Exception hierarchy shared by every abbnn module."""


class ABBNNError(Exception):
    """Base class for all errors raised by this package."""


class ContractViolation(ABBNNError, ValueError):
    """An operation was called with arguments that break its precondition."""


class DegenerateRowError(ContractViolation):
    def __init__(self, row: int, message: str | None = None):
        self.row = row
        super().__init__(message or f"weight row {row} has zero variance and cannot be standardized")


class SpecError(ABBNNError, ValueError):
    """Malformed or inconsistent GraphSpec text."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ConfigError(ABBNNError, ValueError):
    """Bad training / run configuration (unknown key, invalid value)."""


class DataError(ABBNNError):
    """Dataset files missing, unreadable, or inconsistent."""


class NumericalAbort(ABBNNError, FloatingPointError):
    """Training produced a non-finite tensor."""

    def __init__(self, tensor: str, step: int | None = None):
        self.tensor = tensor
        self.step = step
        where = f" at step {step}" if step is not None else ""
        super().__init__(f"non-finite values in tensor '{tensor}'{where}")


class CheckpointMismatch(ABBNNError, ValueError):
    """A checkpoint does not match the GraphSpec it is being loaded against."""


class ExportError(ABBNNError, ValueError):
    """A trained network cannot be folded into the multiplication-free form."""


class FormatError(ABBNNError, ValueError):
    """A binary container (ABNN / ABCK / IDX / flat fixed) is malformed."""


class TruncatedError(FormatError):
    def __init__(self, section: str):
        self.section = section
        super().__init__(f"unexpected end of section '{section}'")


class IntegrityError(FormatError):
    def __init__(self, section: str, expected: int, found: int):
        self.section = section
        self.expected = expected
        self.found = found
        super().__init__(
            f"CRC mismatch in section '{section}': stored {expected:#010x}, computed {found:#010x}"
        )


class AuditError(ABBNNError, ValueError):
    """Missing dimension or unresolvable shape during operand accounting."""
