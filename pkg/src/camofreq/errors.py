"""Exception types shared across camofreq."""


class CamoFreqError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(CamoFreqError, ValueError):
    """Array shapes are inconsistent with an operation."""


class ConfigurationError(CamoFreqError, ValueError):
    """An option or parameter set is invalid or incomplete."""


class ContractError(CamoFreqError, ValueError):
    """A documented precondition was violated."""


class NumericalIntegrityError(CamoFreqError, ArithmeticError):
    """A numerical invariant (e.g. realness of a reconstruction) broke."""


class FormatError(CamoFreqError, ValueError):
    """Malformed mask or file payload."""


class InputError(CamoFreqError, ValueError):
    """Unparseable input file. ``offset`` is the byte offset of the failure."""

    def __init__(self, message, path=None, offset=None):
        super().__init__(message)
        self.path = path
        self.offset = offset


class ValidationError(CamoFreqError, ValueError):
    """Referential or semantic validation of a document failed."""

    def __init__(self, message, offending=()):
        super().__init__(message)
        self.offending = list(offending)


class TrainingError(CamoFreqError, RuntimeError):
    """Optimisation diverged."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step
