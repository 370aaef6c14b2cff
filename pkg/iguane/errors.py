"""Exceptions raised by iguane.

Every error raised on purpose by the package derives from :py:class:`IguaneError`, so
that pipelines can discard a single volume and carry on, and so that the command line
can map failures to exit codes.
"""


class IguaneError(Exception):
    """Base class of all iguane errors"""

    exit_code = 1


class ValidationError(IguaneError, ValueError):
    """An input violates the contract of an operation (dims, ranges, empty inputs)"""


class ConfigError(ValidationError):
    """A declarative configuration is malformed or inconsistent"""


class ExclusionError(IguaneError):
    """A volume cannot be brought to the target dimensions and must be excluded"""

    exit_code = 2


class DegenerateInputError(IguaneError):
    """Input is valid in form but carries no usable intensity information"""


class SpaceError(IguaneError):
    """Operation called on a volume in the wrong intensity space or normalization"""


class AdapterError(IguaneError):
    """An external preprocessing tool failed

    Parameters
    ----------
    command : str
        the command line that was run
    returncode : int
        exit status of the command (None if it could not be started)
    stderr : str
        captured standard error
    """

    exit_code = 2

    def __init__(self, command, returncode=None, stderr=""):
        self.command = command
        self.returncode = returncode
        self.stderr = stderr
        tail = stderr.strip().splitlines()[-5:] if stderr else []
        message = f"'{command}' failed (exit {returncode})"
        if tail:
            message += ": " + " | ".join(tail)
        super().__init__(message)


class ShapeError(IguaneError):
    """Volume dimensions are incompatible with a network architecture"""


class DataError(IguaneError):
    """Training data is missing for a site"""


class UndefinedResultError(IguaneError):
    """A statistic is undefined for the given data (e.g. zero variance)"""


class IntegrityError(IguaneError):
    """A checkpoint does not match its recorded hashes"""


class TrainingDivergedError(IguaneError):
    """Parameters became non-finite during training"""

    exit_code = 3
