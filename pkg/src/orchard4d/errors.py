"""Exception hierarchy. CLI exit codes key off the two base classes."""


class Orchard4DError(Exception):
    """Base class for all package errors."""


class InputError(Orchard4DError, ValueError):
    """Caller supplied malformed or out-of-contract data (exit code 2)."""


class AlgorithmError(Orchard4DError, RuntimeError):
    """A computation could not produce a valid result (exit code 3)."""


class InvalidInputError(InputError):
    pass


class SequencingError(InputError):
    """Frames were fed to the tracker out of order."""


class DatasetError(InputError):
    """A dataset file is malformed. Carries file and line context."""

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)


class EmptyWindowError(AlgorithmError):
    """No LiDAR scan falls inside the accumulation window."""


class InsufficientPointsError(AlgorithmError):
    """Too few points to support a 3D estimate."""


class EmptyProjectionError(AlgorithmError):
    """Every point projects out of view."""


class RegistrationFailure(AlgorithmError):
    """ICP converged with too few inlier correspondences."""
