"""Exception hierarchy shared across the package.

The CLI maps each family onto a stable exit code: usage problems exit 1,
bad input data exits 2, numerical failures exit 3.
"""


class MeshPoolError(Exception):
    exit_code = 2


class ArgumentError(MeshPoolError, ValueError):
    exit_code = 1


class ShapeError(MeshPoolError, ValueError):
    exit_code = 1


class StateError(MeshPoolError, RuntimeError):
    exit_code = 1


class ParseError(MeshPoolError):
    """Malformed mesh, sidecar, manifest or embedding file."""

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


class ConnectivityError(MeshPoolError):
    pass


class DegreeError(MeshPoolError):
    pass


class DisconnectedError(MeshPoolError):
    pass


class NumericalError(MeshPoolError, ArithmeticError):
    exit_code = 3

    def __init__(self, message, checkpoint=None):
        self.checkpoint = checkpoint
        if checkpoint is not None:
            message = f"{message} (last good checkpoint: {checkpoint})"
        super().__init__(message)


class ConvergenceError(NumericalError):
    def __init__(self, message, iterations=None):
        self.iterations = iterations
        if iterations is not None:
            message = f"{message} after {iterations} iterations"
        super().__init__(message)


class EmptyClusterWarning(UserWarning):
    pass
