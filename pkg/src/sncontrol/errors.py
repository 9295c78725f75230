"""Exception hierarchy shared by all modules.

Each class carries an ``exit_code`` so the command line front end can map a
failure to a distinct, machine-readable exit status.
"""


class SNControlError(Exception):
    exit_code = 1


class ConfigError(SNControlError):
    """Invalid or unparsable run configuration."""

    exit_code = 3

    def __init__(self, message, fields=(), line=None):
        super().__init__(message)
        self.fields = tuple(fields)
        self.line = line


class ParameterError(SNControlError):
    """Weight or parameter construction violated a required inequality."""

    exit_code = 4


class SolverError(SNControlError):
    """A linear or nonlinear solve failed."""

    exit_code = 5


class IterationError(SNControlError):
    """An iterative method did not converge; ``history`` holds the log."""

    exit_code = 6

    def __init__(self, message, history=()):
        super().__init__(message)
        self.history = list(history)


class NumericError(SNControlError):
    """A computed quantity became non-finite."""

    exit_code = 7
