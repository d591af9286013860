"""Exception hierarchy.

Every error carries the process exit code the CLI maps it to:
0 success, 2 configuration/shape error, 3 numerical failure, 4 I/O error.
"""


class NmromError(Exception):
    exit_code = 1


class ConfigError(NmromError, ValueError):
    exit_code = 2


class DimensionError(NmromError, ValueError):
    """Shape, size or grid mismatch between operands."""

    exit_code = 2


class FormatError(NmromError, OSError):
    """Malformed binary file; ``offset`` is the byte position of the fault."""

    exit_code = 4

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class NumericalError(NmromError, ArithmeticError):
    exit_code = 3


class NewtonDivergedError(NumericalError):
    def __init__(self, residual_norm, iterations, step=None):
        where = "" if step is None else f" at time step {step}"
        super().__init__(
            f"Newton did not converge in {iterations} iterations{where}; "
            f"last residual norm {residual_norm:.3e}"
        )
        self.residual_norm = residual_norm
        self.iterations = iterations
        self.step = step


class TrainingDivergedError(NumericalError):
    def __init__(self, epoch):
        super().__init__(f"training loss became non-finite at epoch {epoch}")
        self.epoch = epoch


class SingularSystemError(NumericalError):
    """Rank-deficient least-squares system or sampled basis block."""

    def __init__(self, message, sigma_min=None):
        super().__init__(message)
        self.sigma_min = sigma_min


class RomFailureError(NumericalError):
    def __init__(self, message, step):
        super().__init__(f"{message} (time step {step})")
        self.step = step
