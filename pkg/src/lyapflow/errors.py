"""Exception hierarchy shared across the package."""


class LyapflowError(Exception):
    """Base class for all errors raised by lyapflow."""


class DimensionError(LyapflowError, ValueError):
    def __init__(self, op, *shapes):
        self.op = op
        self.shapes = shapes
        joined = " and ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {joined}")


class ContractError(LyapflowError, ValueError):
    """A precondition of an operation was violated by the caller."""


class NonFiniteError(LyapflowError, FloatingPointError):
    pass


class IngestionError(LyapflowError, ValueError):
    pass


class BudgetError(LyapflowError, ValueError):
    """An injection exceeded the attack budget."""


class ConfigError(LyapflowError, ValueError):
    pass


class SolverDivergence(LyapflowError, FloatingPointError):
    def __init__(self, step, norm, detail=""):
        self.step = step
        self.norm = norm
        msg = f"solver produced a non-finite state at step {step} (last norm {norm:.6g})"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)


class RangeError(LyapflowError, ValueError):
    pass


class InvariantViolation(LyapflowError, ValueError):
    pass


class TrainingDivergence(LyapflowError, FloatingPointError):
    def __init__(self, message, last_good=None, epoch=None):
        super().__init__(message)
        self.last_good = last_good
        self.epoch = epoch


class CheckpointError(LyapflowError, ValueError):
    pass
