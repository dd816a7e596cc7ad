"""Exception hierarchy shared by the library and the CLI."""


class TshapError(Exception):
    """Base class for all library errors."""


class InvalidArgumentError(TshapError, ValueError):
    pass


class DegenerateInputError(TshapError, ValueError):
    """Input data cannot be processed (e.g. a sequence with zero body height)."""


class NumericOverflowError(TshapError, ArithmeticError):
    def __init__(self, tensor: str, detail: str = ""):
        self.tensor = tensor
        msg = f"non-finite values in {tensor!r}"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)


class TrainingFailureError(TshapError, RuntimeError):
    def __init__(self, epoch: int, detail: str = "loss is not finite"):
        self.epoch = epoch
        super().__init__(f"training diverged at epoch {epoch}: {detail}")


class WrongModelKindError(TshapError, TypeError):
    pass


class UndefinedMetricError(TshapError, ValueError):
    pass


class DegenerateBaselineError(TshapError, ValueError):
    """Unmasked target-class probability is zero, so relative drops are undefined."""


class DegenerateVarianceError(TshapError, ValueError):
    pass


class ConfigError(TshapError, ValueError):
    pass
