"""Exception types raised across the package."""


class CondOTError(Exception):
    """Base class for all package errors."""


class NotSPD(CondOTError, ValueError):
    def __init__(self, eigenvalue: float, message: str | None = None):
        self.eigenvalue = float(eigenvalue)
        super().__init__(message or f"matrix is not positive semi-definite: eigenvalue {self.eigenvalue:.6g}")


class TooFewSamples(CondOTError, ValueError):
    pass


class ShapeMismatch(CondOTError, ValueError):
    pass


class UnsupportedPrimitive(CondOTError, TypeError):
    pass


class NestingTooDeep(CondOTError, RuntimeError):
    pass


class MissingMoments(CondOTError, ValueError):
    pass


class AnchorDimMismatch(CondOTError, ValueError):
    pass


class UnknownLabel(CondOTError, KeyError):
    pass


class TooFewLabels(CondOTError, ValueError):
    pass


class LengthMismatch(CondOTError, ValueError):
    pass


class EmptySet(CondOTError, ValueError):
    pass


class TooLarge(CondOTError, ValueError):
    pass


class NotConverged(CondOTError, RuntimeError):
    """Sinkhorn hit its iteration cap; ``result`` holds the best iterate."""

    def __init__(self, result, max_iters: int):
        self.result = result
        self.max_iters = max_iters
        super().__init__(f"Sinkhorn did not converge in {max_iters} iterations "
                         f"(marginal error {result.marginal_err:.3g})")


class ConfigError(CondOTError, ValueError):
    pass


class NonFiniteLoss(CondOTError, FloatingPointError):
    def __init__(self, step: int, loss_name: str, value: float):
        self.step = step
        self.loss_name = loss_name
        self.value = value
        super().__init__(f"non-finite {loss_name} loss ({value}) at step {step}")


class TooManyCombos(CondOTError, ValueError):
    pass


class NotActionTask(CondOTError, ValueError):
    pass


class ManifestError(CondOTError, ValueError):
    def __init__(self, message: str, field: str | None = None):
        self.field = field
        super().__init__(f"{field}: {message}" if field else message)


class CheckpointError(CondOTError, ValueError):
    pass


class RankDeficient(UserWarning):
    """Requested more principal components than the data supports."""
