"""Exception types raised across the package."""


class MargLikError(Exception):
    """Base class for all package errors."""


class NotPositiveDefinite(MargLikError):
    def __init__(self, pivot, block=None, msg=None):
        self.pivot = pivot
        self.block = block
        where = f" in block {block}" if block is not None else ""
        super().__init__(msg or f"matrix not positive definite at pivot {pivot}{where}")


class EigenFailure(MargLikError):
    pass


class DimMismatch(MargLikError):
    pass


class BadShape(MargLikError):
    pass


class BadTarget(MargLikError):
    pass


class BadLabels(MargLikError):
    pass


class MemoryCapExceeded(MargLikError):
    pass


class UnsupportedLayer(MargLikError):
    pass


class NotDifferentiable(MargLikError):
    pass


class NonFiniteLoss(MargLikError):
    pass


class BadMagic(MargLikError):
    pass


class Truncated(MargLikError):
    pass


class CountMismatch(MargLikError):
    pass


class ConfigError(MargLikError):
    pass
