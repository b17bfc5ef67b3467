"""Exception types raised across the package."""


class EventLFError(Exception):
    """Base class for all package errors."""


class ShapeError(EventLFError, ValueError):
    pass


class MissingView(EventLFError, FileNotFoundError):
    """A view image is absent from a light-field directory."""

    def __init__(self, u, v, path=None):
        self.u, self.v, self.path = u, v, path
        super().__init__(f"missing view ({u}, {v})" + (f" at {path}" if path else ""))


class IoError(EventLFError, OSError):
    """A file exists but could not be decoded."""


class SpecError(EventLFError, ValueError):
    pass


class SeedError(EventLFError, ValueError):
    pass


class DomainError(EventLFError, ValueError):
    pass


class SingularError(EventLFError, ArithmeticError):
    pass


class SizeError(EventLFError, ValueError):
    pass


class TimingError(EventLFError, ValueError):
    pass


class SegmentationError(EventLFError, RuntimeError):
    pass


class IncompleteCycle(SegmentationError):
    pass


class ConfigError(EventLFError, ValueError):
    pass
