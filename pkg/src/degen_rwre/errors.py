"""Exception hierarchy. Each error carries a ``details`` dict for JSON reporting."""


class RWREError(Exception):
    """Base class; ``exit_code`` is what the command line runner returns."""

    exit_code = 1

    def __init__(self, message, **details):
        super().__init__(message)
        self.details = details

    def to_dict(self):
        return {"error": type(self).__name__, "message": str(self), "details": self.details}


class ValidationError(RWREError, ValueError):
    exit_code = 2


class WindowError(RWREError, IndexError):
    """A query fell outside the stored space-time window."""

    exit_code = 4


class BoundaryHit(RWREError):
    """A walk reached the spatial edge of a non-periodic window.

    ``path`` holds the partial trajectory up to the hit.
    """

    exit_code = 4

    def __init__(self, message, path=None, **details):
        super().__init__(message, **details)
        self.path = path


class StarvationError(RWREError):
    """The dual clock could not reach the next arrival inside the window."""

    exit_code = 4


class SizeBiasOverflow(RWREError):
    """Rejection sampling of the time-zero cycle exceeded its envelope cap."""

    exit_code = 2


class RangeError(RWREError):
    """Kernel mass escaped the requested site range beyond tolerance."""

    exit_code = 4


class CertificateFailure(RWREError):
    exit_code = 3
