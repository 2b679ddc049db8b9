"""Exception hierarchy shared by all engines."""


class ParamstabError(Exception):
    """Base class for every error raised by this package."""


class InvalidArgument(ParamstabError, ValueError):
    pass


class EvaluationError(ParamstabError):
    """A field or integrand produced a non-finite value."""

    def __init__(self, message, point=None):
        super().__init__(message)
        self.point = point


class EllipticityViolation(ParamstabError):
    def __init__(self, message, point=None):
        super().__init__(message)
        self.point = point


class InvalidKernel(ParamstabError, ValueError):
    pass


class DivergentProfile(ParamstabError, ValueError):
    pass


class TruncationFailure(ParamstabError):
    """Requested tail tolerance cannot be met within the order cap."""

    def __init__(self, message, achieved_tail):
        super().__init__(message)
        self.achieved_tail = achieved_tail


class RefinementRequired(ParamstabError):
    pass


class Unsupported(ParamstabError, NotImplementedError):
    pass
