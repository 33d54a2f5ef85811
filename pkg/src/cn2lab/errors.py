"""Exception types shared across the package."""


class CN2Error(Exception):
    """Base class for domain errors raised by cn2lab."""


class OutOfDomain(CN2Error):
    pass


class NotPositiveDefinite(CN2Error):
    def __init__(self, point, min_eigenvalue):
        super().__init__(f"metric not positive definite at {point}: "
                         f"smallest eigenvalue {min_eigenvalue:.3e}")
        self.point = point
        self.min_eigenvalue = min_eigenvalue


class SupportViolation(CN2Error):
    pass


class BadParams(CN2Error, ValueError):
    pass


class Lost(CN2Error):
    """A point lies more than one face crossing away from its block."""


class LeftDomain(CN2Error):
    """An integration reached a non-identified face; ``path`` holds the partial path."""

    def __init__(self, message, path=None):
        super().__init__(message)
        self.path = path


class StepUnderflow(CN2Error):
    pass


class DimensionMismatch(CN2Error, ValueError):
    pass


class NotCN2Point(CN2Error):
    pass


class DegenerateFrame(CN2Error):
    pass


class OrientationFlip(CN2Error):
    pass


class NotInNullity(CN2Error):
    pass


class Blowup(CN2Error, ArithmeticError):
    def __init__(self, message, singular_times=()):
        super().__init__(message)
        self.singular_times = tuple(singular_times)


class ResolutionTooCoarse(CN2Error, ValueError):
    pass


class SpecFileError(CN2Error, ValueError):
    def __init__(self, message, line=None):
        text = f"line {line}: {message}" if line is not None else message
        super().__init__(text)
        self.line = line
