class FisheyeError(Exception):
    """Base class for every error raised by fisheye_plumb"""


class DomainError(FisheyeError, ValueError):
    """Incidence angle outside [0, theta_max]"""


class OutOfRangeError(FisheyeError, ValueError):
    """Image radius beyond the profile value at theta_max"""


class NonMonotoneError(FisheyeError):
    """Radial profile is not strictly increasing, so it cannot be inverted"""


class InvalidParamsError(FisheyeError, ValueError):
    pass


class SamplerExhaustedError(FisheyeError):
    pass


class DegenerateError(FisheyeError, ValueError):
    pass


class SizeMismatchError(FisheyeError, ValueError):
    pass


class InputError(FisheyeError):
    """Unreadable or malformed input file; the message always names the path"""

    def __init__(self, path, message: str):
        self.path = str(path)
        super().__init__(f"{message}: {self.path}")
