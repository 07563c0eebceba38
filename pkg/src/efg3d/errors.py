"""Exception hierarchy shared by the solver package."""


class EFGError(Exception):
    """Base class for all package errors."""


class ParseError(EFGError):
    def __init__(self, path, lineno, message):
        self.path = str(path)
        self.lineno = lineno
        super().__init__(f"{self.path}:{lineno}: {message}")


class DataError(EFGError):
    """Input data is well-formed but physically or geometrically invalid."""


class SupportError(EFGError):
    """A support domain could not collect enough nodes."""


class SingularMomentError(EFGError):
    def __init__(self, point, message="singular moment matrix"):
        self.point = tuple(float(c) for c in point)
        super().__init__(f"{message} at x = {self.point}")


class InvertedElementError(EFGError):
    """Non-positive Jacobian at a Gauss point."""

    def __init__(self, point_id, jacobian, step=None):
        self.point_id = int(point_id)
        self.jacobian = float(jacobian)
        self.step = step
        where = f" at step {step}" if step is not None else ""
        super().__init__(
            f"inverted configuration: J = {self.jacobian:.3e} at Gauss point {self.point_id}{where}"
        )


class DivergenceError(EFGError):
    def __init__(self, step):
        self.step = step
        super().__init__(f"non-finite displacement at step {step}")


class ConfigError(EFGError):
    """Run configuration failed validation."""
