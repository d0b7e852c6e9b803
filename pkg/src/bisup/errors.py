"""Exception types shared across the package."""


class BisupError(Exception):
    pass


class ShapeError(BisupError, ValueError):
    pass


class NumericError(BisupError, ArithmeticError):
    pass


class StateError(BisupError, RuntimeError):
    pass


class ConfigError(BisupError, ValueError):
    pass
