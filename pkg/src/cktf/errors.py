"""Exception hierarchy shared across the package."""


class CKTFError(Exception):
    pass


class ShapeError(CKTFError, ValueError):
    pass


class ParameterError(CKTFError, ValueError):
    pass


class UsageError(CKTFError, RuntimeError):
    pass


class DegenerateInputError(CKTFError, ValueError):
    pass


class SpecError(CKTFError, ValueError):
    pass


class FormatError(CKTFError, ValueError):
    pass


class ConfigError(CKTFError, ValueError):
    pass
