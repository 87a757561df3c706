"""Exception hierarchy. Every error raised on purpose by the package derives from AmmfmError."""


class AmmfmError(Exception):
    pass


class DimensionError(AmmfmError, ValueError):
    """Operand shapes disagree; the message names the offending axis."""


class ContractError(AmmfmError, ValueError):
    pass


class NumericError(AmmfmError, ArithmeticError):
    pass


class ConfigError(AmmfmError, ValueError):
    pass


class ValidationError(AmmfmError, ValueError):
    pass


class IngestionError(AmmfmError, ValueError):
    pass
