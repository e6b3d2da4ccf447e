"""Exception hierarchy shared across the package."""


class BlockSlamError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(BlockSlamError):
    """Invalid configuration value, unknown key, or malformed config file."""


class DataError(BlockSlamError):
    """Dataset problem: missing file, unparsable line, association gap."""


class NumericError(BlockSlamError):
    """NaN/Inf poisoning or a failed numeric check during optimization."""


class ContractViolation(BlockSlamError):
    """A caller broke a documented precondition."""


class InvalidDepthError(ContractViolation):
    """Depth value outside the valid range for the requested operation."""
