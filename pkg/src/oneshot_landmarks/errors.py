"""Exception families. The CLI maps each family to an exit code."""


class ContractError(ValueError):
    """A caller violated an operation's precondition."""


class ConfigError(ValueError):
    """Invalid configuration value or layout flag."""


class DataError(RuntimeError):
    """Dataset files are missing or malformed."""


class SchemaError(DataError):
    """An annotation file does not match the expected schema."""


class AugmentationRangeError(RuntimeError):
    """Augmentation ranges keep pushing landmarks out of the valid region."""


class CheckpointError(RuntimeError):
    """A checkpoint directory is inconsistent or corrupted."""
