"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration or violated operation precondition."""


class ConformabilityError(ValueError):
    """Two layered tensors (or a tensor and a batch) have mismatched shapes."""


class CodecError(ValueError):
    """Malformed sparse wire payload or invalid sparse update."""


class FormatError(ValueError):
    """Malformed IDX dataset file."""
