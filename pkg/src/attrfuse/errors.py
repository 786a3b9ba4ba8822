"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Malformed run, layer or generator configuration."""


class DataError(ValueError):
    """Invalid dataset content (manifest rows, labels, images)."""


class FormatError(ValueError):
    """Corrupt or incompatible binary tensor or checkpoint file."""


class ScenarioError(ValueError):
    """An operation was requested under an incompatible scenario."""
