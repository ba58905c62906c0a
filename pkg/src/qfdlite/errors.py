"""Exception types mapped to CLI exit codes (config 2, numerical 3, artifact 4)."""


class ConfigError(ValueError):
    """Invalid or unparseable configuration."""


class NumericalError(RuntimeError):
    """Training hit non-finite values or a gradient check failed."""


class ArtifactError(FileNotFoundError):
    """A required checkpoint or dataset file is missing."""
