from typing import Optional


class ConfigurationError(Exception):
    """Custom exception for invalid hyperparameters, loop settings or CLI overrides."""

    def __init__(self, message: str, field: Optional[str] = None):
        self.message = message
        self.field = field
        super().__init__(message)
