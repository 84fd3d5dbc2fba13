from typing import Optional


class ModelValidationError(Exception):
    def __init__(self, message: str, entity: Optional[str] = None):
        self.message = message
        self.entity = entity
        super().__init__(message)
