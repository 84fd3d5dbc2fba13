from typing import Optional


class ModelFormatError(Exception):
    """Raised for syntax or semantic errors in model, controller, chain or spec documents."""

    def __init__(self, message: str, line: Optional[int] = None, entity: Optional[str] = None):
        self.message = message
        self.line = line
        self.entity = entity
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(f"{prefix}{message}")
