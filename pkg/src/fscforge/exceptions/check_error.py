from typing import Optional


class CheckError(Exception):
    def __init__(self, message: str, label: Optional[str] = None):
        self.message = message
        self.label = label
        super().__init__(message)
