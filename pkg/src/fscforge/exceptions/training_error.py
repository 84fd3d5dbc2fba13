from typing import Optional


class TrainingError(Exception):
    def __init__(self, message: str, epoch: Optional[int] = None):
        self.message = message
        self.epoch = epoch
        super().__init__(message if epoch is None else f"epoch {epoch}: {message}")
