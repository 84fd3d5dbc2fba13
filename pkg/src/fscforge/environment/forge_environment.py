import logging
import os
from typing import Optional

from dotenv import load_dotenv

LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL")
SOLVER_METHODS = ("auto", "exact", "iterative")


class ForgeEnvironment:
    def __init__(
        self,
        log_level: str = "WARNING",
        seed: int = 7,
        threads: int = 1,
        solver: str = "auto",
        exact_limit: int = 2000,
    ):
        """Sets fscforge run settings via direct input.

            Example:

            env = ForgeEnvironment.from_env()
            logging.basicConfig(level=env.log_level)
        """
        self.logger = logging.getLogger(__name__)

        level = (log_level or "").upper()
        if level not in LOG_LEVELS:
            raise ValueError(f"Unknown log level '{log_level}', expected one of {LOG_LEVELS}.")
        if seed is None or seed < 0:
            raise ValueError("'seed' must be a non-negative integer.")
        if threads < 1:
            raise ValueError("'threads' must be at least 1.")
        if solver not in SOLVER_METHODS:
            raise ValueError(f"Unknown solver '{solver}', expected one of {SOLVER_METHODS}.")
        if exact_limit < 0:
            raise ValueError("'exact_limit' must be non-negative.")

        self.log_level = level
        self.seed = seed
        self.threads = threads
        self.solver = solver
        self.exact_limit = exact_limit

        self.logger.info(f"✅ ForgeEnvironment configured: seed={self.seed} solver={self.solver}")

    @classmethod
    def from_env(cls, dotenv_path: Optional[str] = None) -> "ForgeEnvironment":
        """Builds the environment from FSCFORGE_* variables, loading a .env file first if present."""
        load_dotenv(dotenv_path)
        try:
            return cls(
                log_level=os.getenv("FSCFORGE_LOG", "WARNING"),
                seed=int(os.getenv("FSCFORGE_SEED", "7")),
                threads=int(os.getenv("FSCFORGE_THREADS", "1")),
                solver=os.getenv("FSCFORGE_SOLVER", "auto"),
                exact_limit=int(os.getenv("FSCFORGE_EXACT_LIMIT", "2000")),
            )
        except ValueError as e:
            logging.getLogger(__name__).error(f"❌ Invalid FSCFORGE_* environment: {e}")
            raise
