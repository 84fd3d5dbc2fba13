from dataclasses import dataclass, replace

from fscforge.exceptions.configuration_error import ConfigurationError


@dataclass(frozen=True)
class Hyperparams:
    """Optimizer settings for behavior cloning and QBN training."""

    learning_rate: float = 0.01
    epochs: int = 300
    batch_size: int = 32
    clip_norm: float = 1.0
    seed: int = 7
    hidden_size: int = 16

    def __post_init__(self):
        for name in ("learning_rate", "clip_norm"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"'{name}' must be positive.", field=name)
        for name in ("epochs", "batch_size", "hidden_size"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"'{name}' must be at least 1.", field=name)
        if self.seed < 0:
            raise ConfigurationError("'seed' must be non-negative.", field="seed")

    def with_overrides(self, **changes) -> "Hyperparams":
        return replace(self, **changes)


@dataclass(frozen=True)
class QbnSchedule:
    hidden_rollouts: int = 500
    autoencoder_epochs: int = 200
    finetune_epochs: int = 20
    learning_rate: float = 0.01
    batch_size: int = 256

    def __post_init__(self):
        if self.hidden_rollouts < 1 or self.autoencoder_epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("QBN rollouts, epochs and batch size must be at least 1.")
        if self.finetune_epochs < 0:
            raise ConfigurationError("'finetune_epochs' must be non-negative.", field="finetune_epochs")
        if not self.learning_rate > 0:
            raise ConfigurationError("'learning_rate' must be positive.", field="learning_rate")


@dataclass(frozen=True)
class SolverConfig:
    method: str = "auto"
    exact_limit: int = 2000
    tolerance: float = 1e-10
    max_iterations: int = 1_000_000

    def __post_init__(self):
        if self.method not in ("auto", "exact", "iterative"):
            raise ConfigurationError(f"Unknown solver method '{self.method}'.", field="method")
        if self.exact_limit < 0:
            raise ConfigurationError("'exact_limit' must be non-negative.", field="exact_limit")
        if not self.tolerance > 0 or self.max_iterations < 1:
            raise ConfigurationError("Solver tolerance and iteration cap must be positive.")

    def use_exact(self, n_unknowns: int) -> bool:
        if self.method == "exact":
            return True
        if self.method == "iterative":
            return False
        return n_unknowns <= self.exact_limit


@dataclass(frozen=True)
class LoopConfig:
    eta: float = 0.5
    bh_initial: int = 1
    bh_max: int = 4
    max_iterations: int = 10
    initial_rollouts: int = 200
    extraction_rollouts: int = 500
    retrain_rollouts: int = 100
    max_steps: int = 40
    seed: int = 7
    threads: int = 1
    tie_breaking: str = "uniform"

    def __post_init__(self):
        if not 0.0 <= self.eta <= 1.0:
            raise ConfigurationError("'eta' must lie in [0, 1].", field="eta")
        if self.bh_initial < 1:
            raise ConfigurationError("'bh_initial' must be at least 1.", field="bh_initial")
        if self.bh_max < self.bh_initial:
            raise ConfigurationError("'bh_max' must not be below 'bh_initial'.", field="bh_max")
        for name in ("max_iterations", "initial_rollouts", "extraction_rollouts",
                     "retrain_rollouts", "max_steps", "threads"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"'{name}' must be at least 1.", field=name)
        if self.seed < 0:
            raise ConfigurationError("'seed' must be non-negative.", field="seed")
        if self.tie_breaking not in ("uniform", "first"):
            raise ConfigurationError(f"Unknown tie-breaking rule '{self.tie_breaking}'.", field="tie_breaking")
