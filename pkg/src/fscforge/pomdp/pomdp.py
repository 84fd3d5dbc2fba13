import logging
from dataclasses import dataclass
from functools import cached_property
from typing import Dict, FrozenSet, List, Mapping, Tuple

import numpy as np
from scipy import sparse

from fscforge.exceptions.model_validation_error import ModelValidationError

PROB_TOLERANCE = 1e-9

Distribution = Mapping[int, float]

logger = logging.getLogger(__name__)


def sample_cumulative(cumulative: np.ndarray, rng: np.random.Generator) -> int:
    """Index drawn from a cumulative distribution; rounding at the top end maps to the last entry."""
    return int(min(np.searchsorted(cumulative, rng.random(), side="right"), len(cumulative) - 1))


def sample_index(probs: np.ndarray, rng: np.random.Generator) -> int:
    return sample_cumulative(np.cumsum(probs), rng)


def _check_distribution(dist: Distribution, n_states: int, what: str) -> None:
    total = 0.0
    for target, prob in dist.items():
        if not 0 <= target < n_states:
            raise ModelValidationError(f"{what} references unknown state index {target}.", entity=what)
        if not 0.0 <= prob <= 1.0:
            raise ModelValidationError(f"{what} has probability {prob!r} outside [0, 1].", entity=what)
        total += prob
    if abs(total - 1.0) > PROB_TOLERANCE:
        raise ModelValidationError(f"{what} sums to {total!r}, expected 1.", entity=what)


@dataclass(frozen=True)
class Mdp:
    """
    Explicit MDP. Transitions map (state, action) to a successor distribution;
    a (state, action) pair without an entry is disabled.
    """

    state_names: Tuple[str, ...]
    actions: Tuple[str, ...]
    transitions: Mapping[Tuple[int, int], Distribution]
    rewards: Mapping[Tuple[int, int], float]
    init: Distribution
    labels: Mapping[str, FrozenSet[int]]

    def __post_init__(self):
        self.validate()

    @property
    def n_states(self) -> int:
        return len(self.state_names)

    @property
    def n_actions(self) -> int:
        return len(self.actions)

    @cached_property
    def state_index(self) -> Dict[str, int]:
        return {name: i for i, name in enumerate(self.state_names)}

    @cached_property
    def action_index(self) -> Dict[str, int]:
        return {name: i for i, name in enumerate(self.actions)}

    @cached_property
    def enabled_actions(self) -> Tuple[Tuple[int, ...], ...]:
        per_state: List[List[int]] = [[] for _ in range(self.n_states)]
        for (s, a) in self.transitions:
            per_state[s].append(a)
        return tuple(tuple(sorted(actions)) for actions in per_state)

    @cached_property
    def enabled_mask(self) -> np.ndarray:
        mask = np.zeros((self.n_states, self.n_actions), dtype=bool)
        for (s, a) in self.transitions:
            mask[s, a] = True
        return mask

    @cached_property
    def action_matrices(self) -> Tuple[sparse.csr_matrix, ...]:
        """One row-substochastic matrix per action; rows of disabled pairs are empty."""
        rows: List[List[int]] = [[] for _ in self.actions]
        cols: List[List[int]] = [[] for _ in self.actions]
        vals: List[List[float]] = [[] for _ in self.actions]
        for (s, a), dist in self.transitions.items():
            for target, prob in dist.items():
                rows[a].append(s)
                cols[a].append(target)
                vals[a].append(prob)
        shape = (self.n_states, self.n_states)
        return tuple(
            sparse.csr_matrix((vals[a], (rows[a], cols[a])), shape=shape)
            for a in range(self.n_actions)
        )

    @cached_property
    def reward_matrix(self) -> np.ndarray:
        matrix = np.zeros((self.n_states, self.n_actions))
        for (s, a), value in self.rewards.items():
            matrix[s, a] = value
        return matrix

    @cached_property
    def init_vector(self) -> np.ndarray:
        vector = np.zeros(self.n_states)
        for s, prob in self.init.items():
            vector[s] = prob
        return vector

    @cached_property
    def _successor_arrays(self) -> Dict[Tuple[int, int], Tuple[np.ndarray, np.ndarray]]:
        return {
            key: (np.fromiter(dist.keys(), dtype=np.int64), np.cumsum(np.fromiter(dist.values(), dtype=float)))
            for key, dist in self.transitions.items()
        }

    def successors(self, state: int, action: int) -> Tuple[np.ndarray, np.ndarray]:
        """Returns (targets, cumulative probabilities) for sampling a successor."""
        return self._successor_arrays[(state, action)]

    def sample_successor(self, state: int, action: int, rng: np.random.Generator) -> int:
        targets, cumulative = self.successors(state, action)
        return int(targets[sample_cumulative(cumulative, rng)])

    @cached_property
    def _init_arrays(self) -> Tuple[np.ndarray, np.ndarray]:
        return np.fromiter(self.init.keys(), dtype=np.int64), np.cumsum(np.fromiter(self.init.values(), dtype=float))

    def sample_initial(self, rng: np.random.Generator) -> int:
        states, cumulative = self._init_arrays
        return int(states[sample_cumulative(cumulative, rng)])

    def terminal_states(self) -> FrozenSet[int]:
        """Absorbing states that carry at least one label; rollouts stop on entering them."""
        return self._terminal_set

    @cached_property
    def _terminal_set(self) -> FrozenSet[int]:
        labeled = frozenset().union(*self.labels.values()) if self.labels else frozenset()
        return self.absorbing_states() & labeled

    def label_states(self, name: str) -> FrozenSet[int]:
        return self.labels[name]

    def absorbing_states(self) -> FrozenSet[int]:
        """States whose every enabled action is a probability-1 self-loop."""
        absorbing = []
        for s, actions in enumerate(self.enabled_actions):
            if all(self.transitions[(s, a)].get(s, 0.0) == 1.0 for a in actions):
                absorbing.append(s)
        return frozenset(absorbing)

    def validate(self) -> None:
        n = self.n_states
        if n == 0:
            raise ModelValidationError("Model has no states.")
        if len(set(self.state_names)) != n:
            raise ModelValidationError("State names must be unique.")
        if len(set(self.actions)) != len(self.actions):
            raise ModelValidationError("Action names must be unique.")
        for (s, a), dist in self.transitions.items():
            if not 0 <= s < n or not 0 <= a < self.n_actions:
                raise ModelValidationError(f"Transition key ({s}, {a}) is out of range.")
            _check_distribution(dist, n, f"T({self.state_names[s]}, {self.actions[a]})")
        for (s, a) in self.rewards:
            if (s, a) not in self.transitions:
                raise ModelValidationError(
                    f"Reward given for disabled pair ({self.state_names[s]}, {self.actions[a]}).",
                    entity=self.state_names[s],
                )
        enabled = set(s for (s, _) in self.transitions)
        for s in range(n):
            if s not in enabled:
                raise ModelValidationError(
                    f"State {self.state_names[s]} has no enabled action.", entity=self.state_names[s]
                )
        _check_distribution(self.init, n, "init")
        for name, states in self.labels.items():
            if any(not 0 <= s < n for s in states):
                raise ModelValidationError(f"Label '{name}' references an unknown state.", entity=name)


@dataclass(frozen=True)
class Pomdp(Mdp):
    observations: Tuple[str, ...]
    obs_map: Tuple[int, ...]

    @property
    def n_observations(self) -> int:
        return len(self.observations)

    @cached_property
    def observation_index(self) -> Dict[str, int]:
        return {name: i for i, name in enumerate(self.observations)}

    def observation_of(self, state: int) -> str:
        return self.observations[self.obs_map[state]]

    def observation_actions(self) -> np.ndarray:
        """Boolean |Z| x |Act| mask: actions enabled in at least one state with that observation."""
        mask = np.zeros((self.n_observations, self.n_actions), dtype=bool)
        for s, actions in enumerate(self.enabled_actions):
            mask[self.obs_map[s], list(actions)] = True
        # Unused observations keep every action so the network softmax stays defined.
        mask[~mask.any(axis=1)] = True
        return mask

    def underlying_mdp(self) -> Mdp:
        return Mdp(
            state_names=self.state_names,
            actions=self.actions,
            transitions=self.transitions,
            rewards=self.rewards,
            init=self.init,
            labels=self.labels,
        )

    def validate(self) -> None:
        super().validate()
        if len(set(self.observations)) != len(self.observations):
            raise ModelValidationError("Observation names must be unique.")
        if len(self.obs_map) != self.n_states:
            raise ModelValidationError(
                f"Observation map covers {len(self.obs_map)} of {self.n_states} states."
            )
        for s, z in enumerate(self.obs_map):
            if not 0 <= z < len(self.observations):
                raise ModelValidationError(
                    f"State {self.state_names[s]} has unknown observation index {z}.",
                    entity=self.state_names[s],
                )


def underlying_mdp(p: Pomdp) -> Mdp:
    return p.underlying_mdp()


@dataclass(frozen=True)
class Dtmc:
    state_names: Tuple[str, ...]
    transitions: Tuple[Distribution, ...]
    state_rewards: Tuple[float, ...]
    init: Distribution
    labels: Mapping[str, FrozenSet[int]]

    def __post_init__(self):
        self.validate()

    @property
    def n_states(self) -> int:
        return len(self.state_names)

    @cached_property
    def matrix(self) -> sparse.csr_matrix:
        rows, cols, vals = [], [], []
        for s, dist in enumerate(self.transitions):
            for target, prob in dist.items():
                rows.append(s)
                cols.append(target)
                vals.append(prob)
        return sparse.csr_matrix((vals, (rows, cols)), shape=(self.n_states, self.n_states))

    @cached_property
    def reward_vector(self) -> np.ndarray:
        return np.asarray(self.state_rewards, dtype=float)

    @cached_property
    def init_vector(self) -> np.ndarray:
        vector = np.zeros(self.n_states)
        for s, prob in self.init.items():
            vector[s] = prob
        return vector

    def validate(self) -> None:
        n = self.n_states
        if n == 0:
            raise ModelValidationError("Chain has no states.")
        if len(self.transitions) != n or len(self.state_rewards) != n:
            raise ModelValidationError("Chain transitions and rewards must cover every state.")
        for s, dist in enumerate(self.transitions):
            _check_distribution(dist, n, f"P({self.state_names[s]})")
        _check_distribution(self.init, n, "init")
        for name, states in self.labels.items():
            if any(not 0 <= s < n for s in states):
                raise ModelValidationError(f"Label '{name}' references an unknown state.", entity=name)
