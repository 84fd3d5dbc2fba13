import logging
from dataclasses import dataclass
from enum import Enum
from typing import FrozenSet, Optional, Tuple, Union

import numpy as np
from scipy import sparse

from fscforge.checker import graph
from fscforge.checker.spec import ExpRewardEventually, ProbUntil, Spec
from fscforge.environment.settings import SolverConfig
from fscforge.exceptions.check_error import CheckError
from fscforge.pomdp.pomdp import Dtmc, Mdp

OPTIMALITY_TOLERANCE = 1e-9


class Verdict(Enum):
    SAT = "SAT"
    UNSAT = "UNSAT"
    VALUE = "VALUE"


@dataclass(frozen=True)
class CheckResult:
    """Per-state values of one objective plus the verdict at the initial distribution."""

    values: np.ndarray
    verdict: Verdict
    value: float
    infinite_states: FrozenSet[int]
    iterations: int
    residual: float


@dataclass(frozen=True)
class MdpSolution:
    """
    Optimal values plus, per state, the set of actions an optimal controller may pick.

    Any mixture over `choices` attains `values`; `policy` is its first member.
    """

    values: np.ndarray
    choices: np.ndarray
    iterations: int
    residual: float

    @property
    def policy(self) -> np.ndarray:
        return self.choices.argmax(axis=1)

    def action_of(self, state: int) -> int:
        return int(self.choices[state].argmax())

    def choices_of(self, state: int) -> Tuple[int, ...]:
        return tuple(int(a) for a in np.flatnonzero(self.choices[state]))


def format_value(value: float) -> str:
    """Ten significant digits, trailing zeros kept; +inf renders as 'inf'."""
    return f"{value:#.10g}"


def initial_value(init: np.ndarray, values: np.ndarray) -> float:
    weighted = init > 0
    if np.isinf(values[weighted]).any():
        return float("inf")
    return float(init[weighted] @ values[weighted])


def _label_mask(model: Union[Dtmc, Mdp], name: Optional[str]) -> np.ndarray:
    mask = np.zeros(model.n_states, dtype=bool)
    if name is None:
        return mask
    if name not in model.labels:
        raise CheckError(f"Unknown label '{name}'.", label=name)
    mask[list(model.labels[name])] = True
    return mask


class ModelChecker:
    """
    Explicit-state checker for DTMCs and MDPs.

    Example:
        checker = ModelChecker(SolverConfig(method="exact"))
        result = checker.check(dtmc, parse_spec('P>=0.9 [ F "goal" ]'))
    """

    def __init__(self, solver: Optional[SolverConfig] = None, logger=None):
        self.solver = solver or SolverConfig()
        self.logger = logger or logging.getLogger(__name__)

    def _solve(self, matrix: sparse.csr_matrix, rhs: np.ndarray) -> Tuple[np.ndarray, int, float]:
        """Solves x = M x + b, exactly for small systems, by value iteration from 0 otherwise."""
        n = len(rhs)
        if n == 0:
            return np.zeros(0), 0, 0.0
        if self.solver.use_exact(n):
            system = np.eye(n) - matrix.toarray()
            x = np.linalg.solve(system, rhs)
            residual = float(np.abs(system @ x - rhs).max())
            self.logger.debug(f"📝 Exact elimination on {n} unknowns, residual {residual:.3e}")
            return x, 0, residual

        x = np.zeros(n)
        residual = float("inf")
        for iteration in range(1, self.solver.max_iterations + 1):
            updated = matrix @ x + rhs
            residual = float(np.abs(updated - x).max())
            x = updated
            if residual <= self.solver.tolerance:
                self.logger.debug(f"📝 Value iteration converged after {iteration} sweeps")
                return x, iteration, residual
        self.logger.warning(f"⚠️ Value iteration hit {self.solver.max_iterations} sweeps, residual {residual:.3e}")
        return x, self.solver.max_iterations, residual

    def dtmc_reach_prob(self, d: Dtmc, target: str, avoid: Optional[str] = None) -> CheckResult:
        goal = _label_mask(d, target)
        blocked = _label_mask(d, avoid) & ~goal
        no = graph.dtmc_prob0(d.matrix, goal, blocked)
        yes = graph.dtmc_prob1(d.matrix, goal, no)
        maybe = np.flatnonzero(~(no | yes))

        rows = d.matrix[maybe]
        x, iterations, residual = self._solve(rows[:, maybe], rows @ yes.astype(float))
        values = np.zeros(d.n_states)
        values[yes] = 1.0
        values[maybe] = np.clip(x, 0.0, 1.0)
        value = initial_value(d.init_vector, values)
        self.logger.info(f"📊 P(reach {target}) = {value:.10g} ({len(maybe)} undecided states)")
        return CheckResult(values, Verdict.VALUE, value, frozenset(), iterations, residual)

    def dtmc_expected_reward(self, d: Dtmc, target: str) -> CheckResult:
        goal = _label_mask(d, target)
        no = graph.dtmc_prob0(d.matrix, goal, np.zeros(d.n_states, dtype=bool))
        finite = graph.dtmc_prob1(d.matrix, goal, no)
        unknown = np.flatnonzero(finite & ~goal)

        x, iterations, residual = self._solve(d.matrix[unknown][:, unknown], d.reward_vector[unknown])
        values = np.full(d.n_states, np.inf)
        values[goal] = 0.0
        values[unknown] = x
        infinite = frozenset(int(s) for s in np.flatnonzero(~finite))
        value = initial_value(d.init_vector, values)
        self.logger.info(f"📊 E(reward until {target}) = {value:.10g} ({len(infinite)} infinite states)")
        return CheckResult(values, Verdict.VALUE, value, infinite, iterations, residual)

    def check(self, d: Dtmc, spec: Spec) -> CheckResult:
        objective = spec.objective
        if isinstance(objective, ExpRewardEventually):
            result = self.dtmc_expected_reward(d, objective.target)
        elif isinstance(objective, ProbUntil):
            result = self.dtmc_reach_prob(d, objective.target, objective.avoid)
        else:
            result = self.dtmc_reach_prob(d, objective.target)
        if spec.is_query:
            return result
        verdict = Verdict.SAT if spec.holds(result.value) else Verdict.UNSAT
        self.logger.info(f"📊 Verdict {verdict.value} at value {result.value:.10g}")
        return CheckResult(
            result.values, verdict, result.value, result.infinite_states, result.iterations, result.residual
        )

    def _value_iteration(self, m: Mdp, values: np.ndarray, unknown: np.ndarray, allowed: np.ndarray,
                         maximize: bool, rewards: Optional[np.ndarray]) -> Tuple[np.ndarray, int, float]:
        fill = -np.inf if maximize else np.inf
        finite = np.where(np.isinf(values), 0.0, values)
        residual = 0.0
        iterations = 0
        if not unknown.any():
            return values, iterations, residual
        for iterations in range(1, self.solver.max_iterations + 1):
            q = self._q_values(m, finite, rewards)
            q = np.where(allowed, q, fill)
            best = q.max(axis=1) if maximize else q.min(axis=1)
            residual = float(np.abs(best[unknown] - finite[unknown]).max())
            finite[unknown] = best[unknown]
            if residual <= self.solver.tolerance:
                break
        else:
            self.logger.warning(f"⚠️ MDP value iteration hit the cap, residual {residual:.3e}")
        values = values.copy()
        values[unknown] = finite[unknown]
        return values, iterations, residual

    @staticmethod
    def _q_values(m: Mdp, values: np.ndarray, rewards: Optional[np.ndarray]) -> np.ndarray:
        q = np.column_stack([matrix @ values for matrix in m.action_matrices])
        return q if rewards is None else q + rewards

    def _policy_iteration(self, m: Mdp, values: np.ndarray, unknown: np.ndarray,
                          allowed: np.ndarray, goal: np.ndarray) -> Tuple[np.ndarray, int, float]:
        """
        Minimal expected reward by policy iteration from a proper attractor policy.

        Only strictly better actions are switched in; every intermediate policy reaches the
        goal with probability one.
        """
        rewards = m.reward_matrix
        rows = np.arange(m.n_states)
        index = np.flatnonzero(unknown)
        policy = _attractor(m, goal, unknown, allowed).argmax(axis=1)
        values = values.copy()
        residual = 0.0
        rounds = 0
        if len(index) == 0:
            return values, rounds, residual
        for rounds in range(1, self.solver.max_iterations + 1):
            chain = _policy_matrix(m, policy)[index][:, index]
            x, _, residual = self._solve(chain, rewards[index, policy[index]])
            values[index] = x
            finite_values = np.where(np.isinf(values), 0.0, values)
            q = np.where(allowed, self._q_values(m, finite_values, rewards), np.inf)
            best = q.argmin(axis=1)
            scale = np.maximum(1.0, np.abs(finite_values))
            better = unknown & (q[rows, best] < q[rows, policy] - OPTIMALITY_TOLERANCE * scale)
            if not better.any():
                break
            self.logger.debug(f"🔁 Policy iteration round {rounds} switches {int(better.sum())} states")
            policy[better] = best[better]
        else:
            self.logger.warning(f"⚠️ Policy iteration hit {self.solver.max_iterations} rounds")
        return values, rounds, residual

    def _optimal_actions(self, m: Mdp, values: np.ndarray, allowed: np.ndarray,
                         rewards: Optional[np.ndarray]) -> np.ndarray:
        finite_values = np.where(np.isinf(values), 0.0, values)
        q = np.where(allowed, self._q_values(m, finite_values, rewards), np.nan)
        scale = np.maximum(1.0, np.abs(finite_values))[:, None]
        optimal = allowed & (np.abs(q - finite_values[:, None]) <= OPTIMALITY_TOLERANCE * scale)
        optimal[np.isinf(values)] = False
        return optimal

    def mdp_optimize(self, m: Mdp, spec: Spec) -> MdpSolution:
        maximize = spec.optimization_direction == "max"
        matrices, enabled = m.action_matrices, m.enabled_mask
        goal = _label_mask(m, spec.target)
        blocked = _label_mask(m, spec.avoid) & ~goal

        if spec.is_probability:
            if maximize:
                no = graph.mdp_prob0e(matrices, goal, blocked)
                yes = graph.mdp_prob1e(matrices, enabled, goal, blocked)
            else:
                no = graph.mdp_prob0a(matrices, enabled, goal, blocked)
                yes = graph.mdp_prob1a(matrices, enabled, goal, blocked)
            values = yes.astype(float)
            unknown = ~(no | yes)
            values, iterations, residual = self._value_iteration(m, values, unknown, enabled, maximize, None)
            optimal = self._optimal_actions(m, values, enabled, None)
            if maximize:
                # Optimal actions that move strictly closer to the target; a bare tie-break
                # could keep a value-preserving self-loop forever.
                choices = _attractor(m, goal, (values > 0) & ~goal, optimal)
            else:
                choices = optimal & unknown[:, None]
                choices[no] = (enabled & (_mass_to(m, ~no) == 0))[no]
        else:
            rewards = m.reward_matrix
            if maximize:
                finite = graph.mdp_prob1a(matrices, enabled, goal, blocked)
                allowed = enabled
            else:
                finite = graph.mdp_prob1e(matrices, enabled, goal, blocked)
                allowed = enabled & (_mass_to(m, ~finite) == 0)
            values = np.where(finite, 0.0, np.inf)
            unknown = finite & ~goal
            if maximize:
                values, iterations, residual = self._value_iteration(m, values, unknown, allowed, True, rewards)
            else:
                values, iterations, residual = self._policy_iteration(m, values, unknown, allowed, goal)
            choices = _attractor(m, goal, unknown, self._optimal_actions(m, values, allowed, rewards))
            if maximize:
                choices |= _escape_choices(m, goal, finite, blocked)

        unset = ~choices.any(axis=1)
        choices[unset] = enabled[unset]
        self.logger.info(
            f"📊 Optimal {spec.optimization_direction} values computed in {iterations} rounds "
            f"(residual {residual:.3e})"
        )
        return MdpSolution(values, choices, iterations, residual)


def _mass_to(m: Mdp, mask: np.ndarray) -> np.ndarray:
    """Probability mass each (state, action) pair sends into `mask`."""
    return np.column_stack([matrix @ mask.astype(float) for matrix in m.action_matrices])


def _policy_matrix(m: Mdp, policy: np.ndarray) -> sparse.csr_matrix:
    matrix = sparse.csr_matrix((m.n_states, m.n_states))
    for a, action_matrix in enumerate(m.action_matrices):
        matrix = matrix + sparse.diags((policy == a).astype(float)) @ action_matrix
    return matrix.tocsr()


def _attractor(m: Mdp, done: np.ndarray, region: np.ndarray, candidates: np.ndarray) -> np.ndarray:
    """
    Layers `region` by distance to `done` and keeps, per state, every candidate action that
    reaches an earlier layer with positive probability.
    """
    done = done.copy()
    chosen = np.zeros_like(candidates, dtype=bool)
    while True:
        hits = (_mass_to(m, done) > 0) & candidates
        hits[~region | done] = False
        newly = hits.any(axis=1)
        if not newly.any():
            return chosen
        chosen[newly] = hits[newly]
        done |= newly


def _escape_choices(m: Mdp, goal: np.ndarray, finite: np.ndarray, blocked: np.ndarray) -> np.ndarray:
    """Actions that keep the goal unreached with positive probability, for states of infinite value."""
    enabled = m.enabled_mask
    trapped = graph.mdp_prob0a(m.action_matrices, enabled, goal, blocked)
    choices = _attractor(m, trapped, ~finite & ~goal & ~trapped, enabled)
    choices[trapped] = (enabled & (_mass_to(m, ~trapped) == 0))[trapped]
    return choices


_default_checker = ModelChecker()


def dtmc_reach_prob(d: Dtmc, target: str, avoid: Optional[str] = None) -> CheckResult:
    return _default_checker.dtmc_reach_prob(d, target, avoid)


def dtmc_expected_reward(d: Dtmc, target: str) -> CheckResult:
    return _default_checker.dtmc_expected_reward(d, target)


def mdp_optimize(m: Mdp, spec: Spec) -> MdpSolution:
    return _default_checker.mdp_optimize(m, spec)


def check(d: Dtmc, spec: Spec) -> CheckResult:
    return _default_checker.check(d, spec)
